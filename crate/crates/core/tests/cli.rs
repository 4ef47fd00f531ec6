use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, ChildStdout, Command, Output, Stdio};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_viceroy");

fn viceroy(home: &Path, envs: &[(&str, &str)], args: &[&str]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args)
        .env("VICEROY_HOME", home)
        .env("VICEROY_PASSPHRASE", "pw")
        .env("VICEROY_APPROVE", "auto")
        .env_remove("VICEROY_SIGNER_SOCKET")
        .stdin(Stdio::null());
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("run viceroy")
}

fn ok(home: &Path, args: &[&str]) -> String {
    let out = viceroy(home, &[], args);
    assert!(
        out.status.success(),
        "viceroy {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err_code(out: &Output) -> String {
    assert!(!out.status.success(), "expected failure");
    let stderr = String::from_utf8_lossy(&out.stderr);
    stderr
        .trim()
        .strip_prefix("error: ")
        .and_then(|s| s.split(':').next())
        .unwrap_or_else(|| panic!("unexpected stderr {stderr}"))
        .to_string()
}

struct Proc(Child, #[allow(dead_code)] BufReader<ChildStdout>);

impl Drop for Proc {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Starts a long-running subcommand and returns it with its first stdout line.
fn spawn(home: &Path, args: &[&str]) -> (Proc, String) {
    let mut child = Command::new(BIN)
        .args(args)
        .env("VICEROY_HOME", home)
        .env("VICEROY_PASSPHRASE", "pw")
        .env("VICEROY_APPROVE", "auto")
        .stdout(Stdio::piped())
        .stdin(Stdio::null())
        .spawn()
        .unwrap();
    let mut out = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    out.read_line(&mut line).unwrap();
    (Proc(child, out), line.trim().to_string())
}

fn serve(home: &Path) -> (Proc, String) {
    let (p, line) = spawn(home, &["serve", "--listen", "127.0.0.1:0"]);
    let addr = line
        .strip_prefix("listening on ")
        .expect("listen line")
        .to_string();
    (p, format!("http://{addr}"))
}

fn init(home: &Path) {
    ok(
        home,
        &[
            "signer-init",
            "--kdf-memory-kib",
            "256",
            "--kdf-iterations",
            "1",
        ],
    );
    ok(home, &["agent-init"]);
}

#[test]
fn errors_carry_stable_codes() {
    let home = tempfile::tempdir().unwrap();
    let h = home.path();
    assert_eq!(err_code(&viceroy(h, &[], &["sessions"])), "NotProvisioned");
    assert_eq!(
        err_code(&viceroy(h, &[], &["device-issue", "0"])),
        "StateMissing"
    );
    init(h);
    assert_eq!(
        err_code(&viceroy(h, &[], &["agent-init"])),
        "AlreadyProvisioned"
    );
    assert_eq!(err_code(&viceroy(h, &[], &["signer-init"])), "StateExists");
    assert_eq!(
        err_code(&viceroy(
            h,
            &[("VICEROY_PASSPHRASE", "nope")],
            &["device-issue", "1"]
        )),
        "WrongPassphrase"
    );
    assert_eq!(
        err_code(&viceroy(h, &[], &["history", "ffff"])),
        "UnknownSession"
    );
    let usage = viceroy(h, &[], &["vcr", "modify", "--set", "no-equals-sign"]);
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn flows_through_signer_daemon() {
    let home = tempfile::tempdir().unwrap();
    let h = home.path();
    ok(
        h,
        &[
            "signer-init",
            "--kdf-memory-kib",
            "256",
            "--kdf-iterations",
            "1",
        ],
    );
    let (_daemon, line) = spawn(h, &["signer-unlock"]);
    let socket = line
        .strip_prefix("signer listening on ")
        .unwrap()
        .to_string();
    let (_server, origin) = serve(h);
    let sock = [("VICEROY_SIGNER_SOCKET", socket.as_str())];
    // No passphrase needed once the daemon holds the unlocked state.
    let run = |args: &[&str]| viceroy(h, &[sock[0], ("VICEROY_PASSPHRASE", "")], args);

    assert!(run(&["agent-init", "--device", "2"]).status.success());
    assert!(run(&["visit", &format!("{origin}/x")]).status.success());
    // Two identical requests in one second: the second is retried with the
    // next second's timestamp.
    for _ in 0..2 {
        let out = run(&["vcr", "access", "--origin", &origin, "--json"]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(v["records"][0]["visits"][0]["url"], "/x");
    }
    assert!(run(&["device-retire", "2"]).status.success());
    assert_eq!(
        err_code(&run(&["vcr", "delete", "--origin", &origin])),
        "DeviceRetired"
    );
}

#[test]
fn export_import_moves_sessions_between_homes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    init(a.path());
    let (_server, origin) = serve(a.path());
    ok(a.path(), &["visit", &format!("{origin}/one")]);
    ok(a.path(), &["visit", &format!("{origin}/two"), "--unified"]);

    let file = a.path().join("export.json");
    ok(
        a.path(),
        &[
            "export",
            "--mode",
            "verbose",
            "--out",
            file.to_str().unwrap(),
        ],
    );
    let text = std::fs::read_to_string(&file).unwrap();
    assert!(
        text.contains("\"history\""),
        "verbose export uses long keys"
    );

    // The second home shares the signer state, as a restored backup would.
    std::fs::copy(a.path().join("signer.json"), b.path().join("signer.json")).unwrap();
    ok(b.path(), &["import", file.to_str().unwrap()]);
    let listed: serde_json::Value =
        serde_json::from_str(&ok(b.path(), &["sessions", "--json"])).unwrap();
    assert_eq!(listed.as_array().unwrap().len(), 1);
    assert_eq!(listed[0]["visits"], 2);
    let sid = listed[0]["sid"].as_str().unwrap();
    let history = ok(b.path(), &["history", sid]);
    assert!(history.contains("/one") && history.contains("/two"));
    let out = ok(b.path(), &["vcr", "delete", sid, "--seal", "--json"]);
    assert!(out.contains("deleted"));

    assert_eq!(
        err_code(&viceroy(b.path(), &[], &["import", file.to_str().unwrap()])),
        "AlreadyProvisioned"
    );
    let cookie = listed[0]["cookie"]
        .as_str()
        .unwrap()
        .strip_prefix("vid=")
        .unwrap();
    let swapped: String = cookie.chars().rev().collect();
    std::fs::write(&file, text.replace(cookie, &swapped)).unwrap();
    assert_eq!(
        err_code(&viceroy(
            b.path(),
            &[],
            &["import", "--force", file.to_str().unwrap()]
        )),
        "CorruptStore"
    );
}

#[test]
fn deny_policy_refuses_signing() {
    let home = tempfile::tempdir().unwrap();
    let h = home.path();
    init(h);
    let (_server, origin) = serve(h);
    ok(h, &["visit", &format!("{origin}/")]);
    let out = viceroy(
        h,
        &[("VICEROY_APPROVE", "deny")],
        &["vcr", "access", "--origin", &origin],
    );
    assert_eq!(err_code(&out), "SignerRefused");
}

#[test]
fn bench_json_and_check() {
    let home = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = ok(home.path(), &["bench", "--runs", "2", "--json", "--check"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["schema"], "viceroy-bench/1");
    assert_eq!(v["latency_ms"].as_object().unwrap().len(), 8);
    assert!(v["wrapper_flow"]["request_payload"].as_u64().unwrap() > 0);
    assert!(start.elapsed() < Duration::from_secs(60));
}
