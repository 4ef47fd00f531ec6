//! Command-line front end. The `viceroy` binary calls [`main`].
//!
//! Files live under `--home` (or `VICEROY_HOME`, default `~/.viceroy`):
//! `signer.json`, `agent.json`, `server-key.json` and `signer.sock`.
//! Failures print `error: <Code>: <detail>` on stderr and exit with 1.

use std::fs;
use std::io::{self, BufRead, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::agent::{
    export_store, import_store, origin_of, unlink_device, AgentError, AgentStore, HttpTransport,
    SessionOptions, VcrOptions,
};
use crate::bench::{self, BenchError};
use crate::clock::unix_now;
use crate::encoding::{to_wire, WireMode};
use crate::keyhier::ExtendedPublicKey;
use crate::server::{http, load_or_generate_key, ServerConfig, ServerError, ViceroyServer};
use crate::signer::{
    serve_stream, ClientError, ConfirmationPolicy, DaemonHandle, KdfParams, Signer, SignerClient,
    SignerError,
};
use crate::vcr::{FieldChange, SigningOracle, VcrAction};

#[derive(Debug)]
pub struct CliError {
    pub code: String,
    pub message: String,
}

impl CliError {
    fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        CliError {
            code: code.into(),
            message: message.into(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

macro_rules! coded {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new(e.code(), e.to_string())
            }
        }
    )*};
}
coded!(AgentError, SignerError, ClientError, BenchError);

impl From<ServerError> for CliError {
    fn from(e: ServerError) -> Self {
        CliError::new("ServerError", e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::new("IoError", e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "viceroy",
    version,
    about = "Accountless consumer data requests"
)]
pub struct Cli {
    /// Directory holding signer, agent and server files.
    #[arg(long, env = "VICEROY_HOME", global = true)]
    pub home: Option<PathBuf>,

    /// Use a running signer daemon instead of opening the state file.
    #[arg(long, env = "VICEROY_SIGNER_SOCKET", global = true)]
    pub signer_socket: Option<PathBuf>,

    /// How signing requests are approved when the state file is opened
    /// directly.
    #[arg(long, env = "VICEROY_APPROVE", value_enum, default_value_t = Approve::Prompt, global = true)]
    pub approve: Approve,

    /// Read the signer passphrase from this file (first line).
    #[arg(long, global = true)]
    pub passphrase_file: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Approve {
    Auto,
    Prompt,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Optimized,
    Verbose,
}

impl From<Mode> for WireMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Optimized => WireMode::Optimized,
            Mode::Verbose => WireMode::Verbose,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create the encrypted signer state.
    SignerInit {
        /// Master seed as hex (16 to 64 bytes). Random if omitted.
        #[arg(long)]
        seed_hex: Option<String>,
        #[arg(long, default_value_t = KdfParams::default().m_cost_kib)]
        kdf_memory_kib: u32,
        #[arg(long, default_value_t = KdfParams::default().t_cost)]
        kdf_iterations: u32,
    },
    /// Unlock the signer and serve signing requests until interrupted.
    SignerUnlock {
        /// Socket path (default: <home>/signer.sock).
        #[arg(long)]
        socket: Option<PathBuf>,
        /// Serve framed requests on stdin/stdout instead of a socket.
        #[arg(long)]
        stdio: bool,
    },
    /// Issue the device key m/<device>.
    DeviceIssue { device: u32 },
    /// Refuse all further signing for a device.
    DeviceRetire { device: u32 },
    /// Create the agent store for a device.
    AgentInit {
        #[arg(long, default_value_t = 0)]
        device: u32,
        /// Device key from another machine's signer; asks the signer if omitted.
        #[arg(long)]
        xpub: Option<String>,
    },
    /// Mark this agent's device unlinked. Sessions stay exportable.
    AgentUnlink,
    /// Fetch a page, opening a session if the server advertises.
    Visit {
        url: String,
        /// Derive the session under the per-server scope.
        #[arg(long)]
        unified: bool,
    },
    /// List sessions.
    Sessions {
        #[arg(long)]
        json: bool,
    },
    /// Show one session's visit history.
    History {
        sid: String,
        #[arg(long)]
        json: bool,
    },
    /// Build, sign and submit a request.
    Vcr(VcrArgs),
    /// Run the reference server.
    Serve(ServeArgs),
    /// Measure latency, bandwidth and storage.
    Bench {
        #[arg(long, default_value_t = bench::DEFAULT_RUNS)]
        runs: usize,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
        /// Exit non-zero if any phase averages over the latency envelope.
        #[arg(long)]
        check: bool,
    },
    /// Write the agent store to stdout or a file.
    Export {
        #[arg(long, value_enum, default_value_t = Mode::Optimized)]
        mode: Mode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Load an agent store exported elsewhere.
    Import {
        file: PathBuf,
        /// Replace an existing store.
        #[arg(long)]
        force: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Access,
    Modify,
    Delete,
}

#[derive(Debug, Args)]
pub struct VcrArgs {
    pub kind: Kind,
    /// Sessions to cover (SID or SID prefix).
    pub sids: Vec<String>,
    /// Cover every session with this origin instead of listing SIDs.
    #[arg(long)]
    pub origin: Option<String>,
    /// One signature under the server-scoped key.
    #[arg(long)]
    pub unified: bool,
    /// Ask for the response encrypted to a one-off key.
    #[arg(long)]
    pub encrypt_response: bool,
    /// Encrypt the whole request to the server key.
    #[arg(long)]
    pub seal: bool,
    /// MODIFY change as field=old:new (repeatable).
    #[arg(long = "set", value_parser = parse_change)]
    pub changes: Vec<FieldChange>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "VICEROY_LISTEN", default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,
    #[arg(long, env = "VICEROY_TOLERANCE", default_value_t = crate::replay::DEFAULT_TOLERANCE_SECS)]
    pub tolerance: u64,
    /// Signing key file (default: <home>/server-key.json).
    #[arg(long)]
    pub key_file: Option<PathBuf>,
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
}

fn parse_change(text: &str) -> Result<FieldChange, String> {
    let (field, rest) = text.split_once('=').ok_or("expected field=old:new")?;
    let (old, new) = rest.split_once(':').ok_or("expected field=old:new")?;
    if field.is_empty() {
        return Err("empty field name".into());
    }
    Ok(FieldChange::new(field, old, new))
}

struct Ctx {
    home: PathBuf,
    signer_socket: Option<PathBuf>,
    approve: Approve,
    passphrase_file: Option<PathBuf>,
}

impl Ctx {
    fn signer_path(&self) -> PathBuf {
        self.home.join("signer.json")
    }

    fn agent_path(&self) -> PathBuf {
        self.home.join("agent.json")
    }

    fn passphrase(&self) -> CliResult<String> {
        if let Some(p) = &self.passphrase_file {
            let text = fs::read_to_string(p)?;
            return Ok(text.lines().next().unwrap_or("").to_string());
        }
        if let Ok(p) = std::env::var("VICEROY_PASSPHRASE") {
            return Ok(p);
        }
        eprint!("passphrase: ");
        io::stderr().flush()?;
        let mut line = String::new();
        io::stdin().lock().read_line(&mut line)?;
        Ok(line.trim_end_matches(['\r', '\n']).to_string())
    }

    fn policy(&self) -> ConfirmationPolicy {
        match self.approve {
            Approve::Auto => ConfirmationPolicy::AutoApprove,
            Approve::Deny => ConfirmationPolicy::DenyAll,
            Approve::Prompt => ConfirmationPolicy::Prompt(Arc::new(|req| {
                eprintln!(
                    "sign {} for: {}",
                    req.path,
                    req.summary.unwrap_or("(no description)")
                );
                eprint!("approve? [y/N] ");
                let _ = io::stderr().flush();
                let mut line = String::new();
                io::stdin().lock().read_line(&mut line).is_ok()
                    && matches!(line.trim(), "y" | "Y" | "yes")
            })),
        }
    }

    fn open_signer(&self) -> CliResult<Signer> {
        let mut s = Signer::open(self.signer_path())?;
        s.unlock(&self.passphrase()?)?;
        s.set_policy(self.policy());
        Ok(s)
    }

    fn signing_oracle(&self) -> CliResult<Box<dyn SigningOracle>> {
        match &self.signer_socket {
            Some(sock) => Ok(Box::new(SignerClient::new(sock))),
            None => Ok(Box::new(self.open_signer()?)),
        }
    }

    fn load_agent(&self) -> CliResult<AgentStore> {
        let path = self.agent_path();
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => CliError::new(
                "NotProvisioned",
                format!("no agent store at {}; run agent-init", path.display()),
            ),
            _ => e.into(),
        })?;
        Ok(import_store(&bytes)?)
    }

    fn save_agent(&self, store: &AgentStore) -> CliResult {
        crate::fsutil::write_atomic(
            &self.agent_path(),
            &export_store(store, WireMode::Optimized),
        )?;
        Ok(())
    }
}

/// Startup line for long-running commands. Whoever launched us may stop
/// reading after it, so write failures are ignored.
fn announce(text: &str) {
    let mut out = io::stdout().lock();
    let _ = writeln!(out, "{text}");
    let _ = out.flush();
}

fn now() -> CliResult<u64> {
    unix_now().ok_or_else(|| CliError::new("ClockUnavailable", "system clock before 1970"))
}

fn default_home() -> PathBuf {
    std::env::var_os("HOME")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
        .join(".viceroy")
}

/// Parses arguments, runs, and exits.
pub fn main() -> ! {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => std::process::exit(0),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}

pub fn run(cli: Cli) -> CliResult {
    let ctx = Ctx {
        home: cli.home.unwrap_or_else(default_home),
        signer_socket: cli.signer_socket,
        approve: cli.approve,
        passphrase_file: cli.passphrase_file,
    };
    fs::create_dir_all(&ctx.home)?;
    match cli.command {
        Command::SignerInit {
            seed_hex,
            kdf_memory_kib,
            kdf_iterations,
        } => {
            let kdf = KdfParams {
                m_cost_kib: kdf_memory_kib,
                t_cost: kdf_iterations,
                p_cost: 1,
            };
            let path = ctx.signer_path();
            if path.exists() {
                return Err(SignerError::StateExists(path).into());
            }
            let pass = ctx.passphrase()?;
            if pass.is_empty() {
                return Err(CliError::new("EmptyPassphrase", "a passphrase is required"));
            }
            match seed_hex {
                Some(h) => {
                    let seed = zeroize::Zeroizing::new(
                        hex::decode(h.trim())
                            .map_err(|e| CliError::new("InvalidSeed", e.to_string()))?,
                    );
                    Signer::init(&path, &pass, &seed, kdf)?;
                }
                None => {
                    Signer::init_random(&path, &pass, kdf)?;
                }
            }
            println!("signer state written to {}", path.display());
        }
        Command::SignerUnlock { socket, stdio } => {
            let signer = Arc::new(Mutex::new(ctx.open_signer()?));
            if stdio {
                serve_stream(&signer, io::stdin().lock(), io::stdout().lock())?;
            } else {
                let sock = socket.unwrap_or_else(|| ctx.home.join("signer.sock"));
                let daemon = DaemonHandle::spawn(signer, &sock)?;
                announce(&format!("signer listening on {}", sock.display()));
                daemon.join();
            }
        }
        Command::DeviceIssue { device } => println!("{}", issue_device(&ctx, device)?),
        Command::DeviceRetire { device } => {
            match &ctx.signer_socket {
                Some(sock) => SignerClient::new(sock).retire_device(device)?,
                None => ctx.open_signer()?.retire_device(device)?,
            }
            println!("device {device} retired");
        }
        Command::AgentInit { device, xpub } => {
            if ctx.agent_path().exists() {
                return Err(AgentError::AlreadyProvisioned.into());
            }
            let xpub: ExtendedPublicKey = match xpub {
                Some(x) => x.parse().map_err(|e: crate::keyhier::KeyError| {
                    CliError::new("InvalidDeviceKey", e.to_string())
                })?,
                None => issue_device(&ctx, device)?,
            };
            let mut slot = None;
            crate::agent::provision_device(&mut slot, xpub, device)?;
            ctx.save_agent(slot.as_ref().expect("just provisioned"))?;
            println!("agent provisioned for device {device}");
        }
        Command::AgentUnlink => {
            let mut store = ctx.load_agent()?;
            unlink_device(&mut store);
            ctx.save_agent(&store)?;
            println!("device {} unlinked", store.device_id());
        }
        Command::Visit { url, unified } => {
            let mut store = ctx.load_agent()?;
            let transport = HttpTransport::new()?;
            let opts = SessionOptions {
                unified,
                ..SessionOptions::default()
            };
            let out = store.visit(&transport, &url, now()?, &opts)?;
            ctx.save_agent(&store)?;
            match out.new_session {
                Some(i) => {
                    let s = &store.sessions()[i];
                    println!(
                        "{} {} new session {} ({})",
                        out.status,
                        url,
                        s.sid(),
                        s.path
                    );
                }
                None => println!(
                    "{} {} recorded in {} session(s)",
                    out.status, url, out.recorded
                ),
            }
        }
        Command::Sessions { json } => {
            let store = ctx.load_agent()?;
            if json {
                let list: Vec<_> = store
                    .sessions()
                    .iter()
                    .map(|s| {
                        json!({
                            "sid": s.sid(),
                            "origin": s.server_origin,
                            "path": s.path.to_string(),
                            "cookie": s.client_id.to_string(),
                            "created_at": s.created_at,
                            "visits": s.history.len(),
                        })
                    })
                    .collect();
                println!("{}", serde_json::to_string_pretty(&list).expect("json"));
            } else {
                println!("{:<8}  {:<28} {:<22} visits", "SID", "ORIGIN", "PATH");
                for s in store.sessions() {
                    println!(
                        "{:<8}  {:<28} {:<22} {}",
                        s.sid(),
                        s.server_origin,
                        s.path.to_string(),
                        s.history.len()
                    );
                }
            }
        }
        Command::History { sid, json } => {
            let store = ctx.load_agent()?;
            let s = &store.sessions()[store.find_sid(&sid)?];
            if json {
                println!("{}", to_wire(&s.history, WireMode::Verbose));
            } else {
                for v in &s.history {
                    println!("{}  {}{}", v.visited_at, s.server_origin, v.url);
                }
            }
        }
        Command::Vcr(args) => run_vcr(&ctx, args)?,
        Command::Serve(args) => serve(&ctx, args)?,
        Command::Bench { runs, json, check } => {
            let report = bench::run(runs)?;
            if json {
                println!("{}", report.to_json());
            } else {
                println!("{report}");
            }
            if check {
                report
                    .check_latency()
                    .map_err(|slow| CliError::new("LatencyEnvelopeExceeded", slow))?;
            }
        }
        Command::Export { mode, out } => {
            let store = ctx.load_agent()?;
            let bytes = export_store(&store, mode.into());
            match out {
                Some(p) => crate::fsutil::write_atomic(&p, &bytes)?,
                None => {
                    io::stdout().write_all(&bytes)?;
                    println!();
                }
            }
        }
        Command::Import { file, force } => {
            let bytes = fs::read(&file)?;
            let store = import_store(&bytes)?;
            if ctx.agent_path().exists() && !force {
                return Err(AgentError::AlreadyProvisioned.into());
            }
            ctx.save_agent(&store)?;
            println!(
                "imported {} session(s) for device {}",
                store.sessions().len(),
                store.device_id()
            );
        }
    }
    Ok(())
}

fn issue_device(ctx: &Ctx, device: u32) -> CliResult<ExtendedPublicKey> {
    Ok(match &ctx.signer_socket {
        Some(sock) => SignerClient::new(sock).issue_device_xpub(device)?,
        None => ctx.open_signer()?.issue_device_xpub(device)?,
    })
}

fn run_vcr(ctx: &Ctx, args: VcrArgs) -> CliResult {
    let store = ctx.load_agent()?;
    let mut indices = Vec::new();
    for sid in &args.sids {
        indices.push(store.find_sid(sid)?);
    }
    if let Some(origin) = &args.origin {
        let origin = origin_of(origin)?;
        indices.extend(
            store
                .sessions_for_origin(&origin)
                .into_iter()
                .filter(|&i| !args.unified || store.sessions()[i].is_unified())
                .filter(|i| !indices.contains(i))
                .collect::<Vec<_>>(),
        );
    }
    if indices.is_empty() {
        return Err(CliError::new(
            "UnknownSession",
            "name sessions by SID or --origin",
        ));
    }
    let action = match args.kind {
        Kind::Access => VcrAction::access(),
        Kind::Delete => VcrAction::Delete,
        Kind::Modify => {
            if args.changes.is_empty() {
                return Err(CliError::new(
                    "InvalidOption",
                    "modify needs at least one --set field=old:new",
                ));
            }
            VcrAction::Modify {
                changes: args.changes.clone(),
            }
        }
    };
    let opts = VcrOptions {
        unified: args.unified,
        encrypt_response: args.encrypt_response,
        seal: args.seal,
    };
    let oracle = ctx.signing_oracle()?;
    let transport = HttpTransport::new()?;
    let mut ts = now()?;
    let mut retried = false;
    let outcome = loop {
        let mut prepared = store.prepare_vcr(&indices, action.clone(), &opts, ts)?;
        prepared.sign_with(oracle.as_ref())?;
        if !prepared.is_complete() {
            return Err(CliError::new(
                "MissingSignature",
                "request needs co-signatures this device cannot produce",
            ));
        }
        match prepared.submit(&transport) {
            // An identical body was already sent this second; the timestamp
            // is the only thing that can differ, so move to the next second.
            Err(AgentError::ServerRejected { error, .. })
                if error == "ReplayDetected" && !retried =>
            {
                retried = true;
                let next = ts + 1;
                while now()? < next {
                    std::thread::sleep(std::time::Duration::from_millis(50));
                }
                ts = next;
            }
            other => break other?,
        }
    };
    if args.json {
        let body = match &outcome.records {
            Some(records) => to_wire(&json!({ "records": records }), WireMode::Verbose),
            None => to_wire(&outcome.response, WireMode::Verbose),
        };
        println!("{body}");
        return Ok(());
    }
    match &outcome.records {
        Some(records) => {
            for r in records {
                println!("client {}", r.client_id);
                for (k, v) in &r.attributes {
                    println!("  {k} = {v}");
                }
                for v in &r.visits {
                    println!("  {}  {}", v.visited_at, v.url);
                }
            }
        }
        None => println!("{}", to_wire(&outcome.response, WireMode::Verbose)),
    }
    Ok(())
}

fn serve(ctx: &Ctx, args: ServeArgs) -> CliResult {
    let key_file = args
        .key_file
        .unwrap_or_else(|| ctx.home.join("server-key.json"));
    let key = load_or_generate_key(&key_file)?;
    let config = ServerConfig {
        tolerance_secs: args.tolerance,
        snapshot_path: args.snapshot,
        ..ServerConfig::default()
    };
    let server = Arc::new(ViceroyServer::new(key, config)?);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(args.listen).await?;
        announce(&format!(
            "listening on {}\nserver key {}",
            listener.local_addr()?,
            server.public_key()
        ));
        axum::serve(listener, http::router(server)).await
    })?;
    Ok(())
}
