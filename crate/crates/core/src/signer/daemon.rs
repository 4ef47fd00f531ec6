//! Local daemon protocol.
//!
//! Each frame is a 32-bit little-endian byte length followed by that many
//! bytes of UTF-8 JSON. A request carries an `op` field; the reply is either
//! `{"ok":true,"result":…}` or `{"ok":false,"err":…,"code":…}`.
//!
//! ```text
//! {"op":"ping"}
//! {"op":"status"}
//! {"op":"issue_device","device":0}
//! {"op":"retire_device","device":0}
//! {"op":"sign","path":"m/0/1","digest":"<64 hex>","summary":"…"}
//! {"op":"unlock","passphrase":"…"}
//! {"op":"lock"}
//! ```

use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::crypto::Signature;
use crate::keyhier::{DerivationPath, ExtendedPublicKey};
use crate::vcr::{SignError, SigningOracle};

use super::{DeviceStatus, Signer};

/// Largest frame either side will read.
pub const MAX_FRAME: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum SignerRequest {
    Ping,
    Status,
    IssueDevice {
        device: u32,
    },
    RetireDevice {
        device: u32,
    },
    Sign {
        path: DerivationPath,
        digest: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        summary: Option<String>,
    },
    Unlock {
        passphrase: String,
    },
    Lock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignerResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub err: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
}

impl SignerResponse {
    fn success(result: Value) -> Self {
        SignerResponse {
            ok: true,
            result: Some(result),
            err: None,
            code: None,
        }
    }

    fn failure(code: &str, err: impl Into<String>) -> Self {
        SignerResponse {
            ok: false,
            result: None,
            err: Some(err.into()),
            code: Some(code.to_string()),
        }
    }
}

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|&n| n as usize <= MAX_FRAME)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// `Ok(None)` on clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "frame too large",
        ));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

fn parse_digest(text: &str) -> Option<[u8; 32]> {
    hex::decode(text).ok()?.try_into().ok()
}

/// Handles one request against a shared signer.
pub fn handle_request(signer: &Mutex<Signer>, req: SignerRequest) -> SignerResponse {
    let mut s = signer.lock().unwrap_or_else(|p| p.into_inner());
    let result = match req {
        SignerRequest::Ping => Ok(json!("pong")),
        SignerRequest::Status => {
            let devices = s.devices().ok().map(|d| {
                d.into_iter()
                    .map(|(i, st)| (i.to_string(), json!(st)))
                    .collect::<serde_json::Map<_, _>>()
            });
            Ok(json!({ "unlocked": s.is_unlocked(), "devices": devices }))
        }
        SignerRequest::IssueDevice { device } => s
            .issue_device_xpub(device)
            .map(|x| json!({ "xpub": x.to_string() })),
        SignerRequest::RetireDevice { device } => s
            .retire_device(device)
            .map(|()| json!({ "retired": device })),
        SignerRequest::Sign {
            path,
            digest,
            summary,
        } => match parse_digest(&digest) {
            None => {
                return SignerResponse::failure("MalformedRequest", "digest must be 32 bytes hex")
            }
            Some(d) => s
                .sign_digest(&path, &d, summary.as_deref())
                .map(|sig| json!({ "signature": sig })),
        },
        SignerRequest::Unlock { passphrase } => s.unlock(&passphrase).map(|()| json!(true)),
        SignerRequest::Lock => {
            s.lock();
            Ok(json!(true))
        }
    };
    match result {
        Ok(v) => SignerResponse::success(v),
        Err(e) => SignerResponse::failure(e.code(), e.to_string()),
    }
}

fn handle_frame(signer: &Mutex<Signer>, frame: &[u8]) -> SignerResponse {
    match serde_json::from_slice::<SignerRequest>(frame) {
        Ok(req) => handle_request(signer, req),
        Err(e) => SignerResponse::failure("MalformedRequest", e.to_string()),
    }
}

/// Serves requests from `input` until it closes. Works over stdio or any
/// connected stream.
pub fn serve_stream<R: Read, W: Write>(
    signer: &Mutex<Signer>,
    mut input: R,
    mut output: W,
) -> io::Result<()> {
    while let Some(frame) = read_frame(&mut input)? {
        let resp = handle_frame(signer, &frame);
        write_frame(
            &mut output,
            &serde_json::to_vec(&resp).expect("response serializes"),
        )?;
    }
    Ok(())
}

/// A daemon listening on a unix socket.
pub struct DaemonHandle {
    socket: PathBuf,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

#[cfg(unix)]
impl DaemonHandle {
    /// Binds `socket` (removing a stale file) and serves on a background
    /// thread, one thread per connection. Requests are serialized by the
    /// signer lock.
    pub fn spawn(signer: Arc<Mutex<Signer>>, socket: &Path) -> io::Result<Self> {
        use std::os::unix::net::UnixListener;
        if socket.exists() {
            std::fs::remove_file(socket)?;
        }
        let listener = UnixListener::bind(socket)?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(conn) = conn else { continue };
                let signer = signer.clone();
                std::thread::spawn(move || {
                    let Ok(reader) = conn.try_clone() else { return };
                    if let Err(e) = serve_stream(&signer, reader, conn) {
                        log::debug!("signer connection closed: {e}");
                    }
                });
            }
        });
        Ok(DaemonHandle {
            socket: socket.to_path_buf(),
            stop,
            thread: Some(thread),
        })
    }

    pub fn socket(&self) -> &Path {
        &self.socket
    }

    /// Blocks until the daemon stops.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = std::os::unix::net::UnixStream::connect(&self.socket);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        let _ = std::fs::remove_file(&self.socket);
    }
}

#[cfg(unix)]
impl Drop for DaemonHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.shutdown();
        }
    }
}

/// Talks to a daemon over its unix socket, one connection per request.
#[derive(Debug, Clone)]
pub struct SignerClient {
    socket: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("signer transport: {0}")]
    Transport(String),
    #[error("{code}: {err}")]
    Remote { code: String, err: String },
}

impl ClientError {
    pub fn code(&self) -> &str {
        match self {
            ClientError::Transport(_) => "SignerUnavailable",
            ClientError::Remote { code, .. } => code,
        }
    }
}

#[cfg(unix)]
impl SignerClient {
    pub fn new(socket: impl Into<PathBuf>) -> Self {
        SignerClient {
            socket: socket.into(),
        }
    }

    pub fn call(&self, req: &SignerRequest) -> Result<Value, ClientError> {
        let transport = |e: io::Error| ClientError::Transport(e.to_string());
        let mut conn = std::os::unix::net::UnixStream::connect(&self.socket).map_err(transport)?;
        write_frame(
            &mut conn,
            &serde_json::to_vec(req).expect("request serializes"),
        )
        .map_err(transport)?;
        let frame = read_frame(&mut conn)
            .map_err(transport)?
            .ok_or_else(|| ClientError::Transport("daemon closed the connection".into()))?;
        let resp: SignerResponse =
            serde_json::from_slice(&frame).map_err(|e| ClientError::Transport(e.to_string()))?;
        if resp.ok {
            Ok(resp.result.unwrap_or(Value::Null))
        } else {
            Err(ClientError::Remote {
                code: resp.code.unwrap_or_default(),
                err: resp.err.unwrap_or_default(),
            })
        }
    }

    pub fn issue_device_xpub(&self, device: u32) -> Result<ExtendedPublicKey, ClientError> {
        let v = self.call(&SignerRequest::IssueDevice { device })?;
        v.get("xpub")
            .and_then(Value::as_str)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ClientError::Transport("bad xpub in reply".into()))
    }

    pub fn retire_device(&self, device: u32) -> Result<(), ClientError> {
        self.call(&SignerRequest::RetireDevice { device })
            .map(|_| ())
    }

    pub fn devices(&self) -> Result<Vec<(u32, DeviceStatus)>, ClientError> {
        let v = self.call(&SignerRequest::Status)?;
        let map = v
            .get("devices")
            .and_then(Value::as_object)
            .cloned()
            .unwrap_or_default();
        Ok(map
            .into_iter()
            .filter_map(|(k, v)| Some((k.parse().ok()?, serde_json::from_value(v).ok()?)))
            .collect())
    }
}

#[cfg(unix)]
impl SigningOracle for SignerClient {
    fn sign_digest(
        &self,
        path: &DerivationPath,
        digest: &[u8; 32],
        summary: Option<&str>,
    ) -> Result<Signature, SignError> {
        let reply = self.call(&SignerRequest::Sign {
            path: path.clone(),
            digest: hex::encode(digest),
            summary: summary.map(str::to_string),
        });
        match reply {
            Ok(v) => v
                .get("signature")
                .cloned()
                .and_then(|s| serde_json::from_value(s).ok())
                .ok_or_else(|| SignError::Transport("bad signature in reply".into())),
            Err(ClientError::Remote { code, err }) => Err(match code.as_str() {
                "SignerRefused" => SignError::Refused,
                "Locked" => SignError::Locked,
                "DeviceRetired" => {
                    SignError::DeviceRetired(path.segments().first().copied().unwrap_or(0))
                }
                "MalformedPath" => SignError::MalformedPath(err),
                _ => SignError::Transport(format!("{code}: {err}")),
            }),
            Err(e) => Err(SignError::Transport(e.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signer::KdfParams;

    #[test]
    fn frames_round_trip_over_a_buffer() {
        let dir = tempfile::tempdir().unwrap();
        let signer = Mutex::new(
            Signer::init(
                dir.path().join("s.json"),
                "pw",
                &[5u8; 32],
                KdfParams::fast_insecure(),
            )
            .unwrap(),
        );
        let mut input = Vec::new();
        for req in [
            json!({"op":"issue_device","device":0}),
            json!({"op":"sign","path":"m/0/1","digest": hex::encode([2u8; 32])}),
            json!({"op":"bogus"}),
        ] {
            write_frame(&mut input, req.to_string().as_bytes()).unwrap();
        }
        write_frame(&mut input, b"\xff\x00").unwrap();
        let mut output = Vec::new();
        serve_stream(&signer, input.as_slice(), &mut output).unwrap();
        let mut cursor = output.as_slice();
        let mut replies = Vec::new();
        while let Some(f) = read_frame(&mut cursor).unwrap() {
            replies.push(serde_json::from_slice::<SignerResponse>(&f).unwrap());
        }
        assert_eq!(replies.len(), 4);
        assert!(replies[0].ok && replies[1].ok);
        assert_eq!(replies[2].code.as_deref(), Some("MalformedRequest"));
        assert!(!replies[3].ok);
    }

    #[test]
    fn oversized_frame_is_rejected() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&((MAX_FRAME as u32) + 1).to_le_bytes());
        assert!(read_frame(&mut buf.as_slice()).is_err());
    }

    #[cfg(unix)]
    #[test]
    fn socket_client_signs_and_is_refused_after_retire() {
        let dir = tempfile::tempdir().unwrap();
        let signer = Arc::new(Mutex::new(
            Signer::init(
                dir.path().join("s.json"),
                "pw",
                &[5u8; 32],
                KdfParams::fast_insecure(),
            )
            .unwrap(),
        ));
        let daemon = DaemonHandle::spawn(signer, &dir.path().join("sock")).unwrap();
        let client = SignerClient::new(daemon.socket());
        let xpub = client.issue_device_xpub(2).unwrap();
        let path: DerivationPath = "m/2/4".parse().unwrap();
        let sig = client.sign_digest(&path, &[9u8; 32], None).unwrap();
        assert!(xpub
            .derive_child_pub(4)
            .unwrap()
            .public_key()
            .verify_prehash(&[9u8; 32], &sig));
        client.retire_device(2).unwrap();
        assert_eq!(
            client.sign_digest(&path, &[9u8; 32], None),
            Err(SignError::DeviceRetired(2))
        );
        assert_eq!(client.devices().unwrap(), vec![(2, DeviceStatus::Retired)]);
    }
}
