//! Reference data-holding server.
//!
//! [`ViceroyServer`] is transport-independent: each handler takes the parts
//! of an HTTP request it needs and returns an [`HttpReply`]. The [`http`]
//! submodule mounts those handlers on an axum router.
//!
//! Every page response advertises the protocol through three headers
//! ([`WRAPPER_ENDPOINT_HEADER`], [`VCR_ENDPOINT_HEADER`],
//! [`SERVER_KEY_HEADER`]). First-time visitors get a client-id cookie.
//! Collected data (visits and a small attribute map) lives in memory under
//! that cookie, with an optional JSON snapshot file.

pub mod http;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::b64;
use crate::clock::{Clock, SystemClock};
use crate::crypto::{
    hybrid_decrypt, hybrid_encrypt, CryptoError, HybridCiphertext, PublicKey, SecretKey,
};
use crate::encoding::{from_wire_bytes, to_wire, WireMode};
use crate::replay::{ReplayCache, DEFAULT_TOLERANCE_SECS};
use crate::vcr::{
    unseal_vcr, verify_vcr, VcrAction, VcrError, VcrRequest, VcrSubmission, VerifiedRequest,
};
use crate::wrapper::{
    issue_wrapper, ClientId, MultiSigPolicy, ServerKeyId, ServerKeyring, ServerSigningKey,
    WrapperError,
};

pub const WRAPPER_ENDPOINT_HEADER: &str = "viceroy-wrapper-endpoint";
pub const VCR_ENDPOINT_HEADER: &str = "viceroy-vcr-endpoint";
pub const SERVER_KEY_HEADER: &str = "viceroy-server-key";

pub const DEFAULT_COOKIE_NAME: &str = "vid";
pub const DEFAULT_WRAPPER_ENDPOINT: &str = "/viceroy/w";
pub const DEFAULT_VCR_ENDPOINT: &str = "/viceroy/v";

const ACCESS_RESPONSE_LABEL: &[u8] = b"viceroy/access-response/v1";

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad key file: {0}")]
    KeyFile(String),
    #[error("bad snapshot: {0}")]
    Snapshot(String),
    #[error("invalid config: {0}")]
    Config(String),
}

/// One recorded page view.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Visit {
    pub visited_at: u64,
    /// URL path (no origin).
    pub url: String,
}

/// Everything the server holds about one client id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientDataRecord {
    pub client_id: ClientId,
    pub visits: Vec<Visit>,
    #[serde(default)]
    pub attributes: BTreeMap<String, String>,
}

impl ClientDataRecord {
    pub fn new(client_id: ClientId) -> Self {
        ClientDataRecord {
            client_id,
            visits: Vec::new(),
            attributes: BTreeMap::new(),
        }
    }

    /// Appends keeping visits ordered by time.
    fn record_visit(&mut self, visit: Visit) {
        let pos = self
            .visits
            .partition_point(|v| v.visited_at <= visit.visited_at);
        self.visits.insert(pos, visit);
    }
}

/// The three advertisement headers, parsed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawAdvertisement")]
pub struct EndpointAdvertisement {
    pub wrapper_endpoint: String,
    pub vcr_endpoint: String,
    pub server_pubkey: PublicKey,
    #[serde(skip_serializing)]
    pub server_key_id: ServerKeyId,
}

#[derive(Deserialize)]
struct RawAdvertisement {
    wrapper_endpoint: String,
    vcr_endpoint: String,
    server_pubkey: PublicKey,
}

impl TryFrom<RawAdvertisement> for EndpointAdvertisement {
    type Error = String;

    fn try_from(raw: RawAdvertisement) -> Result<Self, Self::Error> {
        EndpointAdvertisement::new(raw.wrapper_endpoint, raw.vcr_endpoint, raw.server_pubkey)
    }
}

impl EndpointAdvertisement {
    pub fn new(
        wrapper_endpoint: impl Into<String>,
        vcr_endpoint: impl Into<String>,
        server_pubkey: PublicKey,
    ) -> Result<Self, String> {
        let wrapper_endpoint = wrapper_endpoint.into();
        let vcr_endpoint = vcr_endpoint.into();
        if !wrapper_endpoint.starts_with('/') || !vcr_endpoint.starts_with('/') {
            return Err("endpoint paths must be absolute".into());
        }
        Ok(EndpointAdvertisement {
            wrapper_endpoint,
            vcr_endpoint,
            server_key_id: ServerKeyId::of(&server_pubkey),
            server_pubkey,
        })
    }

    /// Reads the advertisement from response headers (names compared
    /// case-insensitively). `None` if the server does not advertise.
    pub fn from_headers<'a, I>(headers: I) -> Option<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut wrapper = None;
        let mut vcr = None;
        let mut key = None;
        for (name, value) in headers {
            let name = name.to_ascii_lowercase();
            match name.as_str() {
                WRAPPER_ENDPOINT_HEADER => wrapper = Some(value.trim().to_string()),
                VCR_ENDPOINT_HEADER => vcr = Some(value.trim().to_string()),
                SERVER_KEY_HEADER => key = value.trim().parse::<PublicKey>().ok(),
                _ => {}
            }
        }
        Self::new(wrapper?, vcr?, key?).ok()
    }

    pub fn headers(&self) -> Vec<(String, String)> {
        vec![
            (
                WRAPPER_ENDPOINT_HEADER.into(),
                self.wrapper_endpoint.clone(),
            ),
            (VCR_ENDPOINT_HEADER.into(), self.vcr_endpoint.clone()),
            (SERVER_KEY_HEADER.into(), self.server_pubkey.to_string()),
        ]
    }
}

/// Body of a wrapper request, as sent by a client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrapperRequest {
    pub client_id: ClientId,
    pub vcr_keys: Vec<PublicKey>,
}

/// Same shape, keys left raw so a bad point maps to `InvalidPublicKey`
/// rather than a generic parse failure.
#[derive(Deserialize)]
struct RawWrapperRequest {
    client_id: ClientId,
    vcr_keys: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessResponse {
    pub records: Vec<ClientDataRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncryptedAccessResponse {
    pub encrypted: HybridCiphertext,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionAck {
    pub status: String,
    pub affected: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// Any body the VCR endpoint can return.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VcrResponse {
    Encrypted(EncryptedAccessResponse),
    Access(AccessResponse),
    Ack(ActionAck),
    Error(ErrorBody),
}

/// Hybrid-encrypts an access response to the key from the request metadata.
/// A fresh symmetric key is used every time.
pub fn encrypt_access_response(
    response: &AccessResponse,
    client_pub: &PublicKey,
) -> HybridCiphertext {
    let plaintext = to_wire(response, WireMode::Optimized);
    hybrid_encrypt(client_pub, ACCESS_RESPONSE_LABEL, plaintext.as_bytes())
}

pub fn decrypt_access_response(
    secret: &SecretKey,
    ciphertext: &HybridCiphertext,
) -> Result<AccessResponse, CryptoError> {
    let plaintext = hybrid_decrypt(secret, ACCESS_RESPONSE_LABEL, ciphertext)?;
    from_wire_bytes(&plaintext, WireMode::Optimized).map_err(|_| CryptoError::DecryptFailed)
}

/// Transport-neutral HTTP response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl HttpReply {
    fn json<T: Serialize>(status: u16, body: &T) -> Self {
        HttpReply {
            status,
            headers: vec![("content-type".into(), "application/json".into())],
            body: to_wire(body, WireMode::Optimized),
        }
    }

    fn error(status: u16, class: &str) -> Self {
        Self::json(
            status,
            &ErrorBody {
                error: class.to_string(),
            },
        )
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }
}

/// Incoming page request, reduced to what the server looks at.
#[derive(Debug, Clone, Default)]
pub struct PageRequest {
    pub path: String,
    pub cookie_header: Option<String>,
    pub user_agent: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub tolerance_secs: u64,
    pub cookie_name: String,
    pub wrapper_endpoint: String,
    pub vcr_endpoint: String,
    pub snapshot_path: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            tolerance_secs: DEFAULT_TOLERANCE_SECS,
            cookie_name: DEFAULT_COOKIE_NAME.into(),
            wrapper_endpoint: DEFAULT_WRAPPER_ENDPOINT.into(),
            vcr_endpoint: DEFAULT_VCR_ENDPOINT.into(),
            snapshot_path: None,
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct Snapshot {
    records: Vec<ClientDataRecord>,
}

pub struct ViceroyServer {
    key: ServerSigningKey,
    keyring: ServerKeyring,
    config: ServerConfig,
    advertisement: EndpointAdvertisement,
    data: Mutex<BTreeMap<ClientId, ClientDataRecord>>,
    replay: ReplayCache,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for ViceroyServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ViceroyServer")
            .field("key_id", &self.key.key_id())
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl ViceroyServer {
    pub fn new(key: ServerSigningKey, config: ServerConfig) -> Result<Self, ServerError> {
        Self::with_clock(key, config, Arc::new(SystemClock))
    }

    pub fn with_clock(
        key: ServerSigningKey,
        config: ServerConfig,
        clock: Arc<dyn Clock>,
    ) -> Result<Self, ServerError> {
        let advertisement = EndpointAdvertisement::new(
            config.wrapper_endpoint.clone(),
            config.vcr_endpoint.clone(),
            *key.public_key(),
        )
        .map_err(ServerError::Config)?;
        if config.wrapper_endpoint == config.vcr_endpoint {
            return Err(ServerError::Config("endpoints must differ".into()));
        }
        let mut data = BTreeMap::new();
        if let Some(path) = &config.snapshot_path {
            if path.exists() {
                let text = fs::read_to_string(path)?;
                let snap: Snapshot = serde_json::from_str(&text)
                    .map_err(|e| ServerError::Snapshot(e.to_string()))?;
                for r in snap.records {
                    data.insert(r.client_id.clone(), r);
                }
            }
        }
        Ok(ViceroyServer {
            keyring: ServerKeyring::with_key(*key.public_key()),
            replay: ReplayCache::new(config.tolerance_secs),
            key,
            config,
            advertisement,
            data: Mutex::new(data),
            clock,
        })
    }

    pub fn public_key(&self) -> &PublicKey {
        self.key.public_key()
    }

    pub fn advertisement(&self) -> &EndpointAdvertisement {
        &self.advertisement
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn replay_cache(&self) -> &ReplayCache {
        &self.replay
    }

    /// Copy of the stored record for `id`, if any.
    pub fn record(&self, id: &ClientId) -> Option<ClientDataRecord> {
        self.data
            .lock()
            .expect("data store poisoned")
            .get(id)
            .cloned()
    }

    pub fn client_count(&self) -> usize {
        self.data.lock().expect("data store poisoned").len()
    }

    fn now(&self) -> Option<u64> {
        self.clock.now()
    }

    fn cookie_from_header(&self, header: Option<&str>) -> Option<ClientId> {
        let header = header?;
        header.split(';').find_map(|pair| {
            let (name, value) = pair.trim().split_once('=')?;
            if name != self.config.cookie_name || !is_issued_cookie_value(value) {
                return None;
            }
            ClientId::new(name, value).ok()
        })
    }

    /// Ordinary page view: sets a cookie on first visit, advertises the
    /// endpoints, and records the visit.
    pub fn handle_page_request(&self, req: &PageRequest) -> HttpReply {
        let Some(now) = self.now() else {
            return HttpReply::error(500, "ClockUnavailable");
        };
        let path = if req.path.is_empty() {
            "/"
        } else {
            req.path.as_str()
        };
        let mut headers = self.advertisement.headers();
        let mut data = self.data.lock().expect("data store poisoned");
        let client_id = match self.cookie_from_header(req.cookie_header.as_deref()) {
            Some(id) => id,
            None => {
                let value = uuid::Uuid::new_v4().simple().to_string();
                headers.push((
                    "set-cookie".into(),
                    format!(
                        "{}={}; Path=/; HttpOnly; SameSite=Lax",
                        self.config.cookie_name, value
                    ),
                ));
                ClientId::new(self.config.cookie_name.clone(), value)
                    .expect("generated cookie is valid")
            }
        };
        let record = data
            .entry(client_id.clone())
            .or_insert_with(|| ClientDataRecord::new(client_id));
        if let Some(ua) = &req.user_agent {
            record
                .attributes
                .entry("user_agent".into())
                .or_insert_with(|| ua.clone());
        }
        record.record_visit(Visit {
            visited_at: now,
            url: path.to_string(),
        });
        drop(data);
        self.persist();
        headers.push(("content-type".into(), "text/plain; charset=utf-8".into()));
        HttpReply {
            status: 200,
            headers,
            body: format!("page {path}\n"),
        }
    }

    /// Issues a wrapper for the presented cookie and key list. The data
    /// store is not touched.
    pub fn handle_wrapper_request(&self, body: &[u8]) -> HttpReply {
        let raw: RawWrapperRequest = match from_wire_bytes(body, WireMode::Optimized) {
            Ok(r) => r,
            Err(_) => return HttpReply::error(400, "MalformedBody"),
        };
        let mut keys = Vec::with_capacity(raw.vcr_keys.len());
        for k in &raw.vcr_keys {
            match b64::decode(k) {
                Ok(bytes) => keys.push(bytes),
                Err(_) => return HttpReply::error(400, "InvalidPublicKey"),
            }
        }
        let policy = match MultiSigPolicy::from_bytes(&keys) {
            Ok(p) => p,
            Err(e) => return HttpReply::error(400, e.code()),
        };
        let Some(now) = self.now() else {
            return HttpReply::error(500, WrapperError::ClockUnavailable.code());
        };
        match issue_wrapper(&self.key, raw.client_id, &policy, now) {
            Ok(w) => HttpReply::json(200, &w),
            Err(e) => HttpReply::error(400, e.code()),
        }
    }

    fn parse_submission(&self, body: &[u8]) -> Result<VcrRequest, HttpReply> {
        let submission: VcrSubmission = from_wire_bytes(body, WireMode::Optimized)
            .map_err(|_| HttpReply::error(400, "MalformedBody"))?;
        match submission {
            VcrSubmission::Plain(req) => Ok(req),
            VcrSubmission::Sealed(sealed) => {
                unseal_vcr(self.key.secret(), &sealed).map_err(|e| HttpReply::error(403, e.code()))
            }
        }
    }

    /// Verifies and fulfils a (possibly sealed) request.
    pub fn handle_vcr(&self, body: &[u8]) -> HttpReply {
        let req = match self.parse_submission(body) {
            Ok(r) => r,
            Err(reply) => return reply,
        };
        let Some(now) = self.now() else {
            return HttpReply::error(500, "ClockUnavailable");
        };
        let verified = match self.verify(&req, now) {
            Ok(v) => v,
            Err(e) => return HttpReply::error(403, e.code()),
        };
        self.fulfil(&verified)
    }

    pub fn verify(&self, req: &VcrRequest, now: u64) -> Result<VerifiedRequest, VcrError> {
        verify_vcr(&self.keyring, req, now, &self.replay)
    }

    fn fulfil(&self, verified: &VerifiedRequest) -> HttpReply {
        let mut data = self.data.lock().expect("data store poisoned");
        let reply = match &verified.action {
            VcrAction::Access { response_key } => {
                let records: Vec<_> = verified
                    .client_ids
                    .iter()
                    .filter_map(|id| data.get(id).cloned())
                    .collect();
                if records.is_empty() {
                    return HttpReply::error(404, "NoData");
                }
                let response = AccessResponse { records };
                match response_key {
                    Some(k) => HttpReply::json(
                        200,
                        &EncryptedAccessResponse {
                            encrypted: encrypt_access_response(&response, k),
                        },
                    ),
                    None => HttpReply::json(200, &response),
                }
            }
            VcrAction::Modify { changes } => {
                for id in &verified.client_ids {
                    let Some(record) = data.get(id) else {
                        return HttpReply::error(404, "NoData");
                    };
                    for c in changes {
                        let current = record.attributes.get(&c.field).map(String::as_str);
                        if current.unwrap_or("") != c.old_value {
                            return HttpReply::error(409, "ModifyConflict");
                        }
                    }
                }
                for id in &verified.client_ids {
                    let record = data.get_mut(id).expect("checked above");
                    for c in changes {
                        record
                            .attributes
                            .insert(c.field.clone(), c.new_value.clone());
                    }
                }
                HttpReply::json(
                    200,
                    &ActionAck {
                        status: "modified".into(),
                        affected: verified.client_ids.len() as u32,
                    },
                )
            }
            VcrAction::Delete => {
                let affected = verified
                    .client_ids
                    .iter()
                    .filter(|id| data.remove(*id).is_some())
                    .count();
                HttpReply::json(
                    200,
                    &ActionAck {
                        status: "deleted".into(),
                        affected: affected as u32,
                    },
                )
            }
        };
        let mutated = !matches!(verified.action, VcrAction::Access { .. });
        drop(data);
        if mutated {
            self.persist();
        }
        reply
    }

    fn persist(&self) {
        let Some(path) = &self.config.snapshot_path else {
            return;
        };
        let snap = Snapshot {
            records: self
                .data
                .lock()
                .expect("data store poisoned")
                .values()
                .cloned()
                .collect(),
        };
        let text = serde_json::to_string_pretty(&snap).expect("snapshot serializes");
        if let Err(e) = crate::fsutil::write_atomic(path, text.as_bytes()) {
            log::warn!("snapshot write to {} failed: {e}", path.display());
        }
    }
}

/// Cookie values this server hands out: 32 lowercase hex digits.
fn is_issued_cookie_value(value: &str) -> bool {
    value.len() == 32 && value.bytes().all(|b| b.is_ascii_hexdigit())
}

#[derive(Serialize, Deserialize)]
struct KeyFile {
    secret: String,
}

/// Loads the server signing key from `path`, creating it on first use.
pub fn load_or_generate_key(path: &Path) -> Result<ServerSigningKey, ServerError> {
    if path.exists() {
        let text = fs::read_to_string(path)?;
        let file: KeyFile =
            serde_json::from_str(&text).map_err(|e| ServerError::KeyFile(e.to_string()))?;
        let raw =
            hex::decode(file.secret.trim()).map_err(|e| ServerError::KeyFile(e.to_string()))?;
        let secret =
            SecretKey::from_bytes(&raw).map_err(|e| ServerError::KeyFile(e.to_string()))?;
        return Ok(ServerSigningKey::from_secret(secret));
    }
    let key = ServerSigningKey::generate();
    let file = KeyFile {
        secret: hex::encode(key.secret().to_bytes()),
    };
    crate::fsutil::write_atomic_private(
        path,
        serde_json::to_string(&file).expect("json").as_bytes(),
    )?;
    Ok(key)
}
