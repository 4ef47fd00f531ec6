//! Client-side engine: detects advertising servers, derives one session key
//! per cookie, obtains and checks wrappers, keeps per-session visit history,
//! and builds signed requests.
//!
//! Session keys live at `m/i/j` where `i` is this device and `j` a per-device
//! counter. Sessions opened in unified mode live at `m/i/s/j` instead, with
//! `s` a per-origin index. Scope indices `s` are allocated from
//! [`UNIFIED_SCOPE_BASE`] upward so a scope key `m/i/s` never coincides with
//! an ordinary session key `m/i/j`.

pub mod transport;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{PublicKey, SecretKey, Signature};
use crate::encoding::{from_wire_bytes, to_wire, WireMode};
use crate::keyhier::{DerivationPath, Derive, ExtendedPublicKey, KeyError};
use crate::server::{
    decrypt_access_response, ClientDataRecord, EndpointAdvertisement, ErrorBody, VcrResponse,
    Visit, WrapperRequest,
};
use crate::vcr::{
    build_unified_vcr, build_vcr, seal_vcr, sign_vcr, SigningOracle, VcrAction, VcrError,
    VcrRequest,
};
use crate::wrapper::{
    check_wrapper_echo, verify_wrapper, ClientId, MultiSigPolicy, Wrapper, WrapperError,
};

pub use transport::{HttpTransport, LocalTransport, Transport};

/// First scope index handed out for unified sessions.
pub const UNIFIED_SCOPE_BASE: u32 = 1 << 30;

/// Length in bytes of the key prefix shown as a session id.
pub const SID_BYTES: usize = 4;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("agent store already provisioned")]
    AlreadyProvisioned,
    #[error("device key must be a depth-1 key m/i")]
    InvalidDeviceKey,
    #[error("device has been unlinked")]
    DeviceRetired,
    #[error("wrapper failed verification: {0}")]
    WrapperVerifyFailed(WrapperError),
    #[error("wrapper binds a different public key than the one sent")]
    PublicKeyMismatch,
    #[error("wrapper binds a different client id than the one sent")]
    ClientIdMismatch,
    #[error("network: {0}")]
    Network(String),
    #[error("server answered {status}: {error}")]
    ServerRejected { status: u16, error: String },
    #[error("server key for {origin} changed since it was pinned")]
    ServerKeyChanged { origin: String },
    #[error("{0} does not advertise request endpoints")]
    NotAdvertised(String),
    #[error("corrupt agent store: {0}")]
    CorruptStore(String),
    #[error("no session matches {0:?}")]
    UnknownSession(String),
    #[error("session id {0:?} is ambiguous")]
    AmbiguousSession(String),
    #[error("selected sessions belong to different origins")]
    MixedOrigins,
    #[error("unified requests need sessions opened in unified mode under one scope")]
    NotUnified,
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error("could not decrypt the access response")]
    DecryptFailed,
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error(transparent)]
    Vcr(#[from] VcrError),
}

impl AgentError {
    /// Stable machine-readable class. For server rejections this is the
    /// class the server returned.
    pub fn code(&self) -> &str {
        match self {
            AgentError::AlreadyProvisioned => "AlreadyProvisioned",
            AgentError::InvalidDeviceKey => "InvalidDeviceKey",
            AgentError::DeviceRetired => "DeviceRetired",
            AgentError::WrapperVerifyFailed(_) => "WrapperVerifyFailed",
            AgentError::PublicKeyMismatch => "PublicKeyMismatch",
            AgentError::ClientIdMismatch => "ClientIdMismatch",
            AgentError::Network(_) => "NetworkError",
            AgentError::ServerRejected { error, .. } => error,
            AgentError::ServerKeyChanged { .. } => "ServerKeyChanged",
            AgentError::NotAdvertised(_) => "NotAdvertised",
            AgentError::CorruptStore(_) => "CorruptStore",
            AgentError::UnknownSession(_) => "UnknownSession",
            AgentError::AmbiguousSession(_) => "AmbiguousSession",
            AgentError::MixedOrigins => "MixedOrigins",
            AgentError::NotUnified => "NotUnified",
            AgentError::InvalidOption(_) => "InvalidOption",
            AgentError::DecryptFailed => "DecryptFailed",
            AgentError::Key(_) => "KeyError",
            AgentError::Vcr(e) => e.code(),
        }
    }
}

/// `scheme://host[:port]` of a URL.
pub fn origin_of(url: &str) -> Result<String, AgentError> {
    let parsed = url::Url::parse(url).map_err(|e| AgentError::Network(format!("{url}: {e}")))?;
    if !parsed.has_host() {
        return Err(AgentError::Network(format!("{url}: no host")));
    }
    Ok(parsed.origin().ascii_serialization())
}

fn origin_and_path(url: &str) -> Result<(String, String), AgentError> {
    let parsed = url::Url::parse(url).map_err(|e| AgentError::Network(format!("{url}: {e}")))?;
    Ok((
        parsed.origin().ascii_serialization(),
        parsed.path().to_string(),
    ))
}

/// One session with one server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "SessionFile", try_from = "SessionFile")]
pub struct SessionRecord {
    pub server_origin: String,
    pub endpoints: EndpointAdvertisement,
    /// Always equal to `wrapper.client_id`.
    pub client_id: ClientId,
    pub path: DerivationPath,
    pub wrapper: Wrapper,
    pub created_at: u64,
    pub history: Vec<Visit>,
}

// Persisted form. The client id is read back from the wrapper and the
// wrapper's server key id is recomputed from the advertised key.
#[derive(Serialize, Deserialize)]
struct SessionFile {
    server_origin: String,
    endpoints: EndpointAdvertisement,
    path: DerivationPath,
    wrapper: StoredWrapper,
    created_at: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    history: Vec<Visit>,
}

impl From<SessionRecord> for SessionFile {
    fn from(s: SessionRecord) -> Self {
        SessionFile {
            server_origin: s.server_origin,
            endpoints: s.endpoints,
            path: s.path,
            wrapper: StoredWrapper {
                version: s.wrapper.version,
                client_id: s.wrapper.client_id,
                vcr_keys: s.wrapper.vcr_keys,
                issued_at: s.wrapper.issued_at,
                signature: s.wrapper.signature,
            },
            created_at: s.created_at,
            history: s.history,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StoredWrapper {
    version: u8,
    client_id: ClientId,
    vcr_keys: Vec<PublicKey>,
    issued_at: u64,
    signature: Signature,
}

impl TryFrom<SessionFile> for SessionRecord {
    type Error = String;

    fn try_from(f: SessionFile) -> Result<Self, Self::Error> {
        let w = f.wrapper;
        Ok(SessionRecord {
            client_id: w.client_id.clone(),
            wrapper: Wrapper {
                version: w.version,
                client_id: w.client_id,
                vcr_keys: w.vcr_keys,
                issued_at: w.issued_at,
                server_key_id: f.endpoints.server_key_id,
                signature: w.signature,
            },
            server_origin: f.server_origin,
            endpoints: f.endpoints,
            path: f.path,
            created_at: f.created_at,
            history: f.history,
        })
    }
}

impl SessionRecord {
    /// This agent's key in the wrapper (always listed first).
    pub fn vcr_key(&self) -> &PublicKey {
        &self.wrapper.vcr_keys[0]
    }

    /// Short display id: leading bytes of the session key, hex.
    pub fn sid(&self) -> String {
        hex::encode(&self.vcr_key().as_bytes()[..SID_BYTES])
    }

    pub fn is_unified(&self) -> bool {
        self.path.len() == 3
    }

    fn record_visit(&mut self, visit: Visit) {
        let pos = self
            .history
            .partition_point(|v| v.visited_at <= visit.visited_at);
        self.history.insert(pos, visit);
    }
}

/// How a new session's key is chosen.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionOptions {
    /// Derive under the per-origin scope `m/i/s/j`.
    pub unified: bool,
    /// Extra keys that must co-sign every request over this session.
    pub co_signers: Vec<PublicKey>,
}

type CookieKey = (String, ClientId);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "StoreFile", try_from = "StoreFile")]
pub struct AgentStore {
    device_xpub: ExtendedPublicKey,
    next_j: u32,
    /// origin → scope index s
    server_ids: BTreeMap<String, u32>,
    /// s → next j under that scope
    server_counters: BTreeMap<u32, u32>,
    sessions: Vec<SessionRecord>,
    cookie_index: HashMap<CookieKey, usize>,
    pinned_server_keys: BTreeMap<String, PublicKey>,
    retired: bool,
}

#[derive(Serialize, Deserialize)]
struct StoreFile {
    device_xpub: ExtendedPublicKey,
    next_j: u32,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    server_ids: BTreeMap<String, u32>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    server_counters: BTreeMap<u32, u32>,
    #[serde(default)]
    sessions: Vec<SessionRecord>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    retired: bool,
}

impl From<AgentStore> for StoreFile {
    fn from(s: AgentStore) -> Self {
        StoreFile {
            device_xpub: s.device_xpub,
            next_j: s.next_j,
            server_ids: s.server_ids,
            server_counters: s.server_counters,
            sessions: s.sessions,
            retired: s.retired,
        }
    }
}

impl TryFrom<StoreFile> for AgentStore {
    type Error = String;

    fn try_from(f: StoreFile) -> Result<Self, Self::Error> {
        let mut store = AgentStore::new(f.device_xpub).map_err(|e| e.to_string())?;
        store.next_j = f.next_j;
        store.server_ids = f.server_ids;
        store.server_counters = f.server_counters;
        store.retired = f.retired;
        for session in f.sessions {
            store.check_loaded_session(&session)?;
            store.insert_session(session);
        }
        Ok(store)
    }
}

/// Provisions `slot` with a fresh store for device key `m/i`.
pub fn provision_device(
    slot: &mut Option<AgentStore>,
    device_xpub: ExtendedPublicKey,
    device_id: u32,
) -> Result<&mut AgentStore, AgentError> {
    if slot.is_some() {
        return Err(AgentError::AlreadyProvisioned);
    }
    if device_xpub.child_index() != device_id {
        return Err(AgentError::InvalidDeviceKey);
    }
    Ok(slot.insert(AgentStore::new(device_xpub)?))
}

pub fn export_store(store: &AgentStore, mode: WireMode) -> Vec<u8> {
    to_wire(store, mode).into_bytes()
}

/// Accepts either wire mode. Every wrapper is re-verified and every path
/// re-derived, so a store fetched from third-party storage is safe to load.
pub fn import_store(bytes: &[u8]) -> Result<AgentStore, AgentError> {
    from_wire_bytes(bytes, WireMode::Optimized)
        .or_else(|_| from_wire_bytes(bytes, WireMode::Verbose))
        .map_err(|e| AgentError::CorruptStore(e.to_string()))
}

pub fn unlink_device(store: &mut AgentStore) {
    store.retired = true;
}

/// What a page visit did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisitOutcome {
    pub status: u16,
    pub advertised: bool,
    /// Index of a session opened by this visit.
    pub new_session: Option<usize>,
    /// Number of sessions whose history gained an entry.
    pub recorded: usize,
}

impl AgentStore {
    pub fn new(device_xpub: ExtendedPublicKey) -> Result<Self, AgentError> {
        if device_xpub.depth() != 1 {
            return Err(AgentError::InvalidDeviceKey);
        }
        Ok(AgentStore {
            device_xpub,
            next_j: 0,
            server_ids: BTreeMap::new(),
            server_counters: BTreeMap::new(),
            sessions: Vec::new(),
            cookie_index: HashMap::new(),
            pinned_server_keys: BTreeMap::new(),
            retired: false,
        })
    }

    pub fn device_id(&self) -> u32 {
        self.device_xpub.child_index()
    }

    pub fn device_xpub(&self) -> &ExtendedPublicKey {
        &self.device_xpub
    }

    pub fn next_j(&self) -> u32 {
        self.next_j
    }

    pub fn is_retired(&self) -> bool {
        self.retired
    }

    pub fn sessions(&self) -> &[SessionRecord] {
        &self.sessions
    }

    pub fn session(&self, index: usize) -> Option<&SessionRecord> {
        self.sessions.get(index)
    }

    pub fn pinned_key(&self, origin: &str) -> Option<&PublicKey> {
        self.pinned_server_keys.get(origin)
    }

    /// Replaces the pinned key for `origin` after the user has confirmed a
    /// server key change out of band.
    pub fn repin(&mut self, origin: &str, key: PublicKey) {
        self.pinned_server_keys.insert(origin.to_string(), key);
    }

    pub fn scope_index(&self, origin: &str) -> Option<u32> {
        self.server_ids.get(origin).copied()
    }

    /// Session reached through `cookie` at `origin`.
    pub fn lookup_cookie(&self, origin: &str, cookie: &ClientId) -> Option<usize> {
        self.cookie_index
            .get(&(origin.to_string(), cookie.clone()))
            .copied()
    }

    /// Session index for a full or prefix SID.
    pub fn find_sid(&self, sid: &str) -> Result<usize, AgentError> {
        let sid = sid.to_ascii_lowercase();
        let mut hits = self
            .sessions
            .iter()
            .enumerate()
            .filter(|(_, s)| hex::encode(s.vcr_key().as_bytes()).starts_with(&sid));
        let first = hits.next();
        match (first, hits.next()) {
            (Some((i, _)), None) if !sid.is_empty() => Ok(i),
            (Some(_), Some(_)) => Err(AgentError::AmbiguousSession(sid)),
            _ => Err(AgentError::UnknownSession(sid)),
        }
    }

    pub fn sessions_for_origin(&self, origin: &str) -> Vec<usize> {
        (0..self.sessions.len())
            .filter(|&i| self.sessions[i].server_origin == origin)
            .collect()
    }

    /// Public key at `path`, derived from the device key.
    pub fn derive_key(&self, path: &DerivationPath) -> Result<ExtendedPublicKey, AgentError> {
        if path.device_id() != Some(self.device_id()) {
            return Err(AgentError::Key(KeyError::MalformedPath(format!(
                "{path} is not under device {}",
                self.device_id()
            ))));
        }
        Ok(self.device_xpub.derive_path(&path.suffix(1))?)
    }

    fn device_path(&self, rest: &[u32]) -> DerivationPath {
        let mut segments = vec![self.device_id()];
        segments.extend_from_slice(rest);
        DerivationPath::new(segments).expect("at most four non-hardened segments")
    }

    /// Picks the next unused path without committing it.
    fn allocate(&self, origin: &str, unified: bool) -> Result<Allocation, AgentError> {
        if !unified {
            let (j, key) = self.device_xpub.next_valid_child(self.next_j)?;
            return Ok(Allocation {
                path: self.device_path(&[j]),
                key: *key.public_key(),
                scope: None,
                next: j.checked_add(1).ok_or(KeyError::DepthOverflow)?,
            });
        }
        let s = match self.server_ids.get(origin) {
            Some(&s) => s,
            None => {
                let candidate = self
                    .server_ids
                    .values()
                    .map(|s| s + 1)
                    .max()
                    .unwrap_or(UNIFIED_SCOPE_BASE);
                self.device_xpub.next_valid_child(candidate)?.0
            }
        };
        let scope = self.device_xpub.derive_child_pub(s)?;
        let start = self.server_counters.get(&s).copied().unwrap_or(0);
        let (j, key) = scope.next_valid_child(start)?;
        Ok(Allocation {
            path: self.device_path(&[s, j]),
            key: *key.public_key(),
            scope: Some(s),
            next: j.checked_add(1).ok_or(KeyError::DepthOverflow)?,
        })
    }

    /// Derives a fresh key, asks the server to wrap it with `client_id`,
    /// checks the result, and stores the session. Nothing changes unless
    /// every step succeeds. A cookie already bound at this origin returns
    /// its existing session.
    pub fn begin_session(
        &mut self,
        transport: &dyn Transport,
        origin: &str,
        advertisement: &EndpointAdvertisement,
        client_id: ClientId,
        now: u64,
        options: &SessionOptions,
    ) -> Result<usize, AgentError> {
        if self.retired {
            return Err(AgentError::DeviceRetired);
        }
        let origin = origin_of(origin)?;
        if let Some(pinned) = self.pinned_server_keys.get(&origin) {
            if pinned != &advertisement.server_pubkey {
                return Err(AgentError::ServerKeyChanged { origin });
            }
        }
        if let Some(existing) = self.lookup_cookie(&origin, &client_id) {
            return Ok(existing);
        }
        if options.unified && !options.co_signers.is_empty() {
            return Err(AgentError::InvalidOption(
                "unified sessions cannot have co-signers".into(),
            ));
        }

        let alloc = self.allocate(&origin, options.unified)?;
        let mut members = vec![alloc.key];
        members.extend_from_slice(&options.co_signers);
        let policy = MultiSigPolicy::new(members).map_err(AgentError::WrapperVerifyFailed)?;

        let body = to_wire(
            &WrapperRequest {
                client_id: client_id.clone(),
                vcr_keys: policy.members().to_vec(),
            },
            WireMode::Optimized,
        );
        let reply = transport.post(
            &format!("{origin}{}", advertisement.wrapper_endpoint),
            &body,
        )?;
        if reply.status != 200 {
            return Err(rejected(reply.status, &reply.body));
        }
        let wrapper: Wrapper = from_wire_bytes(reply.body.as_bytes(), WireMode::Optimized)
            .map_err(|e| {
                AgentError::WrapperVerifyFailed(WrapperError::MalformedWrapper(e.to_string()))
            })?;
        verify_wrapper(&advertisement.server_pubkey, &wrapper)
            .map_err(AgentError::WrapperVerifyFailed)?;
        check_wrapper_echo(&policy, &client_id, &wrapper).map_err(|e| match e {
            WrapperError::PublicKeyMismatch => AgentError::PublicKeyMismatch,
            WrapperError::ClientIdMismatch => AgentError::ClientIdMismatch,
            other => AgentError::WrapperVerifyFailed(other),
        })?;

        match alloc.scope {
            None => self.next_j = alloc.next,
            Some(s) => {
                self.server_ids.insert(origin.clone(), s);
                self.server_counters.insert(s, alloc.next);
            }
        }
        self.pinned_server_keys
            .entry(origin.clone())
            .or_insert(advertisement.server_pubkey);
        let index = self.insert_session(SessionRecord {
            server_origin: origin,
            endpoints: advertisement.clone(),
            client_id,
            path: alloc.path,
            wrapper,
            created_at: now,
            history: Vec::new(),
        });
        Ok(index)
    }

    pub(crate) fn insert_session(&mut self, session: SessionRecord) -> usize {
        let index = self.sessions.len();
        self.cookie_index.insert(
            (session.server_origin.clone(), session.client_id.clone()),
            index,
        );
        self.pinned_server_keys.insert(
            session.server_origin.clone(),
            session.endpoints.server_pubkey,
        );
        self.sessions.push(session);
        index
    }

    fn check_loaded_session(&self, s: &SessionRecord) -> Result<(), String> {
        let segments = s.path.segments();
        if s.path.device_id() != Some(self.device_id()) || !(2..=4).contains(&segments.len()) {
            return Err(format!("session path {} is not under this device", s.path));
        }
        let under_counter = match segments {
            [_, j] => *j < self.next_j,
            [_, sc, j] => {
                self.server_counters.get(sc).is_some_and(|next| j < next)
                    && self.server_ids.get(&s.server_origin) == Some(sc)
            }
            _ => false,
        };
        if !under_counter {
            return Err(format!(
                "session path {} is beyond the stored counters",
                s.path
            ));
        }
        if self.sessions.iter().any(|o| o.path == s.path) {
            return Err(format!("duplicate session path {}", s.path));
        }
        if self
            .cookie_index
            .contains_key(&(s.server_origin.clone(), s.client_id.clone()))
        {
            return Err(format!(
                "duplicate cookie {} at {}",
                s.client_id, s.server_origin
            ));
        }
        let derived = self.derive_key(&s.path).map_err(|e| e.to_string())?;
        if s.wrapper.vcr_keys.first() != Some(derived.public_key()) {
            return Err(format!("wrapper key does not match path {}", s.path));
        }
        verify_wrapper(&s.endpoints.server_pubkey, &s.wrapper).map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn clear_history(&mut self, index: usize) {
        if let Some(s) = self.sessions.get_mut(index) {
            s.history.clear();
        }
    }

    /// Appends `(now, path of url)` to every session whose cookie is among
    /// `cookies`. Returns how many sessions were updated.
    pub fn record_visit(
        &mut self,
        cookies: &[(String, String)],
        url: &str,
        now: u64,
    ) -> Result<usize, AgentError> {
        let (origin, path) = origin_and_path(url)?;
        let mut updated = 0;
        for (name, value) in cookies {
            let Ok(id) = ClientId::new(name.clone(), value.clone()) else {
                continue;
            };
            if let Some(&i) = self.cookie_index.get(&(origin.clone(), id)) {
                self.sessions[i].record_visit(Visit {
                    visited_at: now,
                    url: path.clone(),
                });
                updated += 1;
            }
        }
        Ok(updated)
    }

    /// Fetches `url` with this origin's most recent session cookie, opens a
    /// session if the server hands out a new cookie and advertises, and
    /// records the visit.
    pub fn visit(
        &mut self,
        transport: &dyn Transport,
        url: &str,
        now: u64,
        options: &SessionOptions,
    ) -> Result<VisitOutcome, AgentError> {
        let origin = origin_of(url)?;
        let sent = self
            .sessions_for_origin(&origin)
            .last()
            .map(|&i| self.sessions[i].client_id.clone());
        let cookie_header = sent.as_ref().map(|c| c.to_string());
        let reply = transport.get(url, cookie_header.as_deref())?;
        let advertisement = EndpointAdvertisement::from_headers(
            reply.headers.iter().map(|(n, v)| (n.as_str(), v.as_str())),
        );
        let fresh = reply
            .header("set-cookie")
            .and_then(|v| v.split(';').next())
            .and_then(|pair| pair.trim().split_once('='))
            .and_then(|(n, v)| ClientId::new(n, v).ok());

        let mut new_session = None;
        if let (Some(ad), Some(id)) = (&advertisement, &fresh) {
            new_session =
                Some(self.begin_session(transport, &origin, ad, id.clone(), now, options)?);
        }
        let pairs: Vec<(String, String)> = sent
            .iter()
            .chain(fresh.iter())
            .map(|c| (c.name().to_string(), c.value().to_string()))
            .collect();
        let recorded = self.record_visit(&pairs, url, now)?;
        Ok(VisitOutcome {
            status: reply.status,
            advertised: advertisement.is_some(),
            new_session,
            recorded,
        })
    }

    /// Builds an unsigned request over the given sessions.
    pub fn prepare_vcr(
        &self,
        sessions: &[usize],
        action: VcrAction,
        options: &VcrOptions,
        now: u64,
    ) -> Result<PreparedVcr, AgentError> {
        let picked: Vec<&SessionRecord> = sessions
            .iter()
            .map(|&i| {
                self.sessions
                    .get(i)
                    .ok_or_else(|| AgentError::UnknownSession(i.to_string()))
            })
            .collect::<Result<_, _>>()?;
        let first = picked
            .first()
            .ok_or_else(|| AgentError::UnknownSession("none selected".into()))?;
        if picked
            .iter()
            .any(|s| s.server_origin != first.server_origin)
        {
            return Err(AgentError::MixedOrigins);
        }

        let mut action = action;
        let mut response_secret = None;
        if options.encrypt_response {
            let VcrAction::Access { response_key } = &mut action else {
                return Err(AgentError::InvalidOption(
                    "response encryption applies to access requests".into(),
                ));
            };
            let secret = SecretKey::generate();
            *response_key = Some(secret.public_key());
            response_secret = Some(secret);
        }

        let wrappers: Vec<Wrapper> = picked.iter().map(|s| s.wrapper.clone()).collect();
        let (request, plan) = if options.unified {
            let scope = match first.path.segments() {
                [_, s, _] => *s,
                _ => return Err(AgentError::NotUnified),
            };
            let mut indices = Vec::with_capacity(picked.len());
            for s in &picked {
                match s.path.segments() {
                    [_, sc, j] if *sc == scope => indices.push(*j),
                    _ => return Err(AgentError::NotUnified),
                }
            }
            let scope_path = self.device_path(&[scope]);
            let scope_key = self.derive_key(&scope_path)?;
            let req = build_unified_vcr(wrappers, scope_key, indices, action, now)?;
            (req, vec![Some(scope_path)])
        } else {
            let req = build_vcr(wrappers, action, now)?;
            let plan = req
                .required_keys()
                .iter()
                .map(|k| {
                    picked
                        .iter()
                        .find(|s| s.vcr_key() == k)
                        .map(|s| s.path.clone())
                })
                .collect();
            (req, plan)
        };
        Ok(PreparedVcr {
            origin: first.server_origin.clone(),
            endpoints: first.endpoints.clone(),
            request,
            plan,
            response_secret,
            seal: options.seal,
        })
    }
}

struct Allocation {
    path: DerivationPath,
    key: PublicKey,
    scope: Option<u32>,
    next: u32,
}

fn rejected(status: u16, body: &str) -> AgentError {
    let error = from_wire_bytes::<ErrorBody>(body.as_bytes(), WireMode::Optimized)
        .map(|b| b.error)
        .unwrap_or_else(|_| format!("HTTP{status}"));
    AgentError::ServerRejected { status, error }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VcrOptions {
    /// One signature under the server-scoped key instead of one per session.
    pub unified: bool,
    /// Ask for the response encrypted to a fresh one-off key.
    pub encrypt_response: bool,
    /// Encrypt the whole request to the server's long-term key.
    pub seal: bool,
}

/// A request on its way out, with the paths needed to sign it.
#[derive(Debug, Clone)]
pub struct PreparedVcr {
    pub origin: String,
    pub endpoints: EndpointAdvertisement,
    pub request: VcrRequest,
    /// One entry per required signature; `None` where another party signs.
    pub plan: Vec<Option<DerivationPath>>,
    response_secret: Option<SecretKey>,
    seal: bool,
}

/// Server answer to a submitted request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VcrOutcome {
    pub status: u16,
    pub response: VcrResponse,
    /// Records from an access request, decrypted if needed.
    pub records: Option<Vec<ClientDataRecord>>,
}

impl PreparedVcr {
    /// Signs every pending position this agent owns, stopping at the first
    /// one that belongs to someone else.
    pub fn sign_with(&mut self, signer: &dyn SigningOracle) -> Result<(), AgentError> {
        while let Some(Some(path)) = self.plan.get(self.request.signatures.len()) {
            let path = path.clone();
            sign_vcr(&mut self.request, signer, &path)?;
        }
        Ok(())
    }

    /// Adds the next signature from a co-signer holding the key at `path`.
    pub fn cosign(
        &mut self,
        signer: &dyn SigningOracle,
        path: &DerivationPath,
    ) -> Result<(), AgentError> {
        sign_vcr(&mut self.request, signer, path)?;
        Ok(())
    }

    pub fn is_complete(&self) -> bool {
        self.request.is_fully_signed()
    }

    /// Exact request body that [`submit`](Self::submit) would send.
    pub fn body(&self) -> Result<String, AgentError> {
        let plain = self.request.for_submission();
        Ok(if self.seal {
            to_wire(
                &seal_vcr(&self.endpoints.server_pubkey, &plain)?,
                WireMode::Optimized,
            )
        } else {
            to_wire(&plain, WireMode::Optimized)
        })
    }

    pub fn submit(&self, transport: &dyn Transport) -> Result<VcrOutcome, AgentError> {
        let reply = transport.post(
            &format!("{}{}", self.origin, self.endpoints.vcr_endpoint),
            &self.body()?,
        )?;
        if reply.status != 200 {
            return Err(rejected(reply.status, &reply.body));
        }
        let response: VcrResponse = from_wire_bytes(reply.body.as_bytes(), WireMode::Optimized)
            .map_err(|e| AgentError::Network(format!("unreadable response: {e}")))?;
        let records = match (&response, &self.response_secret) {
            (VcrResponse::Access(a), _) => Some(a.records.clone()),
            (VcrResponse::Encrypted(e), Some(secret)) => Some(
                decrypt_access_response(secret, &e.encrypted)
                    .map_err(|_| AgentError::DecryptFailed)?
                    .records,
            ),
            (VcrResponse::Encrypted(_), None) => return Err(AgentError::DecryptFailed),
            _ => None,
        };
        Ok(VcrOutcome {
            status: reply.status,
            response,
            records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::keyhier::ExtendedPrivateKey;
    use crate::server::{HttpReply, ServerConfig, ViceroyServer};
    use crate::wrapper::ServerSigningKey;
    use std::sync::Arc;

    const ORIGIN: &str = "http://shop.test";

    fn setup() -> (
        ExtendedPrivateKey,
        AgentStore,
        LocalTransport,
        Arc<ViceroyServer>,
    ) {
        let master = ExtendedPrivateKey::generate_master(&[9u8; 32]).unwrap();
        let xpub = master.derive_child_priv(0).unwrap().neuter();
        let mut slot = None;
        provision_device(&mut slot, xpub, 0).unwrap();
        let server = Arc::new(
            ViceroyServer::with_clock(
                ServerSigningKey::generate(),
                ServerConfig::default(),
                Arc::new(ManualClock::new(1_700_000_000)),
            )
            .unwrap(),
        );
        (
            master,
            slot.unwrap(),
            LocalTransport::new(server.clone()),
            server,
        )
    }

    #[test]
    fn provisioning_twice_fails() {
        let (master, store, ..) = setup();
        let mut slot = Some(store);
        let xpub = master.derive_child_priv(0).unwrap().neuter();
        assert!(matches!(
            provision_device(&mut slot, xpub, 0),
            Err(AgentError::AlreadyProvisioned)
        ));
        let mut empty = None;
        assert!(matches!(
            provision_device(&mut empty, xpub, 1),
            Err(AgentError::InvalidDeviceKey)
        ));
    }

    #[test]
    fn sequential_sessions_take_consecutive_paths() {
        let (_, mut store, t, _) = setup();
        // the local transport ignores the host, so each origin gets a new cookie
        for (k, host) in ["a.test", "b.test", "c.test"].iter().enumerate() {
            let out = store
                .visit(
                    &t,
                    &format!("http://{host}/"),
                    1,
                    &SessionOptions::default(),
                )
                .unwrap();
            assert_eq!(out.new_session, Some(k));
            assert_eq!(out.recorded, 1);
            assert_eq!(store.sessions()[k].path.to_string(), format!("m/0/{k}"));
        }
        assert_eq!(store.next_j(), 3);
        let out = store
            .visit(&t, "http://c.test/again", 2, &SessionOptions::default())
            .unwrap();
        assert_eq!(out.new_session, None);
        assert_eq!(store.sessions()[2].history.len(), 2);
    }

    struct KeySwap<'a>(&'a LocalTransport, PublicKey);

    impl Transport for KeySwap<'_> {
        fn get(&self, url: &str, cookie: Option<&str>) -> Result<HttpReply, AgentError> {
            self.0.get(url, cookie)
        }
        fn post(&self, url: &str, body: &str) -> Result<HttpReply, AgentError> {
            let mut req: WrapperRequest =
                from_wire_bytes(body.as_bytes(), WireMode::Optimized).unwrap();
            req.vcr_keys = vec![self.1];
            self.0.post(url, &to_wire(&req, WireMode::Optimized))
        }
    }

    #[test]
    fn substituted_key_is_caught_and_nothing_is_stored() {
        let (_, mut store, t, server) = setup();
        let page = t.get(&format!("{ORIGIN}/"), None).unwrap();
        let ad = EndpointAdvertisement::from_headers(
            page.headers.iter().map(|(a, b)| (a.as_str(), b.as_str())),
        )
        .unwrap();
        let cookie = page
            .header("set-cookie")
            .unwrap()
            .split(';')
            .next()
            .unwrap();
        let (n, v) = cookie.split_once('=').unwrap();
        let id = ClientId::new(n, v).unwrap();
        let mitm = KeySwap(&t, SecretKey::generate().public_key());
        let err = store
            .begin_session(
                &mitm,
                ORIGIN,
                &ad,
                id.clone(),
                1,
                &SessionOptions::default(),
            )
            .unwrap_err();
        assert!(matches!(err, AgentError::PublicKeyMismatch));
        assert!(store.sessions().is_empty());
        assert_eq!(store.next_j(), 0);
        assert!(store.pinned_key(ORIGIN).is_none());
        let _ = server;

        let i = store
            .begin_session(&t, ORIGIN, &ad, id, 1, &SessionOptions::default())
            .unwrap();
        assert_eq!(store.sessions()[i].path.to_string(), "m/0/0");
    }

    #[test]
    fn changed_server_key_is_refused() {
        let (_, mut store, t, _) = setup();
        store
            .visit(&t, &format!("{ORIGIN}/"), 1, &SessionOptions::default())
            .unwrap();
        let other =
            EndpointAdvertisement::new("/w", "/v", SecretKey::generate().public_key()).unwrap();
        let err = store
            .begin_session(
                &t,
                ORIGIN,
                &other,
                ClientId::new("vid", "ffff").unwrap(),
                2,
                &SessionOptions::default(),
            )
            .unwrap_err();
        assert!(matches!(err, AgentError::ServerKeyChanged { .. }));
    }

    #[test]
    fn record_visit_matches_known_cookies_only() {
        let (_, mut store, t, _) = setup();
        store
            .visit(&t, &format!("{ORIGIN}/"), 10, &SessionOptions::default())
            .unwrap();
        let id = store.sessions()[0].client_id.clone();
        let before = store.clone();
        let n = store
            .record_visit(
                &[("vid".into(), "0".repeat(32))],
                &format!("{ORIGIN}/x"),
                11,
            )
            .unwrap();
        assert_eq!(n, 0);
        assert_eq!(store, before);
        store
            .record_visit(
                &[(id.name().into(), id.value().into())],
                &format!("{ORIGIN}/cart?item=3"),
                12,
            )
            .unwrap();
        let h = &store.sessions()[0].history;
        assert_eq!(h.len(), 2);
        assert_eq!(h[1].url, "/cart");
    }

    #[test]
    fn export_import_round_trip_both_modes() {
        let (_, mut store, t, _) = setup();
        store
            .visit(&t, &format!("{ORIGIN}/"), 10, &SessionOptions::default())
            .unwrap();
        store
            .visit(
                &t,
                "http://other.test/",
                11,
                &SessionOptions {
                    unified: true,
                    ..Default::default()
                },
            )
            .unwrap();
        for mode in [WireMode::Optimized, WireMode::Verbose] {
            let bytes = export_store(&store, mode);
            assert_eq!(import_store(&bytes).unwrap(), store);
        }
        assert!(matches!(
            import_store(b"{}"),
            Err(AgentError::CorruptStore(_))
        ));
    }

    #[test]
    fn import_rejects_tampered_wrapper() {
        let (_, mut store, t, _) = setup();
        store
            .visit(&t, &format!("{ORIGIN}/"), 10, &SessionOptions::default())
            .unwrap();
        let mut tampered = store.clone();
        tampered.sessions[0].wrapper.issued_at += 1;
        let bytes = export_store(&tampered, WireMode::Optimized);
        assert!(matches!(
            import_store(&bytes),
            Err(AgentError::CorruptStore(_))
        ));
    }

    #[test]
    fn unlinked_store_refuses_sessions_but_exports() {
        let (_, mut store, t, _) = setup();
        unlink_device(&mut store);
        let err = store
            .visit(&t, &format!("{ORIGIN}/"), 10, &SessionOptions::default())
            .unwrap_err();
        assert!(matches!(err, AgentError::DeviceRetired));
        let back = import_store(&export_store(&store, WireMode::Optimized)).unwrap();
        assert!(back.is_retired());
    }

    #[test]
    fn unified_scope_indices_do_not_overlap_session_counters() {
        let (_, mut store, t, _) = setup();
        let opts = SessionOptions {
            unified: true,
            ..Default::default()
        };
        store.visit(&t, "http://a.test/", 1, &opts).unwrap();
        store.visit(&t, "http://b.test/", 1, &opts).unwrap();
        let a = store.sessions()[0].path.segments().to_vec();
        let b = store.sessions()[1].path.segments().to_vec();
        assert!(a[1] >= UNIFIED_SCOPE_BASE && b[1] > a[1]);
        assert_eq!((a[2], b[2]), (0, 0));
        assert_eq!(store.next_j(), 0);
    }

    #[test]
    fn sid_lookup() {
        let (_, mut store, t, _) = setup();
        store
            .visit(&t, &format!("{ORIGIN}/"), 1, &SessionOptions::default())
            .unwrap();
        let sid = store.sessions()[0].sid();
        assert_eq!(sid.len(), 8);
        assert_eq!(store.find_sid(&sid).unwrap(), 0);
        assert!(matches!(
            store.find_sid("zz"),
            Err(AgentError::UnknownSession(_))
        ));
    }
}
