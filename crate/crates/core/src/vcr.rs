//! Verifiable consumer requests: construction, signing, verification with
//! replay protection, and optional sealing to the server's long-term key.
//!
//! A request carries one or more wrappers, an action, and a timestamp. The
//! signed body is the canonical encoding of exactly those fields, so any
//! change to them after signing breaks every signature. Required signers are:
//!
//! * ordinary and household requests: every key across the wrappers' key
//!   lists, in order (one signature per key, positional);
//! * unified requests: the single server-scoped key `m/i/s`, from which the
//!   verifier re-derives each wrapper's session key `m/i/s/j`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{
    hybrid_decrypt, hybrid_encrypt, HybridCiphertext, PublicKey, SecretKey, Signature,
};
use crate::encoding::{
    decode_canonical, encode_canonical, Canonical, CanonicalBytes, CanonicalReader,
    CanonicalWriter, EncodingError,
};
use crate::keyhier::{
    DerivationPath, Derive as _, ExtendedPrivateKey, ExtendedPublicKey, KeyError, XPUB_LEN,
};
use crate::replay::{ReplayCache, ReplayError};
use crate::wrapper::{ClientId, ServerKeyring, Wrapper, WrapperError};

pub const VCR_VERSION: u8 = 1;
pub const MAX_WRAPPERS: usize = 64;
pub const MAX_SIGNATURES: usize = 64;
pub const MAX_CHANGES: usize = 64;
pub const MAX_FIELD_LEN: usize = 128;
pub const MAX_VALUE_LEN: usize = 4096;

const SEAL_LABEL: &[u8] = b"viceroy/sealed-vcr/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SignError {
    #[error("signing refused by the user")]
    Refused,
    #[error("device {0} is retired")]
    DeviceRetired(u32),
    #[error("signer is locked")]
    Locked,
    #[error("malformed path: {0}")]
    MalformedPath(String),
    #[error("signer transport: {0}")]
    Transport(String),
}

impl SignError {
    pub fn code(&self) -> &'static str {
        match self {
            SignError::Refused => "SignerRefused",
            SignError::DeviceRetired(_) => "DeviceRetired",
            SignError::Locked => "Locked",
            SignError::MalformedPath(_) => "MalformedPath",
            SignError::Transport(_) => "SignerUnavailable",
        }
    }
}

/// Anything that can produce a signature for the key at a derivation path:
/// the in-process signer, a client for the signer daemon, or (in tests and
/// household setups) a bare extended private key.
pub trait SigningOracle {
    /// `summary` is a human-readable description passed through to any
    /// confirmation prompt. It is not validated against the digest.
    fn sign_digest(
        &self,
        path: &DerivationPath,
        digest: &[u8; 32],
        summary: Option<&str>,
    ) -> Result<Signature, SignError>;
}

impl SigningOracle for ExtendedPrivateKey {
    fn sign_digest(
        &self,
        path: &DerivationPath,
        digest: &[u8; 32],
        _summary: Option<&str>,
    ) -> Result<Signature, SignError> {
        let key = self
            .derive_path(path)
            .map_err(|e| SignError::MalformedPath(e.to_string()))?;
        Ok(key.sign_prehash(digest))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VcrError {
    #[error("request carries no wrappers")]
    EmptyWrapperList,
    #[error("wrappers come from different server keys")]
    MixedServers,
    #[error("invalid action: {0}")]
    InvalidAction(&'static str),
    #[error("wrapper rejected: {0}")]
    BadWrapper(WrapperError),
    #[error("request signature does not verify")]
    BadRequestSignature,
    #[error("missing signatures: have {have}, need {need}")]
    MissingSignature { have: usize, need: usize },
    #[error("stale timestamp")]
    StaleTimestamp,
    #[error("timestamp too far in the future")]
    FutureTimestamp,
    #[error("replayed request")]
    ReplayDetected,
    #[error("wrapper key is not a child of the unified scope key")]
    SessionKeyMismatch,
    #[error("request is not a unified request")]
    NotUnified,
    #[error("signer refused")]
    SignerRefused,
    #[error("signer produced a signature for a different key; wrong path?")]
    UnknownPath,
    #[error("signer error: {0}")]
    Signer(SignError),
    #[error("decryption failed")]
    DecryptFailed,
    #[error("malformed request: {0}")]
    MalformedRequest(String),
}

impl VcrError {
    /// Stable error class; the only detail a server reveals on rejection.
    pub fn code(&self) -> &'static str {
        match self {
            VcrError::EmptyWrapperList => "EmptyWrapperList",
            VcrError::MixedServers => "MixedServers",
            VcrError::InvalidAction(_) => "InvalidAction",
            VcrError::BadWrapper(_) => "BadWrapper",
            VcrError::BadRequestSignature => "BadRequestSignature",
            VcrError::MissingSignature { .. } => "MissingSignature",
            VcrError::StaleTimestamp => "StaleTimestamp",
            VcrError::FutureTimestamp => "FutureTimestamp",
            VcrError::ReplayDetected => "ReplayDetected",
            VcrError::SessionKeyMismatch => "SessionKeyMismatch",
            VcrError::NotUnified => "NotUnified",
            VcrError::SignerRefused => "SignerRefused",
            VcrError::UnknownPath => "UnknownPath",
            VcrError::Signer(e) => e.code(),
            VcrError::DecryptFailed => "DecryptFailed",
            VcrError::MalformedRequest(_) => "MalformedRequest",
        }
    }
}

impl From<EncodingError> for VcrError {
    fn from(e: EncodingError) -> Self {
        VcrError::MalformedRequest(e.to_string())
    }
}

impl From<ReplayError> for VcrError {
    fn from(e: ReplayError) -> Self {
        match e {
            ReplayError::StaleTimestamp => VcrError::StaleTimestamp,
            ReplayError::FutureTimestamp => VcrError::FutureTimestamp,
            ReplayError::ReplayDetected => VcrError::ReplayDetected,
        }
    }
}

impl From<SignError> for VcrError {
    fn from(e: SignError) -> Self {
        match e {
            SignError::Refused => VcrError::SignerRefused,
            other => VcrError::Signer(other),
        }
    }
}

/// One MODIFY triple. Both values are always present so a replayed modify
/// cannot clobber data that changed since it was signed.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldChange {
    pub field: String,
    pub old_value: String,
    pub new_value: String,
}

impl FieldChange {
    pub fn new(
        field: impl Into<String>,
        old_value: impl Into<String>,
        new_value: impl Into<String>,
    ) -> Self {
        FieldChange {
            field: field.into(),
            old_value: old_value.into(),
            new_value: new_value.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "UPPERCASE")]
pub enum VcrAction {
    Access {
        /// Key the server encrypts the response to, if any.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        response_key: Option<PublicKey>,
    },
    Modify {
        changes: Vec<FieldChange>,
    },
    Delete,
}

impl VcrAction {
    pub fn access() -> Self {
        VcrAction::Access { response_key: None }
    }

    pub fn name(&self) -> &'static str {
        match self {
            VcrAction::Access { .. } => "ACCESS",
            VcrAction::Modify { .. } => "MODIFY",
            VcrAction::Delete => "DELETE",
        }
    }

    fn validate(&self) -> Result<(), VcrError> {
        if let VcrAction::Modify { changes } = self {
            if changes.is_empty() {
                return Err(VcrError::InvalidAction("MODIFY needs at least one change"));
            }
            if changes.len() > MAX_CHANGES {
                return Err(VcrError::InvalidAction("too many changes"));
            }
            for (i, c) in changes.iter().enumerate() {
                if c.field.is_empty() {
                    return Err(VcrError::InvalidAction("empty field name"));
                }
                if changes[..i].iter().any(|p| p.field == c.field) {
                    return Err(VcrError::InvalidAction("field changed twice"));
                }
            }
        }
        Ok(())
    }

    fn write(&self, w: &mut CanonicalWriter) -> Result<(), EncodingError> {
        match self {
            VcrAction::Access { response_key } => {
                w.u8(1);
                w.bool(response_key.is_some());
                if let Some(k) = response_key {
                    w.public_key(k);
                }
            }
            VcrAction::Modify { changes } => {
                w.u8(2);
                w.count("changes", changes.len(), MAX_CHANGES)?;
                for c in changes {
                    w.str("field", &c.field, MAX_FIELD_LEN)?;
                    w.str("old_value", &c.old_value, MAX_VALUE_LEN)?;
                    w.str("new_value", &c.new_value, MAX_VALUE_LEN)?;
                }
            }
            VcrAction::Delete => w.u8(3),
        }
        Ok(())
    }

    fn read(r: &mut CanonicalReader<'_>) -> Result<Self, EncodingError> {
        match r.u8()? {
            1 => {
                let response_key = if r.bool("response_key")? {
                    Some(r.public_key("response_key")?)
                } else {
                    None
                };
                Ok(VcrAction::Access { response_key })
            }
            2 => {
                let n = r.count("changes", MAX_CHANGES)?;
                let changes = (0..n)
                    .map(|_| {
                        Ok(FieldChange {
                            field: r.str("field", MAX_FIELD_LEN)?,
                            old_value: r.str("old_value", MAX_VALUE_LEN)?,
                            new_value: r.str("new_value", MAX_VALUE_LEN)?,
                        })
                    })
                    .collect::<Result<Vec<_>, EncodingError>>()?;
                Ok(VcrAction::Modify { changes })
            }
            3 => Ok(VcrAction::Delete),
            _ => Err(EncodingError::InvalidField("action")),
        }
    }
}

/// Server-scoped key `m/i/s` plus the session counter `j` claimed for each
/// wrapper, in wrapper order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UnifiedScope {
    pub scope_key: ExtendedPublicKey,
    pub session_indices: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VcrRequest {
    pub version: u8,
    pub wrappers: Vec<Wrapper>,
    pub action: VcrAction,
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unified: Option<UnifiedScope>,
    /// Client bookkeeping only; must be empty when submitted, since paths
    /// reveal the device id and session counter.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub signer_paths: Vec<DerivationPath>,
    #[serde(default)]
    pub signatures: Vec<Signature>,
}

struct VcrBody<'a>(&'a VcrRequest);

fn write_body(req: &VcrRequest, w: &mut CanonicalWriter) -> Result<(), EncodingError> {
    w.u8(req.version);
    w.count("wrappers", req.wrappers.len(), MAX_WRAPPERS)?;
    for wrapper in &req.wrappers {
        wrapper.write_fields(w)?;
    }
    req.action.write(w)?;
    w.u64(req.timestamp);
    w.bool(req.unified.is_some());
    if let Some(u) = &req.unified {
        w.fixed(&u.scope_key.to_bytes());
        w.count("session_indices", u.session_indices.len(), MAX_WRAPPERS)?;
        for &j in &u.session_indices {
            w.u32(j);
        }
    }
    Ok(())
}

impl Canonical for VcrBody<'_> {
    const DOMAIN: &'static str = "viceroy/vcr-body/v1";

    fn write_fields(&self, w: &mut CanonicalWriter) -> Result<(), EncodingError> {
        write_body(self.0, w)
    }

    fn read_fields(_: &mut CanonicalReader<'_>) -> Result<Self, EncodingError> {
        unreachable!("bodies are only ever encoded")
    }
}

impl Canonical for VcrRequest {
    const DOMAIN: &'static str = "viceroy/vcr/v1";

    fn write_fields(&self, w: &mut CanonicalWriter) -> Result<(), EncodingError> {
        write_body(self, w)?;
        w.count("signer_paths", self.signer_paths.len(), MAX_SIGNATURES)?;
        for p in &self.signer_paths {
            w.count("path", p.len(), crate::keyhier::MAX_PATH_DEPTH)?;
            for &s in p.segments() {
                w.u32(s);
            }
        }
        w.count("signatures", self.signatures.len(), MAX_SIGNATURES)?;
        for s in &self.signatures {
            w.signature(s);
        }
        Ok(())
    }

    fn read_fields(r: &mut CanonicalReader<'_>) -> Result<Self, EncodingError> {
        let version = r.u8()?;
        let n = r.count("wrappers", MAX_WRAPPERS)?;
        let wrappers = (0..n)
            .map(|_| Wrapper::read_fields(r))
            .collect::<Result<Vec<_>, _>>()?;
        let action = VcrAction::read(r)?;
        let timestamp = r.u64()?;
        let unified = if r.bool("unified")? {
            let raw: [u8; XPUB_LEN] = r.fixed()?;
            let scope_key = ExtendedPublicKey::from_bytes(&raw)
                .map_err(|_| EncodingError::InvalidField("scope_key"))?;
            let m = r.count("session_indices", MAX_WRAPPERS)?;
            let session_indices = (0..m).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            Some(UnifiedScope {
                scope_key,
                session_indices,
            })
        } else {
            None
        };
        let np = r.count("signer_paths", MAX_SIGNATURES)?;
        let signer_paths = (0..np)
            .map(|_| {
                let len = r.count("path", crate::keyhier::MAX_PATH_DEPTH)?;
                let segs = (0..len).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
                DerivationPath::new(segs).map_err(|_| EncodingError::InvalidField("path"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let ns = r.count("signatures", MAX_SIGNATURES)?;
        let signatures = (0..ns)
            .map(|_| r.signature())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(VcrRequest {
            version,
            wrappers,
            action,
            timestamp,
            unified,
            signer_paths,
            signatures,
        })
    }
}

/// What the server learned from a verified request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifiedRequest {
    /// Distinct client ids covered, in wrapper order.
    pub client_ids: Vec<ClientId>,
    pub action: VcrAction,
    pub digest: [u8; 32],
}

impl VerifiedRequest {
    pub fn client_id(&self) -> &ClientId {
        &self.client_ids[0]
    }
}

impl VcrRequest {
    /// Canonical bytes every signature covers: version, wrappers, action,
    /// timestamp and unified scope. Signatures and paths are excluded.
    pub fn signed_body(&self) -> Result<CanonicalBytes, EncodingError> {
        encode_canonical(&VcrBody(self))
    }

    /// Replay-cache key: SHA-256 of the signed body, so re-signing the same
    /// body is still a replay.
    pub fn digest(&self) -> Result<[u8; 32], EncodingError> {
        Ok(self.signed_body()?.digest())
    }

    pub fn to_canonical(&self) -> Result<CanonicalBytes, EncodingError> {
        encode_canonical(self)
    }

    pub fn from_canonical(bytes: &[u8]) -> Result<Self, VcrError> {
        Ok(decode_canonical(bytes)?)
    }

    /// Keys whose signatures the verifier requires, in signature order.
    pub fn required_keys(&self) -> Vec<PublicKey> {
        if let Some(u) = &self.unified {
            return vec![*u.scope_key.public_key()];
        }
        let mut keys: Vec<PublicKey> = Vec::new();
        for k in self.wrappers.iter().flat_map(|w| w.vcr_keys.iter()) {
            if !keys.contains(k) {
                keys.push(*k);
            }
        }
        keys
    }

    pub fn is_fully_signed(&self) -> bool {
        self.signatures.len() == self.required_keys().len()
    }

    /// Copy without client-side bookkeeping, ready to send.
    pub fn for_submission(&self) -> VcrRequest {
        VcrRequest {
            signer_paths: Vec::new(),
            ..self.clone()
        }
    }

    pub fn summary(&self) -> String {
        let ids: Vec<String> = self
            .wrappers
            .iter()
            .map(|w| w.client_id.to_string())
            .collect();
        format!(
            "{} request over {} session(s): {}",
            self.action.name(),
            self.wrappers.len(),
            ids.join(", ")
        )
    }

    fn distinct_client_ids(&self) -> Vec<ClientId> {
        let mut ids: Vec<ClientId> = Vec::new();
        for w in &self.wrappers {
            if !ids.contains(&w.client_id) {
                ids.push(w.client_id.clone());
            }
        }
        ids
    }
}

fn check_wrapper_set(wrappers: &[Wrapper]) -> Result<(), VcrError> {
    let first = wrappers.first().ok_or(VcrError::EmptyWrapperList)?;
    if wrappers.len() > MAX_WRAPPERS {
        return Err(VcrError::MalformedRequest("too many wrappers".into()));
    }
    if wrappers
        .iter()
        .any(|w| w.server_key_id != first.server_key_id)
    {
        return Err(VcrError::MixedServers);
    }
    Ok(())
}

pub fn build_vcr(
    wrappers: Vec<Wrapper>,
    action: VcrAction,
    now: u64,
) -> Result<VcrRequest, VcrError> {
    check_wrapper_set(&wrappers)?;
    action.validate()?;
    Ok(VcrRequest {
        version: VCR_VERSION,
        wrappers,
        action,
        timestamp: now,
        unified: None,
        signer_paths: Vec::new(),
        signatures: Vec::new(),
    })
}

/// Unified request over several sessions with one server. `session_indices[k]`
/// is the `j` such that `wrappers[k]`'s key is `scope_key / j`.
pub fn build_unified_vcr(
    wrappers: Vec<Wrapper>,
    scope_key: ExtendedPublicKey,
    session_indices: Vec<u32>,
    action: VcrAction,
    now: u64,
) -> Result<VcrRequest, VcrError> {
    let mut req = build_vcr(wrappers, action, now)?;
    let scope = UnifiedScope {
        scope_key,
        session_indices,
    };
    check_unified(&req.wrappers, &scope)?;
    req.unified = Some(scope);
    Ok(req)
}

fn check_unified(wrappers: &[Wrapper], scope: &UnifiedScope) -> Result<(), VcrError> {
    if scope.session_indices.len() != wrappers.len() {
        return Err(VcrError::MalformedRequest(
            "one session index per wrapper".into(),
        ));
    }
    for (w, &j) in wrappers.iter().zip(&scope.session_indices) {
        let [key] = w.vcr_keys.as_slice() else {
            return Err(VcrError::SessionKeyMismatch);
        };
        let derived = match scope.scope_key.derive_child_pub(j) {
            Ok(child) => child,
            Err(KeyError::HardenedIndexRejected(_)) | Err(KeyError::DegenerateChild(_)) => {
                return Err(VcrError::SessionKeyMismatch)
            }
            Err(e) => return Err(VcrError::MalformedRequest(e.to_string())),
        };
        if derived.public_key() != key {
            return Err(VcrError::SessionKeyMismatch);
        }
    }
    Ok(())
}

/// Appends one signature from `signer` for the key at `path`. Call once per
/// required signer; on error the request is left untouched.
pub fn sign_vcr(
    req: &mut VcrRequest,
    signer: &dyn SigningOracle,
    path: &DerivationPath,
) -> Result<(), VcrError> {
    let required = req.required_keys();
    let position = req.signatures.len();
    let Some(expected) = required.get(position) else {
        return Err(VcrError::MalformedRequest(
            "request already fully signed".into(),
        ));
    };
    let digest = req.digest()?;
    let signature = signer.sign_digest(path, &digest, Some(&req.summary()))?;
    if !expected.verify_prehash(&digest, &signature) {
        return Err(VcrError::UnknownPath);
    }
    req.signatures.push(signature);
    req.signer_paths.push(path.clone());
    Ok(())
}

/// Server-side verification. On success the request digest is recorded in
/// `cache`; on any failure the cache is untouched.
pub fn verify_vcr(
    keys: &ServerKeyring,
    req: &VcrRequest,
    now: u64,
    cache: &ReplayCache,
) -> Result<VerifiedRequest, VcrError> {
    if req.version != VCR_VERSION {
        return Err(VcrError::MalformedRequest(format!(
            "unsupported version {}",
            req.version
        )));
    }
    if !req.signer_paths.is_empty() {
        return Err(VcrError::MalformedRequest(
            "derivation paths must not be submitted".into(),
        ));
    }
    check_wrapper_set(&req.wrappers)?;
    req.action.validate()?;
    if req.timestamp == 0 {
        return Err(VcrError::MalformedRequest("zero timestamp".into()));
    }
    cache.check_freshness(req.timestamp, now)?;

    for w in &req.wrappers {
        keys.verify(w).map_err(VcrError::BadWrapper)?;
    }
    if let Some(scope) = &req.unified {
        check_unified(&req.wrappers, scope)?;
    }

    let required = req.required_keys();
    if req.signatures.len() < required.len() {
        return Err(VcrError::MissingSignature {
            have: req.signatures.len(),
            need: required.len(),
        });
    }
    if req.signatures.len() > required.len() {
        return Err(VcrError::BadRequestSignature);
    }
    let digest = req.digest()?;
    for (key, sig) in required.iter().zip(&req.signatures) {
        if !key.verify_prehash(&digest, sig) {
            return Err(VcrError::BadRequestSignature);
        }
    }

    cache.check_and_insert(digest, req.timestamp, now)?;
    Ok(VerifiedRequest {
        client_ids: req.distinct_client_ids(),
        action: req.action.clone(),
        digest,
    })
}

/// As [`verify_vcr`], but only for unified requests.
pub fn verify_unified_vcr(
    keys: &ServerKeyring,
    req: &VcrRequest,
    now: u64,
    cache: &ReplayCache,
) -> Result<VerifiedRequest, VcrError> {
    if req.unified.is_none() {
        return Err(VcrError::NotUnified);
    }
    verify_vcr(keys, req, now, cache)
}

/// A request super-encrypted to the server's long-term key, hiding the
/// action and metadata from eavesdroppers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SealedVcr(pub HybridCiphertext);

pub fn seal_vcr(server_longterm_pub: &PublicKey, req: &VcrRequest) -> Result<SealedVcr, VcrError> {
    let plaintext = req.to_canonical()?;
    Ok(SealedVcr(hybrid_encrypt(
        server_longterm_pub,
        SEAL_LABEL,
        plaintext.as_slice(),
    )))
}

pub fn unseal_vcr(
    server_longterm_priv: &SecretKey,
    sealed: &SealedVcr,
) -> Result<VcrRequest, VcrError> {
    let plaintext = hybrid_decrypt(server_longterm_priv, SEAL_LABEL, &sealed.0)
        .map_err(|_| VcrError::DecryptFailed)?;
    VcrRequest::from_canonical(&plaintext)
}

/// Body accepted by the VCR endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VcrSubmission {
    Sealed(SealedVcr),
    Plain(VcrRequest),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wrapper::{issue_wrapper, MultiSigPolicy, ServerSigningKey};

    struct Fixture {
        server: ServerSigningKey,
        ring: ServerKeyring,
        master: ExtendedPrivateKey,
    }

    fn fixture() -> Fixture {
        let server = ServerSigningKey::generate();
        Fixture {
            ring: ServerKeyring::with_key(*server.public_key()),
            server,
            master: ExtendedPrivateKey::generate_master(&[42u8; 32]).unwrap(),
        }
    }

    impl Fixture {
        fn wrapper(&self, path: &str, cookie: &str) -> Wrapper {
            let path: DerivationPath = path.parse().unwrap();
            let key = *self
                .master
                .neuter()
                .derive_path(&path)
                .unwrap()
                .public_key();
            issue_wrapper(
                &self.server,
                ClientId::new("vid", cookie).unwrap(),
                &MultiSigPolicy::single(key),
                1000,
            )
            .unwrap()
        }
    }

    #[test]
    fn build_unsigned_delete() {
        let f = fixture();
        let req = build_vcr(vec![f.wrapper("m/0/0", "a")], VcrAction::Delete, 2000).unwrap();
        assert!(req.signatures.is_empty());
        assert_eq!(req.timestamp, 2000);
    }

    #[test]
    fn mixed_servers_and_empty_list() {
        let f = fixture();
        let g = fixture();
        assert_eq!(
            build_vcr(
                vec![f.wrapper("m/0/0", "a"), g.wrapper("m/0/1", "b")],
                VcrAction::Delete,
                1
            )
            .unwrap_err(),
            VcrError::MixedServers
        );
        assert_eq!(
            build_vcr(vec![], VcrAction::Delete, 1).unwrap_err(),
            VcrError::EmptyWrapperList
        );
    }

    #[test]
    fn access_response_key_carried_verbatim() {
        let f = fixture();
        let k = SecretKey::generate().public_key();
        let req = build_vcr(
            vec![f.wrapper("m/0/0", "a")],
            VcrAction::Access {
                response_key: Some(k),
            },
            1,
        )
        .unwrap();
        assert_eq!(
            req.action,
            VcrAction::Access {
                response_key: Some(k)
            }
        );
    }

    #[test]
    fn sign_and_verify_single() {
        let f = fixture();
        let cache = ReplayCache::new(300);
        let mut req = build_vcr(vec![f.wrapper("m/0/1", "a")], VcrAction::access(), 1000).unwrap();
        sign_vcr(&mut req, &f.master, &"m/0/1".parse().unwrap()).unwrap();
        assert_eq!(req.signer_paths.len(), 1);
        let v = verify_vcr(&f.ring, &req.for_submission(), 1000, &cache).unwrap();
        assert_eq!(v.client_id().value(), "a");
        assert_eq!(
            verify_vcr(&f.ring, &req.for_submission(), 1001, &cache).unwrap_err(),
            VcrError::ReplayDetected
        );
    }

    #[test]
    fn unstripped_paths_rejected() {
        let f = fixture();
        let mut req = build_vcr(vec![f.wrapper("m/0/1", "a")], VcrAction::Delete, 1000).unwrap();
        sign_vcr(&mut req, &f.master, &"m/0/1".parse().unwrap()).unwrap();
        assert!(matches!(
            verify_vcr(&f.ring, &req, 1000, &ReplayCache::default()),
            Err(VcrError::MalformedRequest(_))
        ));
    }

    #[test]
    fn wrong_path_detected_at_signing() {
        let f = fixture();
        let mut req = build_vcr(vec![f.wrapper("m/0/1", "a")], VcrAction::Delete, 1000).unwrap();
        assert_eq!(
            sign_vcr(&mut req, &f.master, &"m/0/2".parse().unwrap()).unwrap_err(),
            VcrError::UnknownPath
        );
        assert!(req.signatures.is_empty());
    }

    #[test]
    fn refusing_signer_leaves_request_unchanged() {
        struct Deny;
        impl SigningOracle for Deny {
            fn sign_digest(
                &self,
                _: &DerivationPath,
                _: &[u8; 32],
                _: Option<&str>,
            ) -> Result<Signature, SignError> {
                Err(SignError::Refused)
            }
        }
        let f = fixture();
        let mut req = build_vcr(vec![f.wrapper("m/0/1", "a")], VcrAction::Delete, 1000).unwrap();
        let before = req.clone();
        assert_eq!(
            sign_vcr(&mut req, &Deny, &"m/0/1".parse().unwrap()).unwrap_err(),
            VcrError::SignerRefused
        );
        assert_eq!(req, before);
    }

    #[test]
    fn modify_needs_changes() {
        let f = fixture();
        assert!(matches!(
            build_vcr(
                vec![f.wrapper("m/0/0", "a")],
                VcrAction::Modify { changes: vec![] },
                1
            ),
            Err(VcrError::InvalidAction(_))
        ));
    }

    #[test]
    fn seal_round_trip() {
        let f = fixture();
        let mut req = build_vcr(vec![f.wrapper("m/0/1", "a")], VcrAction::Delete, 1000).unwrap();
        sign_vcr(&mut req, &f.master, &"m/0/1".parse().unwrap()).unwrap();
        let req = req.for_submission();
        let sealed = seal_vcr(f.server.public_key(), &req).unwrap();
        assert_eq!(unseal_vcr(f.server.secret(), &sealed).unwrap(), req);
        let mut bad = sealed.clone();
        bad.0.ciphertext[3] ^= 0x10;
        assert_eq!(
            unseal_vcr(f.server.secret(), &bad).unwrap_err(),
            VcrError::DecryptFailed
        );
    }
}
