//! Cookie wrappers: the server's signed commitment that requests signed by
//! the embedded VCR key(s) speak for the data held under a client-id cookie.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::b64;
use crate::crypto::{sha256, PublicKey, SecretKey, Signature};
use crate::encoding::{
    decode_canonical, encode_canonical, Canonical, CanonicalBytes, CanonicalReader,
    CanonicalWriter, EncodingError,
};

pub const WRAPPER_VERSION: u8 = 1;
pub const MAX_COOKIE_NAME_LEN: usize = 64;
pub const MAX_COOKIE_VALUE_LEN: usize = 256;
/// Upper bound on household size for multi-signature wrappers.
pub const MAX_MEMBERS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WrapperError {
    #[error("invalid public key")]
    InvalidPublicKey,
    #[error("duplicate member key in policy")]
    DuplicateMemberKey,
    #[error("invalid client id: {0}")]
    InvalidClientId(&'static str),
    #[error("system clock unavailable")]
    ClockUnavailable,
    #[error("wrapper signature does not verify")]
    BadSignature,
    #[error("malformed wrapper: {0}")]
    MalformedWrapper(String),
    #[error("wrapper names an unknown server key")]
    UnknownServerKey,
    #[error("wrapper key list differs from the keys sent")]
    PublicKeyMismatch,
    #[error("wrapper client id differs from the cookie sent")]
    ClientIdMismatch,
}

impl WrapperError {
    pub fn code(&self) -> &'static str {
        match self {
            WrapperError::InvalidPublicKey => "InvalidPublicKey",
            WrapperError::DuplicateMemberKey => "DuplicateMemberKey",
            WrapperError::InvalidClientId(_) => "InvalidClientId",
            WrapperError::ClockUnavailable => "ClockUnavailable",
            WrapperError::BadSignature => "BadSignature",
            WrapperError::MalformedWrapper(_) => "MalformedWrapper",
            WrapperError::UnknownServerKey => "UnknownServerKey",
            WrapperError::PublicKeyMismatch => "PublicKeyMismatch",
            WrapperError::ClientIdMismatch => "ClientIdMismatch",
        }
    }
}

impl From<EncodingError> for WrapperError {
    fn from(e: EncodingError) -> Self {
        WrapperError::MalformedWrapper(e.to_string())
    }
}

/// Server-issued session identifier: the `(name, value)` of its cookie.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "RawClientId")]
pub struct ClientId {
    cookie_name: String,
    cookie_value: String,
}

#[derive(Deserialize)]
struct RawClientId {
    cookie_name: String,
    cookie_value: String,
}

impl TryFrom<RawClientId> for ClientId {
    type Error = WrapperError;

    fn try_from(raw: RawClientId) -> Result<Self, Self::Error> {
        ClientId::new(raw.cookie_name, raw.cookie_value)
    }
}

impl ClientId {
    pub fn new(name: impl Into<String>, value: impl Into<String>) -> Result<Self, WrapperError> {
        let cookie_name = name.into();
        let cookie_value = value.into();
        if cookie_name.is_empty() || cookie_name.len() > MAX_COOKIE_NAME_LEN {
            return Err(WrapperError::InvalidClientId("cookie name length"));
        }
        if cookie_value.is_empty() || cookie_value.len() > MAX_COOKIE_VALUE_LEN {
            return Err(WrapperError::InvalidClientId("cookie value length"));
        }
        Ok(ClientId {
            cookie_name,
            cookie_value,
        })
    }

    pub fn name(&self) -> &str {
        &self.cookie_name
    }

    pub fn value(&self) -> &str {
        &self.cookie_value
    }

    fn write(&self, w: &mut CanonicalWriter) -> Result<(), EncodingError> {
        w.str("cookie_name", &self.cookie_name, MAX_COOKIE_NAME_LEN)?;
        w.str("cookie_value", &self.cookie_value, MAX_COOKIE_VALUE_LEN)
    }

    fn read(r: &mut CanonicalReader<'_>) -> Result<Self, EncodingError> {
        let name = r.str("cookie_name", MAX_COOKIE_NAME_LEN)?;
        let value = r.str("cookie_value", MAX_COOKIE_VALUE_LEN)?;
        ClientId::new(name, value).map_err(|_| EncodingError::InvalidField("client_id"))
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.cookie_name, self.cookie_value)
    }
}

/// Identifies a server signing key: first 8 bytes of SHA-256 of its
/// compressed point.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ServerKeyId(#[serde(with = "b64::fixed8")] pub [u8; 8]);

impl ServerKeyId {
    pub fn of(public_key: &PublicKey) -> Self {
        let digest = sha256(public_key.as_bytes());
        let mut id = [0u8; 8];
        id.copy_from_slice(&digest[..8]);
        ServerKeyId(id)
    }
}

impl fmt::Debug for ServerKeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ServerKeyId({})", hex::encode(self.0))
    }
}

impl fmt::Display for ServerKeyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

/// The server's long-term signing key.
#[derive(Clone)]
pub struct ServerSigningKey {
    secret: SecretKey,
    public: PublicKey,
    key_id: ServerKeyId,
}

impl ServerSigningKey {
    pub fn generate() -> Self {
        Self::from_secret(SecretKey::generate())
    }

    pub fn from_secret(secret: SecretKey) -> Self {
        let public = secret.public_key();
        ServerSigningKey {
            key_id: ServerKeyId::of(&public),
            secret,
            public,
        }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    pub fn key_id(&self) -> ServerKeyId {
        self.key_id
    }

    pub fn secret(&self) -> &SecretKey {
        &self.secret
    }
}

impl fmt::Debug for ServerSigningKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServerSigningKey")
            .field("key_id", &self.key_id)
            .finish_non_exhaustive()
    }
}

/// Ordered list of the `n` VCR keys a wrapper binds; `n = 1` for an ordinary
/// single-client session, `n > 1` for a shared household device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiSigPolicy {
    members: Vec<PublicKey>,
}

impl MultiSigPolicy {
    pub fn new(members: Vec<PublicKey>) -> Result<Self, WrapperError> {
        if members.is_empty() || members.len() > MAX_MEMBERS {
            return Err(WrapperError::InvalidPublicKey);
        }
        for (i, k) in members.iter().enumerate() {
            if members[..i].contains(k) {
                return Err(WrapperError::DuplicateMemberKey);
            }
        }
        Ok(MultiSigPolicy { members })
    }

    pub fn single(key: PublicKey) -> Self {
        MultiSigPolicy { members: vec![key] }
    }

    /// Parses raw compressed points, e.g. from a request body.
    pub fn from_bytes<B: AsRef<[u8]>>(members: &[B]) -> Result<Self, WrapperError> {
        let keys = members
            .iter()
            .map(|b| PublicKey::from_bytes(b.as_ref()).map_err(|_| WrapperError::InvalidPublicKey))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(keys)
    }

    pub fn members(&self) -> &[PublicKey] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Wrapper {
    pub version: u8,
    pub client_id: ClientId,
    pub vcr_keys: Vec<PublicKey>,
    pub issued_at: u64,
    pub server_key_id: ServerKeyId,
    pub signature: Signature,
}

struct WrapperPayload<'a>(&'a Wrapper);

fn write_payload(w: &Wrapper, out: &mut CanonicalWriter) -> Result<(), EncodingError> {
    out.u8(w.version);
    w.client_id.write(out)?;
    out.count("vcr_keys", w.vcr_keys.len(), MAX_MEMBERS)?;
    for k in &w.vcr_keys {
        out.public_key(k);
    }
    out.u64(w.issued_at);
    out.fixed(&w.server_key_id.0);
    Ok(())
}

impl Canonical for WrapperPayload<'_> {
    const DOMAIN: &'static str = "viceroy/wrapper-payload/v1";

    fn write_fields(&self, w: &mut CanonicalWriter) -> Result<(), EncodingError> {
        write_payload(self.0, w)
    }

    fn read_fields(_: &mut CanonicalReader<'_>) -> Result<Self, EncodingError> {
        unreachable!("payloads are only ever encoded")
    }
}

impl Canonical for Wrapper {
    const DOMAIN: &'static str = "viceroy/wrapper/v1";

    fn write_fields(&self, w: &mut CanonicalWriter) -> Result<(), EncodingError> {
        write_payload(self, w)?;
        w.signature(&self.signature);
        Ok(())
    }

    fn read_fields(r: &mut CanonicalReader<'_>) -> Result<Self, EncodingError> {
        let version = r.u8()?;
        let client_id = ClientId::read(r)?;
        let n = r.count("vcr_keys", MAX_MEMBERS)?;
        let vcr_keys = (0..n)
            .map(|_| r.public_key("vcr_keys"))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Wrapper {
            version,
            client_id,
            vcr_keys,
            issued_at: r.u64()?,
            server_key_id: ServerKeyId(r.fixed()?),
            signature: r.signature()?,
        })
    }
}

impl Wrapper {
    /// Canonical bytes covered by the server signature.
    pub fn signed_payload(&self) -> Result<CanonicalBytes, EncodingError> {
        encode_canonical(&WrapperPayload(self))
    }

    pub fn to_canonical(&self) -> Result<CanonicalBytes, EncodingError> {
        encode_canonical(self)
    }

    pub fn from_canonical(bytes: &[u8]) -> Result<Self, WrapperError> {
        Ok(decode_canonical(bytes)?)
    }

    pub fn policy(&self) -> Result<MultiSigPolicy, WrapperError> {
        MultiSigPolicy::new(self.vcr_keys.clone())
    }
}

pub fn issue_wrapper(
    key: &ServerSigningKey,
    client_id: ClientId,
    keys: &MultiSigPolicy,
    now: u64,
) -> Result<Wrapper, WrapperError> {
    let mut wrapper = Wrapper {
        version: WRAPPER_VERSION,
        client_id,
        vcr_keys: keys.members().to_vec(),
        issued_at: now,
        server_key_id: key.key_id(),
        signature: Signature([0u8; 64]),
    };
    let digest = wrapper.signed_payload()?.digest();
    wrapper.signature = key.secret().sign_prehash(&digest);
    Ok(wrapper)
}

pub fn verify_wrapper(server_pubkey: &PublicKey, w: &Wrapper) -> Result<(), WrapperError> {
    if w.version != WRAPPER_VERSION {
        return Err(WrapperError::MalformedWrapper(format!(
            "unsupported version {}",
            w.version
        )));
    }
    if w.server_key_id != ServerKeyId::of(server_pubkey) {
        return Err(WrapperError::UnknownServerKey);
    }
    MultiSigPolicy::new(w.vcr_keys.clone())
        .map_err(|e| WrapperError::MalformedWrapper(e.to_string()))?;
    let digest = w.signed_payload()?.digest();
    if server_pubkey.verify_prehash(&digest, &w.signature) {
        Ok(())
    } else {
        Err(WrapperError::BadSignature)
    }
}

/// Public keys a server accepts wrappers under, indexed by key id so old
/// wrappers keep verifying after a key rotation.
#[derive(Debug, Clone, Default)]
pub struct ServerKeyring {
    keys: std::collections::BTreeMap<ServerKeyId, PublicKey>,
}

impl ServerKeyring {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_key(public_key: PublicKey) -> Self {
        let mut ring = Self::new();
        ring.insert(public_key);
        ring
    }

    pub fn insert(&mut self, public_key: PublicKey) {
        self.keys.insert(ServerKeyId::of(&public_key), public_key);
    }

    pub fn get(&self, id: &ServerKeyId) -> Option<&PublicKey> {
        self.keys.get(id)
    }

    pub fn verify(&self, w: &Wrapper) -> Result<(), WrapperError> {
        let key = self
            .keys
            .get(&w.server_key_id)
            .ok_or(WrapperError::UnknownServerKey)?;
        verify_wrapper(key, w)
    }
}

/// Client-side check that the server bound exactly the keys and cookie that
/// were sent. A mismatch means the key list was swapped in transit.
pub fn check_wrapper_echo(
    expected_keys: &MultiSigPolicy,
    expected_client_id: &ClientId,
    w: &Wrapper,
) -> Result<(), WrapperError> {
    if w.vcr_keys != expected_keys.members() {
        return Err(WrapperError::PublicKeyMismatch);
    }
    if &w.client_id != expected_client_id {
        return Err(WrapperError::ClientIdMismatch);
    }
    Ok(())
}
