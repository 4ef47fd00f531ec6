//! Hierarchical deterministic keys over secp256k1 (BIP32, non-hardened only).
//!
//! Paths are written `m/i/j` (device `i`, per-device session counter `j`) or
//! `m/i/s/j` for server-scoped session keys. Public derivation never touches
//! private material, so the agent can mint session keys from the device key
//! `m/i` while the master stays on the trusted signer.
//!
//! Extended keys serialize as
//!
//! ```text
//! version (1) | depth (1) | child_index (4, BE) | chain_code (32) | key
//! ```
//!
//! where `key` is the 32-byte scalar (version `0x01`) or the 33-byte
//! compressed point (version `0x02`). Text forms are hex and base58-check.

use std::fmt;
use std::str::FromStr;

use hmac::{Hmac, Mac};
use k256::elliptic_curve::ff::PrimeField;
use k256::elliptic_curve::group::Group;
use k256::elliptic_curve::ops::MulByGenerator;
use k256::{FieldBytes, NonZeroScalar, ProjectivePoint, Scalar};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::Sha512;
use thiserror::Error;
use zeroize::Zeroize;

use crate::crypto::{PublicKey, SecretKey, Signature};

pub const HARDENED_OFFSET: u32 = 1 << 31;
pub const MAX_PATH_DEPTH: usize = 4;
pub const MIN_SEED_LEN: usize = 16;
pub const MAX_SEED_LEN: usize = 64;

pub const XPRV_VERSION: u8 = 0x01;
pub const XPUB_VERSION: u8 = 0x02;
pub const XPRV_LEN: usize = 1 + 1 + 4 + 32 + 32;
pub const XPUB_LEN: usize = 1 + 1 + 4 + 32 + 33;

const MASTER_HMAC_KEY: &[u8] = b"Bitcoin seed";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyError {
    #[error("seed must be {MIN_SEED_LEN}..={MAX_SEED_LEN} bytes, got {0}")]
    InvalidSeedLength(usize),
    #[error("seed produced an invalid master scalar")]
    DegenerateKey,
    #[error("hardened index {0} rejected: only non-hardened derivation is supported")]
    HardenedIndexRejected(u32),
    #[error("child index {0} yields an invalid key; use the next index")]
    DegenerateChild(u32),
    #[error("recovered scalar does not match the parent public key")]
    RecoveryMismatch,
    #[error("derivation path too deep ({0} segments, max {MAX_PATH_DEPTH})")]
    PathTooDeep(usize),
    #[error("malformed derivation path: {0}")]
    MalformedPath(String),
    #[error("malformed extended key: {0}")]
    MalformedKey(&'static str),
    #[error("derivation depth overflow")]
    DepthOverflow,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChainCode(pub [u8; 32]);

impl fmt::Debug for ChainCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ChainCode({})", hex::encode(self.0))
    }
}

type HmacSha512 = Hmac<Sha512>;

fn hmac_sha512(key: &[u8], data: &[u8]) -> [u8; 64] {
    let mut mac = HmacSha512::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(data);
    mac.finalize().into_bytes().into()
}

fn split(i: &[u8; 64]) -> ([u8; 32], ChainCode) {
    let mut il = [0u8; 32];
    let mut ir = [0u8; 32];
    il.copy_from_slice(&i[..32]);
    ir.copy_from_slice(&i[32..]);
    (il, ChainCode(ir))
}

/// Parses `IL` as a scalar, `None` when `IL >= n`.
fn parse_scalar(bytes: &[u8; 32]) -> Option<Scalar> {
    Option::from(Scalar::from_repr(FieldBytes::clone_from_slice(bytes)))
}

fn check_index(index: u32) -> Result<(), KeyError> {
    if index >= HARDENED_OFFSET {
        Err(KeyError::HardenedIndexRejected(index))
    } else {
        Ok(())
    }
}

fn child_data(parent: &PublicKey, index: u32) -> [u8; 37] {
    let mut data = [0u8; 37];
    data[..33].copy_from_slice(parent.as_bytes());
    data[33..].copy_from_slice(&index.to_be_bytes());
    data
}

/// Secret scalar plus chain code.
#[derive(Clone, PartialEq, Eq)]
pub struct ExtendedPrivateKey {
    secret: SecretKey,
    chain_code: ChainCode,
    depth: u8,
    child_index: u32,
}

/// Compressed point plus chain code.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct ExtendedPublicKey {
    public_key: PublicKey,
    chain_code: ChainCode,
    depth: u8,
    child_index: u32,
}

/// Either kind of extended key, for APIs that derive from whichever root
/// they are handed.
pub trait Derive: Sized {
    fn derive_child(&self, index: u32) -> Result<Self, KeyError>;

    /// Left fold of child derivation over the path; the empty path is the
    /// identity.
    fn derive_path(&self, path: &DerivationPath) -> Result<Self, KeyError> {
        path.segments()
            .iter()
            .try_fold(self.clone_key(), |key, &index| key.derive_child(index))
    }

    #[doc(hidden)]
    fn clone_key(&self) -> Self;
}

impl ExtendedPrivateKey {
    pub fn generate_master(seed: &[u8]) -> Result<Self, KeyError> {
        if !(MIN_SEED_LEN..=MAX_SEED_LEN).contains(&seed.len()) {
            return Err(KeyError::InvalidSeedLength(seed.len()));
        }
        let mut i = hmac_sha512(MASTER_HMAC_KEY, seed);
        let (mut il, chain_code) = split(&i);
        i.zeroize();
        let secret = SecretKey::from_bytes(&il).map_err(|_| KeyError::DegenerateKey);
        il.zeroize();
        Ok(ExtendedPrivateKey {
            secret: secret?,
            chain_code,
            depth: 0,
            child_index: 0,
        })
    }

    pub fn secret_key(&self) -> &SecretKey {
        &self.secret
    }

    pub fn chain_code(&self) -> &ChainCode {
        &self.chain_code
    }

    pub fn depth(&self) -> u8 {
        self.depth
    }

    pub fn child_index(&self) -> u32 {
        self.child_index
    }

    pub fn public_key(&self) -> PublicKey {
        self.secret.public_key()
    }

    pub fn neuter(&self) -> ExtendedPublicKey {
        ExtendedPublicKey {
            public_key: self.secret.public_key(),
            chain_code: self.chain_code,
            depth: self.depth,
            child_index: self.child_index,
        }
    }

    pub fn derive_child_priv(&self, index: u32) -> Result<Self, KeyError> {
        self.derive_child_priv_with(index, |key, data| hmac_sha512(key, data))
    }

    fn derive_child_priv_with<F>(&self, index: u32, hash: F) -> Result<Self, KeyError>
    where
        F: Fn(&[u8; 32], &[u8]) -> [u8; 64],
    {
        check_index(index)?;
        let depth = self.depth.checked_add(1).ok_or(KeyError::DepthOverflow)?;
        let mut i = hash(&self.chain_code.0, &child_data(&self.public_key(), index));
        let (mut il, chain_code) = split(&i);
        i.zeroize();
        let tweak = parse_scalar(&il);
        il.zeroize();
        let tweak = tweak.ok_or(KeyError::DegenerateChild(index))?;
        let child = tweak + *self.secret.inner().to_nonzero_scalar();
        let child: NonZeroScalar =
            Option::from(NonZeroScalar::new(child)).ok_or(KeyError::DegenerateChild(index))?;
        Ok(ExtendedPrivateKey {
            secret: SecretKey::from_inner(k256::SecretKey::from(child)),
            chain_code,
            depth,
            child_index: index,
        })
    }

    /// Signs a 32-byte digest with this key's scalar.
    pub fn sign_prehash(&self, digest: &[u8; 32]) -> Signature {
        self.secret.sign_prehash(digest)
    }

    pub fn to_bytes(&self) -> [u8; XPRV_LEN] {
        let mut out = [0u8; XPRV_LEN];
        out[0] = XPRV_VERSION;
        out[1] = self.depth;
        out[2..6].copy_from_slice(&self.child_index.to_be_bytes());
        out[6..38].copy_from_slice(&self.chain_code.0);
        out[38..].copy_from_slice(&self.secret.to_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, KeyError> {
        if bytes.len() != XPRV_LEN {
            return Err(KeyError::MalformedKey("length"));
        }
        if bytes[0] != XPRV_VERSION {
            return Err(KeyError::MalformedKey("version"));
        }
        let mut chain = [0u8; 32];
        chain.copy_from_slice(&bytes[6..38]);
        Ok(ExtendedPrivateKey {
            depth: bytes[1],
            child_index: u32::from_be_bytes(bytes[2..6].try_into().expect("4 bytes")),
            chain_code: ChainCode(chain),
            secret: SecretKey::from_bytes(&bytes[38..])
                .map_err(|_| KeyError::MalformedKey("scalar"))?,
        })
    }
}

impl fmt::Debug for ExtendedPrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExtendedPrivateKey")
            .field("public_key", &self.public_key())
            .field("depth", &self.depth)
            .field("child_index", &self.child_index)
            .finish_non_exhaustive()
    }
}

impl Derive for ExtendedPrivateKey {
    fn derive_child(&self, index: u32) -> Result<Self, KeyError> {
        self.derive_child_priv(index)
    }

    fn clone_key(&self) -> Self {
        self.clone()
    }
}

impl ExtendedPublicKey {
    pub fn new(public_key: PublicKey, chain_code: ChainCode, depth: u8, child_index: u32) -> Self {
        ExtendedPublicKey {
            public_key,
            chain_code,
            depth,
            child_index,
        }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public_key
    }

    pub fn chain_code(&self) -> &ChainCode {
        &self.chain_code
    }

    pub fn depth(&self) -> u8 {
        self.depth
    }

    pub fn child_index(&self) -> u32 {
        self.child_index
    }

    pub fn derive_child_pub(&self, index: u32) -> Result<Self, KeyError> {
        self.derive_child_pub_with(index, |key, data| hmac_sha512(key, data))
    }

    fn derive_child_pub_with<F>(&self, index: u32, hash: F) -> Result<Self, KeyError>
    where
        F: Fn(&[u8; 32], &[u8]) -> [u8; 64],
    {
        check_index(index)?;
        let depth = self.depth.checked_add(1).ok_or(KeyError::DepthOverflow)?;
        let i = hash(&self.chain_code.0, &child_data(&self.public_key, index));
        let (il, chain_code) = split(&i);
        let tweak = parse_scalar(&il).ok_or(KeyError::DegenerateChild(index))?;
        let point =
            ProjectivePoint::mul_by_generator(&tweak) + self.public_key.to_point().to_projective();
        if bool::from(point.is_identity()) {
            return Err(KeyError::DegenerateChild(index));
        }
        let point = k256::PublicKey::from_affine(point.to_affine())
            .map_err(|_| KeyError::DegenerateChild(index))?;
        Ok(ExtendedPublicKey {
            public_key: PublicKey::from_point(&point),
            chain_code,
            depth,
            child_index: index,
        })
    }

    /// First index `>= start` whose child is valid, skipping degenerate
    /// indices as the derivation scheme prescribes.
    pub fn next_valid_child(&self, start: u32) -> Result<(u32, Self), KeyError> {
        let mut index = start;
        loop {
            match self.derive_child_pub(index) {
                Ok(child) => return Ok((index, child)),
                Err(KeyError::DegenerateChild(_)) => {
                    index = index
                        .checked_add(1)
                        .ok_or(KeyError::HardenedIndexRejected(index))?;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Verifies a signature made by the private key at `path` below this key.
    pub fn verify_at(
        &self,
        path: &DerivationPath,
        digest: &[u8; 32],
        signature: &Signature,
    ) -> Result<bool, KeyError> {
        Ok(self
            .derive_path(path)?
            .public_key
            .verify_prehash(digest, signature))
    }

    pub fn to_bytes(&self) -> [u8; XPUB_LEN] {
        let mut out = [0u8; XPUB_LEN];
        out[0] = XPUB_VERSION;
        out[1] = self.depth;
        out[2..6].copy_from_slice(&self.child_index.to_be_bytes());
        out[6..38].copy_from_slice(&self.chain_code.0);
        out[38..].copy_from_slice(self.public_key.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, KeyError> {
        if bytes.len() != XPUB_LEN {
            return Err(KeyError::MalformedKey("length"));
        }
        if bytes[0] != XPUB_VERSION {
            return Err(KeyError::MalformedKey("version"));
        }
        let mut chain = [0u8; 32];
        chain.copy_from_slice(&bytes[6..38]);
        Ok(ExtendedPublicKey {
            depth: bytes[1],
            child_index: u32::from_be_bytes(bytes[2..6].try_into().expect("4 bytes")),
            chain_code: ChainCode(chain),
            public_key: PublicKey::from_bytes(&bytes[38..])
                .map_err(|_| KeyError::MalformedKey("point"))?,
        })
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn to_base58check(&self) -> String {
        bs58::encode(self.to_bytes()).with_check().into_string()
    }

    pub fn from_base58check(text: &str) -> Result<Self, KeyError> {
        let raw = bs58::decode(text)
            .with_check(None)
            .into_vec()
            .map_err(|_| KeyError::MalformedKey("base58check"))?;
        Self::from_bytes(&raw)
    }
}

impl fmt::Debug for ExtendedPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ExtendedPublicKey({})", self.to_base58check())
    }
}

impl fmt::Display for ExtendedPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_base58check())
    }
}

impl FromStr for ExtendedPublicKey {
    type Err = KeyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_base58check(s)
    }
}

impl Serialize for ExtendedPublicKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_base58check())
    }
}

impl<'de> Deserialize<'de> for ExtendedPublicKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Derive for ExtendedPublicKey {
    fn derive_child(&self, index: u32) -> Result<Self, KeyError> {
        self.derive_child_pub(index)
    }

    fn clone_key(&self) -> Self {
        *self
    }
}

/// Recovers the parent secret from the parent extended public key and one
/// non-hardened child secret: `k_par = k_child - IL (mod n)`.
///
/// This is the well-known leakage property of non-hardened derivation. It
/// exists so tests can show why child private keys must never leave the
/// signer.
pub fn recover_parent_priv(
    parent: &ExtendedPublicKey,
    child_secret: &SecretKey,
    index: u32,
) -> Result<SecretKey, KeyError> {
    check_index(index)?;
    let i = hmac_sha512(&parent.chain_code.0, &child_data(&parent.public_key, index));
    let (il, _) = split(&i);
    let tweak = parse_scalar(&il).ok_or(KeyError::DegenerateChild(index))?;
    let candidate = *child_secret.inner().to_nonzero_scalar() - tweak;
    let candidate: NonZeroScalar =
        Option::from(NonZeroScalar::new(candidate)).ok_or(KeyError::RecoveryMismatch)?;
    let secret = SecretKey::from_inner(k256::SecretKey::from(candidate));
    if secret.public_key() != parent.public_key {
        return Err(KeyError::RecoveryMismatch);
    }
    Ok(secret)
}

/// `m/i/j` or `m/i/s/j`: at most four non-hardened segments below the master.
#[derive(Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DerivationPath(Vec<u32>);

impl DerivationPath {
    pub fn master() -> Self {
        DerivationPath(Vec::new())
    }

    pub fn new(segments: Vec<u32>) -> Result<Self, KeyError> {
        if segments.len() > MAX_PATH_DEPTH {
            return Err(KeyError::PathTooDeep(segments.len()));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= HARDENED_OFFSET) {
            return Err(KeyError::HardenedIndexRejected(bad));
        }
        Ok(DerivationPath(segments))
    }

    pub fn segments(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Device segment `i`, when present.
    pub fn device_id(&self) -> Option<u32> {
        self.0.first().copied()
    }

    pub fn child(&self, index: u32) -> Result<Self, KeyError> {
        let mut segments = self.0.clone();
        segments.push(index);
        Self::new(segments)
    }

    /// Segments after the first `n`, used to derive from an intermediate key.
    pub fn suffix(&self, n: usize) -> DerivationPath {
        DerivationPath(self.0.get(n..).unwrap_or_default().to_vec())
    }
}

impl fmt::Display for DerivationPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("m")?;
        for s in &self.0 {
            write!(f, "/{s}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for DerivationPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl FromStr for DerivationPath {
    type Err = KeyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split('/');
        if parts.next() != Some("m") {
            return Err(KeyError::MalformedPath(s.to_string()));
        }
        let segments = parts
            .map(|p| {
                if p.ends_with('\'') || p.ends_with('h') {
                    return Err(KeyError::HardenedIndexRejected(HARDENED_OFFSET));
                }
                p.parse::<u32>()
                    .map_err(|_| KeyError::MalformedPath(s.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(segments)
    }
}

impl Serialize for DerivationPath {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for DerivationPath {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
