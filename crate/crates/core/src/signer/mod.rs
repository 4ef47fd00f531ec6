//! Trusted-device signer: holds the master key encrypted at rest, hands out
//! device keys `m/i`, and signs digests for paths under active devices.
//!
//! The state file is JSON holding Argon2id parameters, a salt and a
//! ChaCha20-Poly1305 ciphertext. The master key only exists in plaintext in
//! memory while the signer is unlocked.

pub mod daemon;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use argon2::{Algorithm, Argon2, Params, Version};
use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use zeroize::{Zeroize, Zeroizing};

use crate::b64;
use crate::crypto::Signature;
use crate::keyhier::{DerivationPath, Derive, ExtendedPrivateKey, ExtendedPublicKey, KeyError};
use crate::vcr::{SignError, SigningOracle};

pub use daemon::{
    serve_stream, ClientError, DaemonHandle, SignerClient, SignerRequest, SignerResponse,
};

const STATE_VERSION: u8 = 1;
const STATE_AAD: &[u8] = b"viceroy/signer-state/v1";
const SALT_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum SignerError {
    #[error("wrong passphrase")]
    WrongPassphrase,
    #[error("signer state already exists at {0}")]
    StateExists(PathBuf),
    #[error("no signer state at {0}")]
    StateMissing(PathBuf),
    #[error("signer is locked")]
    Locked,
    #[error("device {0} is retired")]
    DeviceRetired(u32),
    #[error("signing refused")]
    SignerRefused,
    #[error("malformed path: {0}")]
    MalformedPath(String),
    #[error("refusing to export key material without encryption")]
    PlaintextExportRefused,
    #[error("corrupt signer state: {0}")]
    CorruptState(String),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl SignerError {
    pub fn code(&self) -> &'static str {
        match self {
            SignerError::WrongPassphrase => "WrongPassphrase",
            SignerError::StateExists(_) => "StateExists",
            SignerError::StateMissing(_) => "StateMissing",
            SignerError::Locked => "Locked",
            SignerError::DeviceRetired(_) => "DeviceRetired",
            SignerError::SignerRefused => "SignerRefused",
            SignerError::MalformedPath(_) => "MalformedPath",
            SignerError::PlaintextExportRefused => "PlaintextExportRefused",
            SignerError::CorruptState(_) => "CorruptState",
            SignerError::Key(_) => "KeyError",
            SignerError::Io(_) => "IoError",
        }
    }
}

impl From<SignerError> for SignError {
    fn from(e: SignerError) -> Self {
        match e {
            SignerError::Locked => SignError::Locked,
            SignerError::DeviceRetired(i) => SignError::DeviceRetired(i),
            SignerError::SignerRefused => SignError::Refused,
            SignerError::MalformedPath(m) => SignError::MalformedPath(m),
            other => SignError::Transport(other.to_string()),
        }
    }
}

/// Argon2id cost parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KdfParams {
    pub m_cost_kib: u32,
    pub t_cost: u32,
    pub p_cost: u32,
}

impl Default for KdfParams {
    fn default() -> Self {
        KdfParams {
            m_cost_kib: 64 * 1024,
            t_cost: 3,
            p_cost: 1,
        }
    }
}

impl KdfParams {
    /// Cheap parameters for tests and demos. Not for real keys.
    pub fn fast_insecure() -> Self {
        KdfParams {
            m_cost_kib: 256,
            t_cost: 1,
            p_cost: 1,
        }
    }

    fn derive(&self, passphrase: &[u8], salt: &[u8]) -> Result<Zeroizing<[u8; 32]>, SignerError> {
        let params = Params::new(self.m_cost_kib, self.t_cost, self.p_cost, Some(32))
            .map_err(|e| SignerError::CorruptState(format!("kdf params: {e}")))?;
        let mut out = Zeroizing::new([0u8; 32]);
        Argon2::new(Algorithm::Argon2id, Version::V0x13, params)
            .hash_password_into(passphrase, salt, out.as_mut())
            .map_err(|e| SignerError::CorruptState(format!("kdf: {e}")))?;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceStatus {
    Active,
    Retired,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    version: u8,
    kdf: KdfParams,
    #[serde(with = "b64::vec")]
    salt: Vec<u8>,
    #[serde(with = "b64::fixed12")]
    nonce: [u8; 12],
    #[serde(with = "b64::vec")]
    ciphertext: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct Plaintext {
    master: String,
    devices: BTreeMap<u32, DeviceStatus>,
}

impl Drop for Plaintext {
    fn drop(&mut self) {
        self.master.zeroize();
    }
}

/// What the user is asked to approve.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfirmRequest<'a> {
    pub path: &'a DerivationPath,
    pub digest: &'a [u8; 32],
    /// Caller-supplied description. The signer does not check it against
    /// the digest.
    pub summary: Option<&'a str>,
}

pub type PromptFn = dyn Fn(&ConfirmRequest<'_>) -> bool + Send + Sync;

#[derive(Clone, Default)]
pub enum ConfirmationPolicy {
    #[default]
    AutoApprove,
    Prompt(Arc<PromptFn>),
    DenyAll,
}

impl fmt::Debug for ConfirmationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConfirmationPolicy::AutoApprove => "AutoApprove",
            ConfirmationPolicy::Prompt(_) => "Prompt",
            ConfirmationPolicy::DenyAll => "DenyAll",
        })
    }
}

impl ConfirmationPolicy {
    fn approves(&self, req: &ConfirmRequest<'_>) -> bool {
        match self {
            ConfirmationPolicy::AutoApprove => true,
            ConfirmationPolicy::Prompt(f) => f(req),
            ConfirmationPolicy::DenyAll => false,
        }
    }
}

struct Unlocked {
    master: ExtendedPrivateKey,
    devices: BTreeMap<u32, DeviceStatus>,
    file_key: Zeroizing<[u8; 32]>,
    salt: Vec<u8>,
    kdf: KdfParams,
}

pub struct Signer {
    path: PathBuf,
    policy: ConfirmationPolicy,
    state: Option<Unlocked>,
}

impl fmt::Debug for Signer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Signer")
            .field("path", &self.path)
            .field("policy", &self.policy)
            .field("unlocked", &self.state.is_some())
            .finish()
    }
}

fn seal_state(u: &Unlocked) -> Result<StateFile, SignerError> {
    let plaintext = Plaintext {
        master: hex::encode(u.master.to_bytes()),
        devices: u.devices.clone(),
    };
    let json = Zeroizing::new(serde_json::to_vec(&plaintext).expect("state serializes"));
    let mut nonce = [0u8; 12];
    rand::rngs::OsRng.fill_bytes(&mut nonce);
    let cipher = ChaCha20Poly1305::new(Key::from_slice(u.file_key.as_ref()));
    let ciphertext = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: &json,
                aad: STATE_AAD,
            },
        )
        .expect("encryption of in-memory buffer");
    Ok(StateFile {
        version: STATE_VERSION,
        kdf: u.kdf,
        salt: u.salt.clone(),
        nonce,
        ciphertext,
    })
}

fn write_state(path: &Path, u: &Unlocked) -> Result<(), SignerError> {
    let file = seal_state(u)?;
    let text = serde_json::to_vec_pretty(&file).expect("state file serializes");
    crate::fsutil::write_atomic_private(path, &text)?;
    Ok(())
}

impl Signer {
    /// Creates a new state file from `seed` and returns the signer unlocked.
    pub fn init(
        path: impl Into<PathBuf>,
        passphrase: &str,
        seed: &[u8],
        kdf: KdfParams,
    ) -> Result<Self, SignerError> {
        let path = path.into();
        if path.exists() {
            return Err(SignerError::StateExists(path));
        }
        let master = ExtendedPrivateKey::generate_master(seed)?;
        let mut salt = vec![0u8; SALT_LEN];
        rand::rngs::OsRng.fill_bytes(&mut salt);
        let unlocked = Unlocked {
            file_key: kdf.derive(passphrase.as_bytes(), &salt)?,
            master,
            devices: BTreeMap::new(),
            salt,
            kdf,
        };
        write_state(&path, &unlocked)?;
        Ok(Signer {
            path,
            policy: ConfirmationPolicy::default(),
            state: Some(unlocked),
        })
    }

    /// As [`init`](Self::init) with a fresh random 32-byte seed.
    pub fn init_random(
        path: impl Into<PathBuf>,
        passphrase: &str,
        kdf: KdfParams,
    ) -> Result<Self, SignerError> {
        let mut seed = Zeroizing::new([0u8; 32]);
        rand::rngs::OsRng.fill_bytes(seed.as_mut());
        Self::init(path, passphrase, seed.as_ref(), kdf)
    }

    /// A locked handle on an existing state file.
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, SignerError> {
        let path = path.into();
        if !path.exists() {
            return Err(SignerError::StateMissing(path));
        }
        Ok(Signer {
            path,
            policy: ConfirmationPolicy::default(),
            state: None,
        })
    }

    pub fn unlock(&mut self, passphrase: &str) -> Result<(), SignerError> {
        let text = std::fs::read(&self.path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => SignerError::StateMissing(self.path.clone()),
            _ => SignerError::Io(e),
        })?;
        let file: StateFile =
            serde_json::from_slice(&text).map_err(|e| SignerError::CorruptState(e.to_string()))?;
        if file.version != STATE_VERSION {
            return Err(SignerError::CorruptState(format!(
                "version {}",
                file.version
            )));
        }
        let file_key = file.kdf.derive(passphrase.as_bytes(), &file.salt)?;
        let cipher = ChaCha20Poly1305::new(Key::from_slice(file_key.as_ref()));
        let json = Zeroizing::new(
            cipher
                .decrypt(
                    Nonce::from_slice(&file.nonce),
                    Payload {
                        msg: &file.ciphertext,
                        aad: STATE_AAD,
                    },
                )
                .map_err(|_| SignerError::WrongPassphrase)?,
        );
        let plain: Plaintext =
            serde_json::from_slice(&json).map_err(|e| SignerError::CorruptState(e.to_string()))?;
        let raw = Zeroizing::new(
            hex::decode(&plain.master).map_err(|e| SignerError::CorruptState(e.to_string()))?,
        );
        let master = ExtendedPrivateKey::from_bytes(&raw)?;
        self.state = Some(Unlocked {
            master,
            devices: plain.devices.clone(),
            file_key,
            salt: file.salt,
            kdf: file.kdf,
        });
        Ok(())
    }

    pub fn lock(&mut self) {
        self.state = None;
    }

    pub fn is_unlocked(&self) -> bool {
        self.state.is_some()
    }

    pub fn state_path(&self) -> &Path {
        &self.path
    }

    pub fn set_policy(&mut self, policy: ConfirmationPolicy) {
        self.policy = policy;
    }

    pub fn policy(&self) -> &ConfirmationPolicy {
        &self.policy
    }

    fn unlocked(&self) -> Result<&Unlocked, SignerError> {
        self.state.as_ref().ok_or(SignerError::Locked)
    }

    pub fn devices(&self) -> Result<BTreeMap<u32, DeviceStatus>, SignerError> {
        Ok(self.unlocked()?.devices.clone())
    }

    /// `m/i` for device `i`, recording it as active. Idempotent for an
    /// active device.
    pub fn issue_device_xpub(&mut self, device: u32) -> Result<ExtendedPublicKey, SignerError> {
        let u = self.state.as_mut().ok_or(SignerError::Locked)?;
        if u.devices.get(&device) == Some(&DeviceStatus::Retired) {
            return Err(SignerError::DeviceRetired(device));
        }
        let xpub = u.master.derive_child_priv(device)?.neuter();
        if u.devices.insert(device, DeviceStatus::Active).is_none() {
            write_state(&self.path, u)?;
        }
        Ok(xpub)
    }

    /// Marks `device` retired. Unknown ids are recorded as retired too.
    pub fn retire_device(&mut self, device: u32) -> Result<(), SignerError> {
        let u = self.state.as_mut().ok_or(SignerError::Locked)?;
        if u.devices.insert(device, DeviceStatus::Retired) != Some(DeviceStatus::Retired) {
            write_state(&self.path, u)?;
        }
        Ok(())
    }

    /// Signs `digest` with the key at `path` (`m/i/j` or `m/i/s/j`, or the
    /// scope key `m/i/s`). Only paths under an issued, active device are
    /// signed, and only with the policy's approval.
    pub fn sign_digest(
        &self,
        path: &DerivationPath,
        digest: &[u8; 32],
        summary: Option<&str>,
    ) -> Result<Signature, SignerError> {
        let u = self.unlocked()?;
        if !(2..=3).contains(&path.len()) {
            return Err(SignerError::MalformedPath(format!(
                "{path}: expected m/i/j, m/i/s or m/i/s/j"
            )));
        }
        let device = path.segments()[0];
        match u.devices.get(&device) {
            Some(DeviceStatus::Active) => {}
            Some(DeviceStatus::Retired) => return Err(SignerError::DeviceRetired(device)),
            None => return Err(SignerError::SignerRefused),
        }
        let request = ConfirmRequest {
            path,
            digest,
            summary,
        };
        if !self.policy.approves(&request) {
            return Err(SignerError::SignerRefused);
        }
        Ok(u.master.derive_path(path)?.sign_prehash(digest))
    }

    /// Writes a copy of the state encrypted under `backup_passphrase` with a
    /// fresh salt.
    pub fn export_backup(&self, dest: &Path, backup_passphrase: &str) -> Result<(), SignerError> {
        if backup_passphrase.is_empty() {
            return Err(SignerError::PlaintextExportRefused);
        }
        let u = self.unlocked()?;
        let mut salt = vec![0u8; SALT_LEN];
        rand::rngs::OsRng.fill_bytes(&mut salt);
        let copy = Unlocked {
            master: u.master.clone(),
            devices: u.devices.clone(),
            file_key: u.kdf.derive(backup_passphrase.as_bytes(), &salt)?,
            salt,
            kdf: u.kdf,
        };
        write_state(dest, &copy)
    }
}

impl SigningOracle for Signer {
    fn sign_digest(
        &self,
        path: &DerivationPath,
        digest: &[u8; 32],
        summary: Option<&str>,
    ) -> Result<Signature, SignError> {
        Signer::sign_digest(self, path, digest, summary).map_err(SignError::from)
    }
}
