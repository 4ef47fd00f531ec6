//! Curve primitives shared by every protocol layer: compressed secp256k1
//! points, ECDSA over SHA-256 prehashes, and the ephemeral-ECDH hybrid
//! encryption used for sealed requests and encrypted access responses.

use std::fmt;
use std::str::FromStr;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hkdf::Hkdf;
use k256::ecdsa::signature::hazmat::{PrehashSigner, PrehashVerifier};
use k256::ecdsa::{SigningKey, VerifyingKey};
use k256::elliptic_curve::ops::MulByGenerator;
use k256::elliptic_curve::sec1::ToEncodedPoint;
use k256::ProjectivePoint;
use rand::rngs::OsRng;
use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::b64;

/// Length of a compressed SEC1 point.
pub const PUBLIC_KEY_LEN: usize = 33;
/// Fixed-width `r || s` signature length.
pub const SIGNATURE_LEN: usize = 64;
/// AEAD nonce length for hybrid ciphertexts.
pub const NONCE_LEN: usize = 12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("invalid public key encoding")]
    InvalidPublicKey,
    #[error("invalid secret scalar")]
    InvalidSecretKey,
    #[error("invalid signature encoding")]
    InvalidSignature,
    #[error("decryption failed")]
    DecryptFailed,
}

pub fn sha256(data: &[u8]) -> [u8; 32] {
    Sha256::digest(data).into()
}

/// A validated, non-identity secp256k1 point kept in compressed form.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PublicKey([u8; PUBLIC_KEY_LEN]);

impl PublicKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let parsed =
            k256::PublicKey::from_sec1_bytes(bytes).map_err(|_| CryptoError::InvalidPublicKey)?;
        Ok(Self::from_point(&parsed))
    }

    pub(crate) fn from_point(point: &k256::PublicKey) -> Self {
        let encoded = point.to_encoded_point(true);
        let mut out = [0u8; PUBLIC_KEY_LEN];
        out.copy_from_slice(encoded.as_bytes());
        PublicKey(out)
    }

    pub(crate) fn to_point(self) -> k256::PublicKey {
        // Construction guarantees the bytes decode.
        k256::PublicKey::from_sec1_bytes(&self.0).expect("validated point")
    }

    pub fn as_bytes(&self) -> &[u8; PUBLIC_KEY_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Verifies an ECDSA signature over a 32-byte prehash.
    pub fn verify_prehash(&self, digest: &[u8; 32], signature: &Signature) -> bool {
        let Ok(vk) = VerifyingKey::from_sec1_bytes(&self.0) else {
            return false;
        };
        let Ok(sig) = k256::ecdsa::Signature::from_slice(&signature.0) else {
            return false;
        };
        vk.verify_prehash(digest, &sig).is_ok()
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", self.to_hex())
    }
}

impl fmt::Display for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&b64::encode(&self.0))
    }
}

impl FromStr for PublicKey {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let raw = b64::decode(s).map_err(|_| CryptoError::InvalidPublicKey)?;
        PublicKey::from_bytes(&raw)
    }
}

impl Serialize for PublicKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A secp256k1 secret scalar in `[1, n-1]`.
#[derive(Clone)]
pub struct SecretKey(k256::SecretKey);

impl SecretKey {
    pub fn generate() -> Self {
        SecretKey(k256::SecretKey::random(&mut OsRng))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        k256::SecretKey::from_slice(bytes)
            .map(SecretKey)
            .map_err(|_| CryptoError::InvalidSecretKey)
    }

    pub(crate) fn from_inner(inner: k256::SecretKey) -> Self {
        SecretKey(inner)
    }

    pub(crate) fn inner(&self) -> &k256::SecretKey {
        &self.0
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes().into()
    }

    pub fn public_key(&self) -> PublicKey {
        // Table-based generator multiplication; several times faster than
        // the generic path `k256::SecretKey::public_key` takes.
        let point = ProjectivePoint::mul_by_generator(&*self.0.to_nonzero_scalar());
        PublicKey::from_point(
            &k256::PublicKey::from_affine(point.to_affine()).expect("non-zero scalar"),
        )
    }

    /// Deterministic (RFC 6979) ECDSA over a 32-byte prehash, low-s normalized.
    pub fn sign_prehash(&self, digest: &[u8; 32]) -> Signature {
        let sk = SigningKey::from(&self.0);
        let sig: k256::ecdsa::Signature = sk.sign_prehash(digest).expect("32-byte prehash");
        let sig = sig.normalize_s().unwrap_or(sig);
        let mut out = [0u8; SIGNATURE_LEN];
        out.copy_from_slice(&sig.to_bytes());
        Signature(out)
    }
}

impl PartialEq for SecretKey {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bytes() == other.0.to_bytes()
    }
}

impl Eq for SecretKey {}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

/// ECDSA signature as fixed-width `r || s`.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl Signature {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; SIGNATURE_LEN] = bytes
            .try_into()
            .map_err(|_| CryptoError::InvalidSignature)?;
        Ok(Signature(arr))
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", hex::encode(self.0))
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&b64::encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let raw = b64::decode(&s).map_err(serde::de::Error::custom)?;
        Signature::from_bytes(&raw).map_err(serde::de::Error::custom)
    }
}

/// Output of [`hybrid_encrypt`]: the sender's ephemeral point, the AEAD
/// nonce, and the ciphertext with its 16-byte tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridCiphertext {
    pub ephemeral_pubkey: PublicKey,
    #[serde(with = "b64::fixed12")]
    pub nonce: [u8; NONCE_LEN],
    #[serde(with = "b64::vec")]
    pub ciphertext: Vec<u8>,
}

fn symmetric_key(
    shared_x: &[u8],
    ephemeral: &PublicKey,
    recipient: &PublicKey,
    label: &[u8],
) -> [u8; 32] {
    let mut salt = Vec::with_capacity(2 * PUBLIC_KEY_LEN);
    salt.extend_from_slice(ephemeral.as_bytes());
    salt.extend_from_slice(recipient.as_bytes());
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared_x);
    let mut okm = [0u8; 32];
    hk.expand(label, &mut okm)
        .expect("32 bytes is a valid HKDF length");
    okm
}

/// Ephemeral ECDH on secp256k1, HKDF-SHA-256, ChaCha20-Poly1305.
///
/// `label` separates uses (sealed requests vs. access responses) and is also
/// bound as associated data.
pub fn hybrid_encrypt(recipient: &PublicKey, label: &[u8], plaintext: &[u8]) -> HybridCiphertext {
    let ephemeral = k256::ecdh::EphemeralSecret::random(&mut OsRng);
    let ephemeral_pub = PublicKey::from_point(&ephemeral.public_key());
    let shared = ephemeral.diffie_hellman(&recipient.to_point());
    let key = symmetric_key(
        shared.raw_secret_bytes().as_slice(),
        &ephemeral_pub,
        recipient,
        label,
    );
    let mut nonce = [0u8; NONCE_LEN];
    OsRng.fill_bytes(&mut nonce);
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key));
    let ciphertext = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: plaintext,
                aad: label,
            },
        )
        .expect("chacha20poly1305 encryption is infallible for in-memory buffers");
    HybridCiphertext {
        ephemeral_pubkey: ephemeral_pub,
        nonce,
        ciphertext,
    }
}

pub fn hybrid_decrypt(
    recipient: &SecretKey,
    label: &[u8],
    sealed: &HybridCiphertext,
) -> Result<Vec<u8>, CryptoError> {
    let shared = k256::ecdh::diffie_hellman(
        recipient.inner().to_nonzero_scalar(),
        sealed.ephemeral_pubkey.to_point().as_affine(),
    );
    let key = symmetric_key(
        shared.raw_secret_bytes().as_slice(),
        &sealed.ephemeral_pubkey,
        &recipient.public_key(),
        label,
    );
    let cipher = ChaCha20Poly1305::new(Key::from_slice(&key));
    cipher
        .decrypt(
            Nonce::from_slice(&sealed.nonce),
            Payload {
                msg: &sealed.ciphertext,
                aad: label,
            },
        )
        .map_err(|_| CryptoError::DecryptFailed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_garbage_points_rejected() {
        assert_eq!(
            PublicKey::from_bytes(&[0u8; 33]),
            Err(CryptoError::InvalidPublicKey)
        );
        assert_eq!(
            PublicKey::from_bytes(&[0u8]),
            Err(CryptoError::InvalidPublicKey)
        );
        let mut not_on_curve = [0xffu8; 33];
        not_on_curve[0] = 0x02;
        assert!(PublicKey::from_bytes(&not_on_curve).is_err());
    }

    #[test]
    fn sign_verify_and_wrong_key() {
        let sk = SecretKey::generate();
        let other = SecretKey::generate();
        let digest = sha256(b"hello");
        let sig = sk.sign_prehash(&digest);
        assert!(sk.public_key().verify_prehash(&digest, &sig));
        assert!(!other.public_key().verify_prehash(&digest, &sig));
        assert!(!sk.public_key().verify_prehash(&sha256(b"hellp"), &sig));
        // deterministic nonces
        assert_eq!(sig, sk.sign_prehash(&digest));
    }

    #[test]
    fn hybrid_round_trip_and_tamper() {
        let sk = SecretKey::generate();
        let ct = hybrid_encrypt(&sk.public_key(), b"test", b"payload");
        assert_eq!(hybrid_decrypt(&sk, b"test", &ct).unwrap(), b"payload");
        assert_eq!(
            hybrid_decrypt(&sk, b"other-label", &ct),
            Err(CryptoError::DecryptFailed)
        );
        assert_eq!(
            hybrid_decrypt(&SecretKey::generate(), b"test", &ct),
            Err(CryptoError::DecryptFailed)
        );
        let mut bad = ct.clone();
        bad.ciphertext[0] ^= 1;
        assert_eq!(
            hybrid_decrypt(&sk, b"test", &bad),
            Err(CryptoError::DecryptFailed)
        );
    }

    #[test]
    fn public_key_text_round_trip() {
        let pk = SecretKey::generate().public_key();
        let text = pk.to_string();
        assert_eq!(text.len(), 44);
        assert_eq!(text.parse::<PublicKey>().unwrap(), pk);
    }
}
