//! Message encodings.
//!
//! Two independent forms exist for every protocol message:
//!
//! * **Canonical bytes**: a domain-tagged, length-prefixed big-endian layout.
//!   This is the only form that is ever hashed or signed.
//! * **JSON wire text** in one of two [`WireMode`]s. `Verbose` uses the full
//!   field names, RFC 3339 timestamps and absolute history URLs. `Optimized`
//!   replaces every field name with a single letter from [`KEY_DICTIONARY`],
//!   keeps unix-second integers, and stores history entries as URL paths.
//!   Both decode to the same value.

use std::collections::HashMap;
use std::sync::OnceLock;

use chrono::{DateTime, SecondsFormat};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::crypto::{PublicKey, Signature, PUBLIC_KEY_LEN, SIGNATURE_LEN};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodingError {
    #[error("field `{field}` is {len} long, limit is {max}")]
    UnencodableField {
        field: &'static str,
        len: usize,
        max: usize,
    },
    #[error("input truncated")]
    Truncated,
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
    #[error("unexpected message domain")]
    BadDomain,
    #[error("invalid value for `{0}`")]
    InvalidField(&'static str),
    #[error("json: {0}")]
    Json(String),
}

/// The exact byte string that gets hashed and signed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CanonicalBytes(pub Vec<u8>);

impl CanonicalBytes {
    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn digest(&self) -> [u8; 32] {
        crate::crypto::sha256(&self.0)
    }
}

#[derive(Default)]
pub struct CanonicalWriter {
    buf: Vec<u8>,
}

impl CanonicalWriter {
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }

    /// Fixed-width field; the width is implied by the message type.
    pub fn fixed(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn bytes(
        &mut self,
        field: &'static str,
        v: &[u8],
        max: usize,
    ) -> Result<(), EncodingError> {
        if v.len() > max {
            return Err(EncodingError::UnencodableField {
                field,
                len: v.len(),
                max,
            });
        }
        self.u32(v.len() as u32);
        self.fixed(v);
        Ok(())
    }

    pub fn str(&mut self, field: &'static str, v: &str, max: usize) -> Result<(), EncodingError> {
        self.bytes(field, v.as_bytes(), max)
    }

    pub fn count(
        &mut self,
        field: &'static str,
        n: usize,
        max: usize,
    ) -> Result<(), EncodingError> {
        if n > max {
            return Err(EncodingError::UnencodableField { field, len: n, max });
        }
        self.u32(n as u32);
        Ok(())
    }

    pub fn public_key(&mut self, pk: &PublicKey) {
        self.fixed(pk.as_bytes());
    }

    pub fn signature(&mut self, sig: &Signature) {
        self.fixed(&sig.0);
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub struct CanonicalReader<'a> {
    buf: &'a [u8],
}

impl<'a> CanonicalReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        CanonicalReader { buf }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], EncodingError> {
        if self.buf.len() < n {
            return Err(EncodingError::Truncated);
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    pub fn u8(&mut self) -> Result<u8, EncodingError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, EncodingError> {
        Ok(u32::from_be_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64, EncodingError> {
        Ok(u64::from_be_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn bool(&mut self, field: &'static str) -> Result<bool, EncodingError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(EncodingError::InvalidField(field)),
        }
    }

    pub fn fixed<const N: usize>(&mut self) -> Result<[u8; N], EncodingError> {
        Ok(self.take(N)?.try_into().expect("N bytes"))
    }

    pub fn bytes(&mut self, field: &'static str, max: usize) -> Result<&'a [u8], EncodingError> {
        let len = self.u32()? as usize;
        if len > max {
            return Err(EncodingError::UnencodableField { field, len, max });
        }
        self.take(len)
    }

    pub fn str(&mut self, field: &'static str, max: usize) -> Result<String, EncodingError> {
        let raw = self.bytes(field, max)?;
        String::from_utf8(raw.to_vec()).map_err(|_| EncodingError::InvalidField(field))
    }

    pub fn count(&mut self, field: &'static str, max: usize) -> Result<usize, EncodingError> {
        let n = self.u32()? as usize;
        if n > max {
            return Err(EncodingError::UnencodableField { field, len: n, max });
        }
        Ok(n)
    }

    pub fn public_key(&mut self, field: &'static str) -> Result<PublicKey, EncodingError> {
        let raw: [u8; PUBLIC_KEY_LEN] = self.fixed()?;
        PublicKey::from_bytes(&raw).map_err(|_| EncodingError::InvalidField(field))
    }

    pub fn signature(&mut self) -> Result<Signature, EncodingError> {
        Ok(Signature(self.fixed::<SIGNATURE_LEN>()?))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len()
    }
}

/// A message with a canonical byte form.
///
/// Every message type has a distinct domain label, written first, so bytes
/// of one type never parse as another.
pub trait Canonical: Sized {
    const DOMAIN: &'static str;

    fn write_fields(&self, w: &mut CanonicalWriter) -> Result<(), EncodingError>;

    fn read_fields(r: &mut CanonicalReader<'_>) -> Result<Self, EncodingError>;
}

pub fn encode_canonical<T: Canonical>(message: &T) -> Result<CanonicalBytes, EncodingError> {
    let mut w = CanonicalWriter::default();
    w.str("domain", T::DOMAIN, 64)?;
    message.write_fields(&mut w)?;
    Ok(CanonicalBytes(w.into_bytes()))
}

pub fn decode_canonical<T: Canonical>(bytes: &[u8]) -> Result<T, EncodingError> {
    let mut r = CanonicalReader::new(bytes);
    if r.bytes("domain", 64)? != T::DOMAIN.as_bytes() {
        return Err(EncodingError::BadDomain);
    }
    let value = T::read_fields(&mut r)?;
    match r.remaining() {
        0 => Ok(value),
        n => Err(EncodingError::TrailingBytes(n)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireMode {
    Verbose,
    Optimized,
}

/// Long field name to single-letter wire key. Must stay a bijection.
pub const KEY_DICTIONARY: &[(&str, &str)] = &[
    ("version", "z"),
    ("client_id", "c"),
    ("cookie_name", "k"),
    ("cookie_value", "u"),
    ("vcr_keys", "v"),
    ("issued_at", "i"),
    ("server_key_id", "d"),
    ("signature", "g"),
    ("wrappers", "w"),
    ("wrapper", "D"),
    ("action", "a"),
    ("kind", "y"),
    ("response_key", "r"),
    ("changes", "m"),
    ("field", "f"),
    ("old_value", "o"),
    ("new_value", "x"),
    ("timestamp", "t"),
    ("unified", "q"),
    ("scope_key", "Q"),
    ("session_indices", "J"),
    ("signer_paths", "p"),
    ("signatures", "s"),
    ("ephemeral_pubkey", "e"),
    ("nonce", "n"),
    ("ciphertext", "b"),
    ("records", "R"),
    ("encrypted", "E"),
    ("status", "S"),
    ("affected", "A"),
    ("error", "X"),
    ("wrapper_endpoint", "W"),
    ("vcr_endpoint", "V"),
    ("server_pubkey", "P"),
    ("server_origin", "O"),
    ("endpoints", "N"),
    ("path", "l"),
    ("history", "h"),
    ("visited_at", "T"),
    ("url", "U"),
    ("created_at", "C"),
    ("device_xpub", "K"),
    ("next_j", "j"),
    ("server_ids", "I"),
    ("server_counters", "Z"),
    ("sessions", "L"),
    ("retired", "F"),
    ("visits", "H"),
    ("attributes", "B"),
];

/// Fields holding unix seconds; rendered as RFC 3339 in verbose mode.
const TIMESTAMP_FIELDS: &[&str] = &["issued_at", "timestamp", "created_at", "visited_at"];

/// Fields whose values are maps with caller-chosen keys; those keys are
/// never rewritten.
const DYNAMIC_MAP_FIELDS: &[&str] = &["attributes", "server_ids", "server_counters"];

struct Dictionary {
    short: HashMap<&'static str, &'static str>,
    long: HashMap<&'static str, &'static str>,
}

fn dictionary() -> &'static Dictionary {
    static DICT: OnceLock<Dictionary> = OnceLock::new();
    DICT.get_or_init(|| Dictionary {
        short: KEY_DICTIONARY.iter().copied().collect(),
        long: KEY_DICTIONARY.iter().map(|&(l, s)| (s, l)).collect(),
    })
}

pub fn short_key(long: &str) -> Option<&'static str> {
    dictionary().short.get(long).copied()
}

pub fn long_key(short: &str) -> Option<&'static str> {
    dictionary().long.get(short).copied()
}

fn rename_keys(value: &mut Value, to_short: bool) {
    match value {
        Value::Object(map) => {
            let old = std::mem::take(map);
            for (key, mut child) in old {
                let long_name = if to_short {
                    key.as_str()
                } else {
                    long_key(&key).unwrap_or(key.as_str())
                };
                if !DYNAMIC_MAP_FIELDS.contains(&long_name) {
                    rename_keys(&mut child, to_short);
                }
                let new_key = if to_short {
                    short_key(&key).map(str::to_string).unwrap_or(key)
                } else {
                    long_name.to_string()
                };
                map.insert(new_key, child);
            }
        }
        Value::Array(items) => items.iter_mut().for_each(|v| rename_keys(v, to_short)),
        _ => {}
    }
}

fn expand_verbose(value: &mut Value) {
    match value {
        Value::Object(map) => {
            expand_history_urls(map);
            for (key, child) in map.iter_mut() {
                if DYNAMIC_MAP_FIELDS.contains(&key.as_str()) {
                    continue;
                }
                if TIMESTAMP_FIELDS.contains(&key.as_str()) {
                    if let Some(secs) = child.as_u64() {
                        *child = Value::String(rfc3339(secs));
                        continue;
                    }
                }
                expand_verbose(child);
            }
        }
        Value::Array(items) => items.iter_mut().for_each(expand_verbose),
        _ => {}
    }
}

fn contract_verbose(value: &mut Value) -> Result<(), EncodingError> {
    match value {
        Value::Object(map) => {
            for (key, child) in map.iter_mut() {
                if DYNAMIC_MAP_FIELDS.contains(&key.as_str()) {
                    continue;
                }
                if TIMESTAMP_FIELDS.contains(&key.as_str()) {
                    if let Some(text) = child.as_str() {
                        *child = Value::from(parse_rfc3339(text)?);
                        continue;
                    }
                }
                contract_verbose(child)?;
            }
            contract_history_urls(map);
        }
        Value::Array(items) => {
            for v in items.iter_mut() {
                contract_verbose(v)?;
            }
        }
        _ => {}
    }
    Ok(())
}

/// Session records keep history as URL paths; verbose mode shows the
/// absolute URL by prefixing the record's origin.
fn expand_history_urls(map: &mut Map<String, Value>) {
    let Some(origin) = map.get("server_origin").and_then(Value::as_str) else {
        return;
    };
    let origin = origin.trim_end_matches('/').to_string();
    if let Some(Value::Array(entries)) = map.get_mut("history") {
        for entry in entries {
            if let Some(Value::String(url)) = entry.get_mut("url") {
                if url.starts_with('/') {
                    *url = format!("{origin}{url}");
                }
            }
        }
    }
}

fn contract_history_urls(map: &mut Map<String, Value>) {
    let Some(origin) = map.get("server_origin").and_then(Value::as_str) else {
        return;
    };
    let origin = origin.trim_end_matches('/').to_string();
    if let Some(Value::Array(entries)) = map.get_mut("history") {
        for entry in entries {
            if let Some(Value::String(url)) = entry.get_mut("url") {
                if let Some(path) = url.strip_prefix(origin.as_str()) {
                    if path.starts_with('/') {
                        *url = path.to_string();
                    }
                }
            }
        }
    }
}

fn rfc3339(secs: u64) -> String {
    i64::try_from(secs)
        .ok()
        .and_then(|s| DateTime::from_timestamp(s, 0))
        .map(|dt| dt.to_rfc3339_opts(SecondsFormat::Secs, true))
        .unwrap_or_else(|| secs.to_string())
}

fn parse_rfc3339(text: &str) -> Result<u64, EncodingError> {
    if let Ok(secs) = text.parse::<u64>() {
        return Ok(secs);
    }
    let dt =
        DateTime::parse_from_rfc3339(text).map_err(|_| EncodingError::InvalidField("timestamp"))?;
    u64::try_from(dt.timestamp()).map_err(|_| EncodingError::InvalidField("timestamp"))
}

/// Serializes a message as JSON text in the given mode.
pub fn to_wire<T: Serialize>(message: &T, mode: WireMode) -> String {
    let mut value = serde_json::to_value(message).expect("protocol messages serialize to JSON");
    match mode {
        WireMode::Verbose => expand_verbose(&mut value),
        WireMode::Optimized => rename_keys(&mut value, true),
    }
    value.to_string()
}

pub fn from_wire<T: DeserializeOwned>(text: &str, mode: WireMode) -> Result<T, EncodingError> {
    let mut value: Value =
        serde_json::from_str(text).map_err(|e| EncodingError::Json(e.to_string()))?;
    match mode {
        WireMode::Verbose => contract_verbose(&mut value)?,
        WireMode::Optimized => rename_keys(&mut value, false),
    }
    serde_json::from_value(value).map_err(|e| EncodingError::Json(e.to_string()))
}

pub fn from_wire_bytes<T: DeserializeOwned>(
    bytes: &[u8],
    mode: WireMode,
) -> Result<T, EncodingError> {
    let text = std::str::from_utf8(bytes).map_err(|e| EncodingError::Json(e.to_string()))?;
    from_wire(text, mode)
}

/// Length in bytes of [`to_wire`] output.
pub fn byte_size<T: Serialize>(message: &T, mode: WireMode) -> usize {
    to_wire(message, mode).len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use std::collections::{BTreeMap, HashSet};

    #[test]
    fn dictionary_is_a_bijection_of_single_letters() {
        let longs: HashSet<_> = KEY_DICTIONARY.iter().map(|(l, _)| *l).collect();
        let shorts: HashSet<_> = KEY_DICTIONARY.iter().map(|(_, s)| *s).collect();
        assert_eq!(longs.len(), KEY_DICTIONARY.len());
        assert_eq!(shorts.len(), KEY_DICTIONARY.len());
        for s in shorts {
            assert_eq!(s.chars().count(), 1);
            assert!(s.chars().all(|c| c.is_ascii_alphabetic()));
        }
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Sample {
        version: u8,
        issued_at: u64,
        attributes: BTreeMap<String, String>,
    }

    #[test]
    fn dynamic_map_keys_survive_renaming() {
        let mut attributes = BTreeMap::new();
        attributes.insert("version".to_string(), "x".to_string());
        attributes.insert("z".to_string(), "y".to_string());
        let s = Sample {
            version: 1,
            issued_at: 1_700_000_000,
            attributes,
        };
        for mode in [WireMode::Verbose, WireMode::Optimized] {
            let text = to_wire(&s, mode);
            assert_eq!(from_wire::<Sample>(&text, mode).unwrap(), s, "{text}");
        }
        assert_eq!(
            to_wire(&s, WireMode::Optimized),
            r#"{"z":1,"i":1700000000,"B":{"version":"x","z":"y"}}"#
        );
        assert_eq!(
            to_wire(&s, WireMode::Verbose),
            r#"{"version":1,"issued_at":"2023-11-14T22:13:20Z","attributes":{"version":"x","z":"y"}}"#
        );
    }

    #[test]
    fn truncation_and_trailing_bytes_detected() {
        struct Two(u32, u64);
        impl Canonical for Two {
            const DOMAIN: &'static str = "test/two";
            fn write_fields(&self, w: &mut CanonicalWriter) -> Result<(), EncodingError> {
                w.u32(self.0);
                w.u64(self.1);
                Ok(())
            }
            fn read_fields(r: &mut CanonicalReader<'_>) -> Result<Self, EncodingError> {
                Ok(Two(r.u32()?, r.u64()?))
            }
        }
        let bytes = encode_canonical(&Two(1, 2)).unwrap().0;
        assert_eq!(
            decode_canonical::<Two>(&bytes[..bytes.len() - 1]).err(),
            Some(EncodingError::Truncated)
        );
        let mut long = bytes.clone();
        long.push(0);
        assert_eq!(
            decode_canonical::<Two>(&long).err(),
            Some(EncodingError::TrailingBytes(1))
        );
        let mut w = CanonicalWriter::default();
        assert!(matches!(
            w.str("name", "abcdef", 3),
            Err(EncodingError::UnencodableField { len: 6, max: 3, .. })
        ));
    }
}
