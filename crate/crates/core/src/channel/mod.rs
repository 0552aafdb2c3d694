//! Authenticated record encryption with per-session keys, established either
//! from a pre-shared secret or by an ephemeral ECDH handshake.

mod bench;
mod duplex;
mod handshake;

use std::collections::HashMap;
use std::fmt;

use aes_gcm::aead::AeadInPlace;
use aes_gcm::{Aes256Gcm, KeyInit, Nonce, Tag};
use hkdf::Hkdf;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

pub use bench::{bench_modes, BenchReport, ModeBench};
pub use duplex::{duplex_pair, DuplexEnd};
pub use handshake::{handshake, Role};

pub const MAGIC: &[u8; 4] = b"EPPS";
pub const VERSION: u8 = 1;
pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;
/// Bytes of the session id that prefix every nonce; the remaining eight
/// carry the record sequence number.
pub const SESSION_TAG_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("key confirmation failed")]
    ConfirmFailure,
    #[error("transport closed")]
    TransportClosed,
    #[error("transport: {0}")]
    Io(String),
    #[error("sequence {got} does not follow {last}")]
    SeqReplay { last: u64, got: u64 },
    /// Covers tampering and wrong keys alike.
    #[error("record authentication failed")]
    AuthFailure,
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("invalid key material: {0}")]
    BadKey(String),
}

impl From<std::io::Error> for ChannelError {
    fn from(e: std::io::Error) -> Self {
        match e.kind() {
            std::io::ErrorKind::UnexpectedEof
            | std::io::ErrorKind::BrokenPipe
            | std::io::ErrorKind::ConnectionReset
            | std::io::ErrorKind::ConnectionAborted => ChannelError::TransportClosed,
            _ => ChannelError::Io(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KeyMode {
    PreShared,
    Ecdh,
}

impl fmt::Display for KeyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeyMode::PreShared => "preshared",
            KeyMode::Ecdh => "ecdh",
        })
    }
}

impl std::str::FromStr for KeyMode {
    type Err = ChannelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "preshared" | "pre-shared" | "psk" => Ok(KeyMode::PreShared),
            "ecdh" => Ok(KeyMode::Ecdh),
            other => Err(ChannelError::BadKey(format!("unknown key mode `{other}`"))),
        }
    }
}

/// A 256-bit session key. Not serializable; `Debug` redacts the key.
#[derive(Clone)]
pub struct SessionKey {
    key: [u8; 32],
    session_id: [u8; 16],
    mode: KeyMode,
    last_sealed: Option<u64>,
}

impl fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionKey")
            .field("session_id", &hex::encode(self.session_id))
            .field("mode", &self.mode)
            .finish_non_exhaustive()
    }
}

impl Drop for SessionKey {
    fn drop(&mut self) {
        // Best effort; the optimiser may elide this.
        self.key.iter_mut().for_each(|b| *b = 0);
    }
}

impl SessionKey {
    pub(crate) fn from_parts(key: [u8; 32], session_id: [u8; 16], mode: KeyMode) -> Self {
        Self { key, session_id, mode, last_sealed: None }
    }

    /// Per-session key derived from a 64-hex-character pre-shared secret.
    pub fn preshared(psk_hex: &str, session_id: [u8; 16]) -> Result<Self, ChannelError> {
        let psk = parse_psk(psk_hex)?;
        let hk = Hkdf::<Sha256>::new(Some(&session_id), &psk);
        let mut key = [0u8; 32];
        hk.expand(b"ecgpps psk session key", &mut key).expect("32 bytes is a valid HKDF length");
        Ok(Self::from_parts(key, session_id, KeyMode::PreShared))
    }

    /// Fresh random session id, then [`SessionKey::preshared`].
    pub fn new_preshared(psk_hex: &str) -> Result<Self, ChannelError> {
        let mut id = [0u8; 16];
        rand::thread_rng().fill_bytes(&mut id);
        Self::preshared(psk_hex, id)
    }

    pub fn session_id(&self) -> [u8; 16] {
        self.session_id
    }

    pub fn session_tag(&self) -> [u8; SESSION_TAG_LEN] {
        self.session_id[..SESSION_TAG_LEN].try_into().unwrap()
    }

    pub fn mode(&self) -> KeyMode {
        self.mode
    }

    pub fn last_sealed(&self) -> Option<u64> {
        self.last_sealed
    }

    /// Whether two keys hold identical secret bytes (constant time).
    pub fn same_secret(&self, other: &SessionKey) -> bool {
        self.key.iter().zip(&other.key).fold(0u8, |acc, (a, b)| acc | (a ^ b)) == 0
    }

    pub fn nonce_for(&self, seq: u64) -> [u8; NONCE_LEN] {
        let mut n = [0u8; NONCE_LEN];
        n[..SESSION_TAG_LEN].copy_from_slice(&self.session_tag());
        n[SESSION_TAG_LEN..].copy_from_slice(&seq.to_le_bytes());
        n
    }

    fn cipher(&self) -> Aes256Gcm {
        Aes256Gcm::new_from_slice(&self.key).expect("32-byte key")
    }
}

fn parse_psk(psk_hex: &str) -> Result<[u8; 32], ChannelError> {
    let trimmed = psk_hex.trim();
    if trimmed.len() != 64 {
        return Err(ChannelError::BadKey(format!("pre-shared key must be 64 hex characters, got {}", trimmed.len())));
    }
    let mut out = [0u8; 32];
    hex::decode_to_slice(trimmed, &mut out).map_err(|e| ChannelError::BadKey(e.to_string()))?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RecordKind {
    RawFrame = 0,
    Segment = 1,
    Pulse = 2,
    AnalysisInput = 3,
}

impl RecordKind {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(RecordKind::RawFrame),
            1 => Some(RecordKind::Segment),
            2 => Some(RecordKind::Pulse),
            3 => Some(RecordKind::AnalysisInput),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordHeader {
    pub patient_id: String,
    pub timestamp_ms: u64,
    pub seq: u64,
    pub kind: RecordKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CipherRecord {
    pub kind: RecordKind,
    pub patient_id: String,
    pub timestamp_ms: u64,
    pub seq: u64,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

impl CipherRecord {
    pub fn header(&self) -> RecordHeader {
        RecordHeader {
            patient_id: self.patient_id.clone(),
            timestamp_ms: self.timestamp_ms,
            seq: self.seq,
            kind: self.kind,
        }
    }

    pub fn session_tag(&self) -> [u8; SESSION_TAG_LEN] {
        self.nonce[..SESSION_TAG_LEN].try_into().unwrap()
    }

    /// Everything before the ciphertext length; authenticated as associated data.
    pub fn associated_data(&self) -> Vec<u8> {
        let pid = self.patient_id.as_bytes();
        let mut out = Vec::with_capacity(4 + 1 + 1 + 2 + pid.len() + 8 + 8 + NONCE_LEN);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.kind as u8);
        out.extend_from_slice(&(pid.len() as u16).to_le_bytes());
        out.extend_from_slice(pid);
        out.extend_from_slice(&self.timestamp_ms.to_le_bytes());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&self.nonce);
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.associated_data();
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.tag);
        out
    }

    pub fn encoded_len(&self) -> usize {
        4 + 1 + 1 + 2 + self.patient_id.len() + 8 + 8 + NONCE_LEN + 4 + self.ciphertext.len() + TAG_LEN
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ChannelError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ChannelError::Malformed("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            return Err(ChannelError::Malformed(format!("unsupported version {version}")));
        }
        let kind_byte = r.take(1)?[0];
        let kind =
            RecordKind::from_u8(kind_byte).ok_or_else(|| ChannelError::Malformed(format!("unknown kind {kind_byte}")))?;
        let pid_len = u16::from_le_bytes(r.array()?) as usize;
        let patient_id = String::from_utf8(r.take(pid_len)?.to_vec())
            .map_err(|_| ChannelError::Malformed("patient id is not UTF-8".into()))?;
        let timestamp_ms = u64::from_le_bytes(r.array()?);
        let seq = u64::from_le_bytes(r.array()?);
        let nonce = r.array()?;
        let ct_len = u32::from_le_bytes(r.array()?) as usize;
        let ciphertext = r.take(ct_len)?.to_vec();
        let tag = r.array()?;
        if r.pos != bytes.len() {
            return Err(ChannelError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { kind, patient_id, timestamp_ms, seq, nonce, ciphertext, tag })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ChannelError> {
        if self.bytes.len() - self.pos < n {
            return Err(ChannelError::Malformed("truncated record".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ChannelError> {
        Ok(self.take(N)?.try_into().unwrap())
    }
}

/// Encrypt `plaintext` under the session key. `header.seq` must exceed every
/// sequence number previously sealed with this key.
pub fn seal(key: &mut SessionKey, header: &RecordHeader, plaintext: &[u8]) -> Result<CipherRecord, ChannelError> {
    if let Some(last) = key.last_sealed {
        if header.seq <= last {
            return Err(ChannelError::SeqReplay { last, got: header.seq });
        }
    }
    if header.patient_id.len() > u16::MAX as usize {
        return Err(ChannelError::Malformed("patient id too long".into()));
    }
    if plaintext.len() > u32::MAX as usize {
        return Err(ChannelError::Malformed("payload too long".into()));
    }
    let mut record = CipherRecord {
        kind: header.kind,
        patient_id: header.patient_id.clone(),
        timestamp_ms: header.timestamp_ms,
        seq: header.seq,
        nonce: key.nonce_for(header.seq),
        ciphertext: plaintext.to_vec(),
        tag: [0; TAG_LEN],
    };
    let aad = record.associated_data();
    let tag = key
        .cipher()
        .encrypt_in_place_detached(&Nonce::from(record.nonce), &aad, &mut record.ciphertext)
        .map_err(|_| ChannelError::Malformed("encryption failed".into()))?;
    record.tag.copy_from_slice(&tag);
    key.last_sealed = Some(header.seq);
    Ok(record)
}

pub fn open(key: &SessionKey, record: &CipherRecord) -> Result<Vec<u8>, ChannelError> {
    let aad = record.associated_data();
    let mut buf = record.ciphertext.clone();
    key.cipher()
        .decrypt_in_place_detached(&Nonce::from(record.nonce), &aad, &mut buf, &Tag::from(record.tag))
        .map_err(|_| ChannelError::AuthFailure)?;
    Ok(buf)
}

/// In-memory session keys indexed by the session tag carried in each nonce.
#[derive(Debug, Default)]
pub struct KeyRing {
    keys: HashMap<[u8; SESSION_TAG_LEN], SessionKey>,
}

impl KeyRing {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false (and keeps the existing key) on a tag collision.
    pub fn insert(&mut self, key: SessionKey) -> bool {
        let tag = key.session_tag();
        if self.keys.contains_key(&tag) {
            return false;
        }
        self.keys.insert(tag, key);
        true
    }

    pub fn get(&self, tag: &[u8; SESSION_TAG_LEN]) -> Option<&SessionKey> {
        self.keys.get(tag)
    }

    pub fn remove(&mut self, tag: &[u8; SESSION_TAG_LEN]) -> Option<SessionKey> {
        self.keys.remove(tag)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Open a record with whichever session key its nonce names.
    pub fn open(&self, record: &CipherRecord) -> Result<Vec<u8>, ChannelError> {
        let key = self.get(&record.session_tag()).ok_or(ChannelError::AuthFailure)?;
        open(key, record)
    }
}
