//! Agent to gateway link.
//!
//! The agent opens with a [`Hello`]; the gateway answers with an [`Ack`]
//! carrying the session base timestamp. In ECDH mode both sides then run
//! the channel handshake (agent as initiator). After that the agent sends
//! `u32 LE length | CipherRecord` frames; a zero length ends the session.

use std::io::{Read, Write};

use ecgpps_core::channel::{ChannelError, CipherRecord, KeyMode};
use ecgpps_core::signal::Calibration;
use thiserror::Error;

pub const HELLO_MAGIC: &[u8; 4] = b"EPAG";
pub const ACK_MAGIC: &[u8; 4] = b"EPGW";
pub const LINK_VERSION: u8 = 1;
pub const MAX_PATIENT_ID: usize = 128;
const MAX_FRAME: u32 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinkError {
    #[error("connection closed")]
    Closed,
    #[error("io: {0}")]
    Io(String),
    #[error("malformed link message: {0}")]
    Malformed(String),
    #[error("gateway rejected the session: {0:?}")]
    Rejected(AckStatus),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

impl From<std::io::Error> for LinkError {
    fn from(e: std::io::Error) -> Self {
        match e.kind() {
            std::io::ErrorKind::UnexpectedEof
            | std::io::ErrorKind::BrokenPipe
            | std::io::ErrorKind::ConnectionReset
            | std::io::ErrorKind::ConnectionAborted => LinkError::Closed,
            _ => LinkError::Io(e.to_string()),
        }
    }
}

/// Session parameters announced by the agent. Not authenticated; records
/// carry the patient id in their associated data and are checked against it.
#[derive(Debug, Clone, PartialEq)]
pub struct Hello {
    pub mode: KeyMode,
    /// Chosen by the agent in pre-shared mode; ignored (zero) for ECDH.
    pub session_id: [u8; 16],
    pub patient_id: String,
    pub fs: f64,
    pub calibration: Calibration,
}

impl Hello {
    pub fn validate(&self) -> Result<(), LinkError> {
        if self.patient_id.is_empty() || self.patient_id.len() > MAX_PATIENT_ID {
            return Err(LinkError::Malformed(format!("patient id must be 1..={MAX_PATIENT_ID} bytes")));
        }
        if !(self.fs > 0.0 && self.fs <= 10_000.0) {
            return Err(LinkError::Malformed(format!("sampling rate {} Hz out of range", self.fs)));
        }
        if !(self.calibration.gain.is_finite() && self.calibration.gain != 0.0 && self.calibration.offset.is_finite()) {
            return Err(LinkError::Malformed("invalid calibration".into()));
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), LinkError> {
        let pid = self.patient_id.as_bytes();
        let mut buf = Vec::with_capacity(48 + pid.len());
        buf.extend_from_slice(HELLO_MAGIC);
        buf.push(LINK_VERSION);
        buf.push(match self.mode {
            KeyMode::PreShared => 0,
            KeyMode::Ecdh => 1,
        });
        buf.extend_from_slice(&self.session_id);
        buf.extend_from_slice(&self.fs.to_le_bytes());
        buf.extend_from_slice(&self.calibration.gain.to_le_bytes());
        buf.extend_from_slice(&self.calibration.offset.to_le_bytes());
        buf.extend_from_slice(&(pid.len() as u16).to_le_bytes());
        buf.extend_from_slice(pid);
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, LinkError> {
        let mut head = [0u8; 4 + 1 + 1 + 16 + 24 + 2];
        r.read_exact(&mut head)?;
        if &head[..4] != HELLO_MAGIC {
            return Err(LinkError::Malformed("bad hello magic".into()));
        }
        if head[4] != LINK_VERSION {
            return Err(LinkError::Malformed(format!("unsupported link version {}", head[4])));
        }
        let mode = match head[5] {
            0 => KeyMode::PreShared,
            1 => KeyMode::Ecdh,
            m => return Err(LinkError::Malformed(format!("unknown key mode {m}"))),
        };
        let session_id: [u8; 16] = head[6..22].try_into().unwrap();
        let f = |i: usize| f64::from_le_bytes(head[i..i + 8].try_into().unwrap());
        let (fs, gain, offset) = (f(22), f(30), f(38));
        let pid_len = u16::from_le_bytes([head[46], head[47]]) as usize;
        if pid_len > MAX_PATIENT_ID {
            return Err(LinkError::Malformed("patient id too long".into()));
        }
        let mut pid = vec![0u8; pid_len];
        r.read_exact(&mut pid)?;
        let patient_id = String::from_utf8(pid).map_err(|_| LinkError::Malformed("patient id is not UTF-8".into()))?;
        let hello = Hello { mode, session_id, patient_id, fs, calibration: Calibration { gain, offset } };
        hello.validate()?;
        Ok(hello)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckStatus {
    Accepted,
    ModeMismatch,
    DuplicateSession,
    Invalid,
}

impl AckStatus {
    fn to_u8(self) -> u8 {
        match self {
            AckStatus::Accepted => 0,
            AckStatus::ModeMismatch => 1,
            AckStatus::DuplicateSession => 2,
            AckStatus::Invalid => 3,
        }
    }

    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => AckStatus::Accepted,
            1 => AckStatus::ModeMismatch,
            2 => AckStatus::DuplicateSession,
            3 => AckStatus::Invalid,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ack {
    pub status: AckStatus,
    /// Gateway wall clock at session start, ms since the Unix epoch. Record
    /// timestamps are this base plus the sample time.
    pub base_ms: u64,
}

impl Ack {
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), LinkError> {
        let mut buf = [0u8; 13];
        buf[..4].copy_from_slice(ACK_MAGIC);
        buf[4] = self.status.to_u8();
        buf[5..].copy_from_slice(&self.base_ms.to_le_bytes());
        w.write_all(&buf)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, LinkError> {
        let mut buf = [0u8; 13];
        r.read_exact(&mut buf)?;
        if &buf[..4] != ACK_MAGIC {
            return Err(LinkError::Malformed("bad ack magic".into()));
        }
        let status = AckStatus::from_u8(buf[4]).ok_or_else(|| LinkError::Malformed("unknown ack status".into()))?;
        Ok(Ack { status, base_ms: u64::from_le_bytes(buf[5..].try_into().unwrap()) })
    }
}

pub fn write_record(w: &mut impl Write, record: &CipherRecord) -> Result<(), LinkError> {
    let bytes = record.to_bytes();
    let mut buf = Vec::with_capacity(4 + bytes.len());
    buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&bytes);
    w.write_all(&buf)?;
    Ok(())
}

pub fn write_end(w: &mut impl Write) -> Result<(), LinkError> {
    w.write_all(&0u32.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

/// Raw record frame; `None` on a clean end of session.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>, LinkError> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len);
    if len == 0 {
        return Ok(None);
    }
    if len > MAX_FRAME {
        return Err(LinkError::Malformed(format!("frame of {len} bytes")));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}
