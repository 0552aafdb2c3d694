//! Client ends: the patient agent and the JSON API client.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use ecgpps_core::channel::{handshake, seal, KeyMode, RecordHeader, RecordKind, Role, SessionKey};
use ecgpps_core::signal::{Calibration, TimedChunk};
use rand::RngCore;
use serde::de::DeserializeOwned;

use crate::api::*;
use crate::link::{write_end, write_record, Ack, AckStatus, Hello, LinkError};

/// Agent side of an established session.
pub struct AgentSession<T: Read + Write> {
    transport: T,
    key: SessionKey,
    patient_id: String,
    base_ms: u64,
    next_seq: u64,
    pub records_sent: u64,
    pub bytes_sent: u64,
}

impl<T: Read + Write> AgentSession<T> {
    /// Send the hello, wait for the gateway's acknowledgment and establish
    /// the session key. `psk` is required in pre-shared mode.
    pub fn connect(
        mut transport: T,
        mode: KeyMode,
        psk: Option<&str>,
        patient_id: &str,
        fs: f64,
        calibration: Calibration,
    ) -> Result<Self, LinkError> {
        let mut session_id = [0u8; 16];
        let preshared = match mode {
            KeyMode::PreShared => {
                rand::thread_rng().fill_bytes(&mut session_id);
                let psk = psk.ok_or_else(|| LinkError::Malformed("pre-shared mode needs a key".into()))?;
                Some(SessionKey::preshared(psk, session_id)?)
            }
            KeyMode::Ecdh => None,
        };
        Hello { mode, session_id, patient_id: patient_id.into(), fs, calibration }.write_to(&mut transport)?;
        let ack = Ack::read_from(&mut transport)?;
        if ack.status != AckStatus::Accepted {
            return Err(LinkError::Rejected(ack.status));
        }
        let key = match preshared {
            Some(k) => k,
            None => handshake(Role::Initiator, &mut transport)?,
        };
        Ok(Self {
            transport,
            key,
            patient_id: patient_id.into(),
            base_ms: ack.base_ms,
            next_seq: 0,
            records_sent: 0,
            bytes_sent: 0,
        })
    }

    pub fn base_ms(&self) -> u64 {
        self.base_ms
    }

    pub fn session_id(&self) -> [u8; 16] {
        self.key.session_id()
    }

    pub fn key(&self) -> &SessionKey {
        &self.key
    }

    /// Seal and send one chunk of wire bytes stamped `at_ms` after the base.
    pub fn send_chunk(&mut self, chunk: &TimedChunk) -> Result<(), LinkError> {
        let header = RecordHeader {
            patient_id: self.patient_id.clone(),
            timestamp_ms: self.base_ms + chunk.at_ms,
            seq: self.next_seq,
            kind: RecordKind::RawFrame,
        };
        let record = seal(&mut self.key, &header, &chunk.bytes)?;
        self.next_seq += 1;
        self.send_raw(&record)
    }

    /// Send a record as is, for tests that tamper with records in flight.
    pub fn send_raw(&mut self, record: &ecgpps_core::channel::CipherRecord) -> Result<(), LinkError> {
        write_record(&mut self.transport, record)?;
        self.transport.flush()?;
        self.records_sent += 1;
        self.bytes_sent += record.ciphertext.len() as u64;
        Ok(())
    }

    /// Seal a chunk without sending it.
    pub fn seal_chunk(&mut self, chunk: &TimedChunk) -> Result<ecgpps_core::channel::CipherRecord, LinkError> {
        let header = RecordHeader {
            patient_id: self.patient_id.clone(),
            timestamp_ms: self.base_ms + chunk.at_ms,
            seq: self.next_seq,
            kind: RecordKind::RawFrame,
        };
        self.next_seq += 1;
        Ok(seal(&mut self.key, &header, &chunk.bytes)?)
    }

    /// Send every chunk, paced at its timestamp unless `accelerated`.
    pub fn stream(&mut self, chunks: &[TimedChunk], accelerated: bool) -> Result<(), LinkError> {
        let start = Instant::now();
        for c in chunks {
            if !accelerated {
                let due = start + Duration::from_millis(c.at_ms);
                let now = Instant::now();
                if due > now {
                    thread::sleep(due - now);
                }
            }
            self.send_chunk(c)?;
        }
        Ok(())
    }

    /// End the session cleanly and hand back the transport.
    pub fn finish(mut self) -> Result<T, LinkError> {
        write_end(&mut self.transport)?;
        Ok(self.transport)
    }
}

/// Connect an agent over TCP.
pub fn connect_agent(
    addr: impl ToSocketAddrs,
    mode: KeyMode,
    psk: Option<&str>,
    patient_id: &str,
    fs: f64,
    calibration: Calibration,
) -> Result<AgentSession<TcpStream>, LinkError> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    AgentSession::connect(stream, mode, psk, patient_id, fs, calibration)
}

/// Blocking JSON-lines client for the gateway API.
pub struct ApiClient {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    next_id: u64,
}

impl ApiClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, ApiError> {
        let stream = TcpStream::connect(addr).map_err(|e| ApiError::Transport(e.to_string()))?;
        let _ = stream.set_nodelay(true);
        let reader = BufReader::new(stream.try_clone().map_err(|e| ApiError::Transport(e.to_string()))?);
        Ok(Self { reader, writer: BufWriter::new(stream), next_id: 1 })
    }

    fn send(&mut self, method: &str, params: impl serde::Serialize) -> Result<Response, ApiError> {
        let mut req = Request::new(method, params);
        req.id = Some(self.next_id.into());
        self.next_id += 1;
        let io = |e: std::io::Error| ApiError::Transport(e.to_string());
        serde_json::to_writer(&mut self.writer, &req).map_err(|e| ApiError::Transport(e.to_string()))?;
        self.writer.write_all(b"\n").map_err(io)?;
        self.writer.flush().map_err(io)?;
        let mut line = String::new();
        if self.reader.read_line(&mut line).map_err(io)? == 0 {
            return Err(ApiError::Transport("gateway closed the connection".into()));
        }
        serde_json::from_str(&line).map_err(|e| ApiError::BadResponse(e.to_string()))
    }

    pub fn call<T: DeserializeOwned>(&mut self, method: &str, params: impl serde::Serialize) -> Result<T, ApiError> {
        self.send(method, params)?.into_result()
    }

    pub fn session_list(&mut self) -> Result<SessionList, ApiError> {
        self.call(METHOD_SESSION_LIST, serde_json::Value::Null)
    }

    pub fn control(&mut self, req: &ControlRequest) -> Result<ControlResult, ApiError> {
        self.call(METHOD_SESSION_CONTROL, req)
    }

    pub fn analysis(&mut self, req: &AnalysisRequest) -> Result<AnalysisReport, ApiError> {
        self.call(METHOD_ANALYSIS_RUN, req)
    }

    /// Turn this connection into an event stream for `patient_id`.
    pub fn subscribe(mut self, patient_id: &str) -> Result<EventStream, ApiError> {
        self.send(METHOD_STREAM_SUBSCRIBE, SubscribeRequest { patient_id: patient_id.into() })?
            .into_result::<serde_json::Value>()?;
        Ok(EventStream { reader: self.reader, _writer: self.writer })
    }
}

pub struct EventStream {
    reader: BufReader<TcpStream>,
    _writer: BufWriter<TcpStream>,
}

impl EventStream {
    pub fn set_timeout(&self, t: Option<Duration>) -> std::io::Result<()> {
        self.reader.get_ref().set_read_timeout(t)
    }

    /// The next event, or `None` once the gateway closes the stream.
    pub fn next_event(&mut self) -> Result<Option<StreamEvent>, ApiError> {
        let mut line = String::new();
        match self.reader.read_line(&mut line) {
            Ok(0) => Ok(None),
            Ok(_) => serde_json::from_str(&line).map(Some).map_err(|e| ApiError::BadResponse(e.to_string())),
            Err(e) => Err(ApiError::Transport(e.to_string())),
        }
    }
}
