//! The gateway process: agent sessions, the store writer, and the JSON API.
//!
//! Threads: one acceptor per listener, one handler per connection, and a
//! single store writer fed through a channel by every session handler.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender, SyncSender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use ecgpps_core::channel::{
    handshake, open, ChannelError, CipherRecord, KeyMode, RecordKind, Role, SessionKey, SESSION_TAG_LEN,
};
use ecgpps_core::classifier::CnnModel;
use ecgpps_core::fhe::Ckks;
use ecgpps_core::signal::Calibration;
use ecgpps_core::store::{RecordLocation, RecordLog, StoreConfig, StoreError};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::analysis::{analyze, load_window, SessionSource};
use crate::api::*;
use crate::link::{read_frame, Ack, AckStatus, Hello, LinkError};
use crate::pipeline::{PipelineConfig, SessionPipeline};

/// Session metadata kept next to the log. Holds no key material.
pub const SESSIONS_FILE: &str = "sessions.jsonl";
const ACCEPT_POLL: Duration = Duration::from_millis(10);

pub struct GatewayConfig {
    pub mode: KeyMode,
    /// 64 hex characters; required in pre-shared mode.
    pub psk: Option<String>,
    pub store_dir: PathBuf,
    pub store: StoreConfig,
    pub pipeline: PipelineConfig,
    /// Public and evaluation keys for the encrypted path.
    pub he_server: Option<Ckks>,
    /// Secret key, when this gateway also acts as the key holder.
    pub he_finisher: Option<Ckks>,
    pub model: Option<Arc<CnnModel>>,
}

impl GatewayConfig {
    pub fn new(mode: KeyMode, store_dir: impl Into<PathBuf>) -> Self {
        Self {
            mode,
            psk: None,
            store_dir: store_dir.into(),
            store: StoreConfig::default(),
            pipeline: PipelineConfig::default(),
            he_server: None,
            he_finisher: None,
            model: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Why an agent session ended.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionEnd {
    #[error("link: {0}")]
    Link(#[from] LinkError),
    #[error("record authentication failed")]
    AuthFailure,
    #[error("record rejected: {0}")]
    BadRecord(String),
    #[error("store: {0}")]
    Store(String),
    #[error("pipeline: {0}")]
    Pipeline(String),
}

impl From<ChannelError> for SessionEnd {
    fn from(e: ChannelError) -> Self {
        match e {
            ChannelError::AuthFailure => SessionEnd::AuthFailure,
            other => SessionEnd::Link(LinkError::Channel(other)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SessionMeta {
    session_id: String,
    patient_id: String,
    mode: KeyMode,
    fs: f64,
    gain: f64,
    offset: f64,
    base_ms: u64,
}

#[derive(Debug, Clone, Copy)]
struct Control {
    running: bool,
    filter: bool,
}

struct Session {
    id: [u8; 16],
    patient_id: String,
    control: Mutex<Control>,
    info: RwLock<Arc<SessionInfo>>,
}

impl Session {
    fn snapshot(&self) -> Arc<SessionInfo> {
        self.info.read().expect("session info").clone()
    }

    fn update(&self, f: impl FnOnce(&mut SessionInfo)) {
        let mut guard = self.info.write().expect("session info");
        let mut next = (**guard).clone();
        f(&mut next);
        *guard = Arc::new(next);
    }
}

struct WriteJob {
    record: CipherRecord,
    reply: SyncSender<Result<RecordLocation, StoreError>>,
}

struct Shared {
    mode: KeyMode,
    psk: Option<String>,
    pipeline: PipelineConfig,
    he_server: Option<Ckks>,
    he_finisher: Option<Ckks>,
    model: Option<Arc<CnnModel>>,
    store: Arc<RecordLog>,
    writer: Mutex<Option<Sender<WriteJob>>>,
    sessions: RwLock<Vec<Arc<Session>>>,
    sources: RwLock<HashMap<[u8; SESSION_TAG_LEN], SessionSource>>,
    subscribers: Mutex<HashMap<String, Vec<Sender<StreamEvent>>>>,
    meta: Mutex<File>,
    shutdown: AtomicBool,
}

/// A running gateway. Cheap to clone; all clones share state.
#[derive(Clone)]
pub struct Gateway {
    shared: Arc<Shared>,
}

pub struct ServerHandle {
    pub agent_addr: SocketAddr,
    pub api_addr: SocketAddr,
    gateway: Gateway,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    /// Stop accepting connections and wait for the acceptors.
    pub fn shutdown(mut self) {
        self.gateway.shutdown();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

impl Gateway {
    pub fn start(config: GatewayConfig) -> Result<Self, GatewayError> {
        if config.mode == KeyMode::PreShared {
            let psk = config.psk.as_deref().ok_or_else(|| GatewayError::Config("pre-shared mode needs a key".into()))?;
            SessionKey::preshared(psk, [0; 16]).map_err(|e| GatewayError::Config(e.to_string()))?;
        }
        SessionPipeline::new(&config.pipeline, 360.0, Calibration::default(), 0, None)
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        std::fs::create_dir_all(&config.store_dir)?;
        let store = Arc::new(RecordLog::open(&config.store_dir, config.store.clone())?);
        let recovery = store.recovery();
        if recovery.truncated_bytes > 0 {
            warn!("store recovery dropped a torn tail of {} bytes", recovery.truncated_bytes);
        }
        let sources = restore_sources(&config.store_dir, config.psk.as_deref())?;
        let meta = OpenOptions::new().create(true).append(true).open(config.store_dir.join(SESSIONS_FILE))?;

        let (tx, rx) = mpsc::channel::<WriteJob>();
        let writer_store = store.clone();
        thread::Builder::new().name("store-writer".into()).spawn(move || store_writer(&writer_store, rx))?;

        Ok(Self {
            shared: Arc::new(Shared {
                mode: config.mode,
                psk: config.psk,
                pipeline: config.pipeline,
                he_server: config.he_server,
                he_finisher: config.he_finisher,
                model: config.model,
                store,
                writer: Mutex::new(Some(tx)),
                sessions: RwLock::new(Vec::new()),
                sources: RwLock::new(sources),
                subscribers: Mutex::new(HashMap::new()),
                meta: Mutex::new(meta),
                shutdown: AtomicBool::new(false),
            }),
        })
    }

    /// Serve agents on `agent` and the API on `api`.
    pub fn serve(&self, agent: TcpListener, api: TcpListener) -> Result<ServerHandle, GatewayError> {
        let agent_addr = agent.local_addr()?;
        let api_addr = api.local_addr()?;
        let a = self.clone();
        let b = self.clone();
        let threads = vec![
            thread::Builder::new().name("agent-accept".into()).spawn(move || {
                a.accept_loop(agent, |g, s| {
                    if let Err(e) = g.handle_agent(s) {
                        info!("agent session ended: {e}");
                    }
                })
            })?,
            thread::Builder::new().name("api-accept".into()).spawn(move || {
                b.accept_loop(api, |g, s| {
                    if let Err(e) = g.handle_api(s) {
                        info!("api connection ended: {e}");
                    }
                })
            })?,
        ];
        Ok(ServerHandle { agent_addr, api_addr, gateway: self.clone(), threads })
    }

    fn accept_loop(&self, listener: TcpListener, handler: fn(Gateway, TcpStream)) {
        if listener.set_nonblocking(true).is_err() {
            return;
        }
        while !self.shared.shutdown.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let _ = stream.set_nonblocking(false);
                    let _ = stream.set_nodelay(true);
                    let g = self.clone();
                    let _ = thread::Builder::new().name("conn".into()).spawn(move || handler(g, stream));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
                Err(e) => {
                    warn!("accept failed: {e}");
                    thread::sleep(ACCEPT_POLL);
                }
            }
        }
    }

    pub fn shutdown(&self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        self.shared.subscribers.lock().expect("subscribers").clear();
        self.shared.writer.lock().expect("writer").take();
        let _ = self.shared.store.flush();
    }

    pub fn store(&self) -> &Arc<RecordLog> {
        &self.shared.store
    }

    pub fn mode(&self) -> KeyMode {
        self.shared.mode
    }

    fn append(&self, record: CipherRecord) -> Result<RecordLocation, SessionEnd> {
        let (reply, rx) = mpsc::sync_channel(1);
        let tx = self.shared.writer.lock().expect("writer").clone();
        let tx = tx.ok_or_else(|| SessionEnd::Store("gateway is shutting down".into()))?;
        tx.send(WriteJob { record, reply }).map_err(|_| SessionEnd::Store("store writer stopped".into()))?;
        rx.recv()
            .map_err(|_| SessionEnd::Store("store writer stopped".into()))?
            .map_err(|e| SessionEnd::Store(e.to_string()))
    }

    /// Run one agent session over `transport` until it ends.
    pub fn handle_agent(&self, mut stream: TcpStream) -> Result<(), SessionEnd> {
        let hello = match Hello::read_from(&mut stream) {
            Ok(h) => h,
            Err(e @ LinkError::Malformed(_)) => {
                let _ = Ack { status: AckStatus::Invalid, base_ms: 0 }.write_to(&mut stream);
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        let base_ms = now_ms();
        let reject = |stream: &mut TcpStream, status| -> Result<(), SessionEnd> {
            Ack { status, base_ms }.write_to(stream)?;
            Err(SessionEnd::Link(LinkError::Rejected(status)))
        };
        if hello.mode != self.shared.mode {
            return reject(&mut stream, AckStatus::ModeMismatch);
        }
        let key = match hello.mode {
            KeyMode::PreShared => {
                let psk = self.shared.psk.as_deref().expect("checked at start");
                let key = SessionKey::preshared(psk, hello.session_id)?;
                if self.shared.sources.read().expect("sources").contains_key(&key.session_tag()) {
                    return reject(&mut stream, AckStatus::DuplicateSession);
                }
                Ack { status: AckStatus::Accepted, base_ms }.write_to(&mut stream)?;
                key
            }
            KeyMode::Ecdh => {
                Ack { status: AckStatus::Accepted, base_ms }.write_to(&mut stream)?;
                let key = handshake(Role::Responder, &mut stream)?;
                if self.shared.sources.read().expect("sources").contains_key(&key.session_tag()) {
                    return Err(SessionEnd::BadRecord("session tag collision".into()));
                }
                key
            }
        };
        let session = self.register(&hello, &key, base_ms)?;
        let result = self.run_session(&session, &hello, &key, base_ms, stream);
        session.update(|i| {
            i.connected = false;
            i.error = result.as_ref().err().map(|e| e.to_string());
        });
        result
    }

    fn register(&self, hello: &Hello, key: &SessionKey, base_ms: u64) -> Result<Arc<Session>, SessionEnd> {
        let id = key.session_id();
        let meta = SessionMeta {
            session_id: hex::encode(id),
            patient_id: hello.patient_id.clone(),
            mode: key.mode(),
            fs: hello.fs,
            gain: hello.calibration.gain,
            offset: hello.calibration.offset,
            base_ms,
        };
        {
            let mut f = self.shared.meta.lock().expect("meta");
            let line = serde_json::to_string(&meta).expect("serializable meta");
            writeln!(f, "{line}").and_then(|_| f.sync_data()).map_err(|e| SessionEnd::Store(e.to_string()))?;
        }
        self.shared.sources.write().expect("sources").insert(
            key.session_tag(),
            SessionSource { key: key.clone(), fs: hello.fs, calibration: hello.calibration },
        );
        let info = SessionInfo {
            session_id: meta.session_id,
            patient_id: hello.patient_id.clone(),
            mode: key.mode().to_string(),
            fs: hello.fs,
            base_ms,
            connected: true,
            running: true,
            filter_enabled: false,
            records: 0,
            decoded_samples: 0,
            resync_bytes: 0,
            count: 0,
            class: None,
            pulse: None,
            device_pulse: None,
            latency_ms: None,
            lead_off: false,
            lead_off_events: 0,
            error: None,
        };
        let session = Arc::new(Session {
            id,
            patient_id: hello.patient_id.clone(),
            control: Mutex::new(Control { running: true, filter: false }),
            info: RwLock::new(Arc::new(info)),
        });
        self.shared.sessions.write().expect("sessions").push(session.clone());
        info!("session {} for `{}` ({})", hex::encode(id), hello.patient_id, key.mode());
        Ok(session)
    }

    fn run_session(
        &self,
        session: &Session,
        hello: &Hello,
        key: &SessionKey,
        base_ms: u64,
        stream: TcpStream,
    ) -> Result<(), SessionEnd> {
        let mut pipeline =
            SessionPipeline::new(&self.shared.pipeline, hello.fs, hello.calibration, base_ms, self.shared.model.clone())
                .map_err(|e| SessionEnd::Pipeline(e.to_string()))?;
        let mut reader = BufReader::new(stream);
        let mut last_seq: Option<u64> = None;
        let mut records = 0u64;
        while let Some(frame) = read_frame(&mut reader)? {
            let ingest_at = Instant::now();
            let record = CipherRecord::from_bytes(&frame).map_err(|e| SessionEnd::BadRecord(e.to_string()))?;
            if record.patient_id != hello.patient_id {
                return Err(SessionEnd::BadRecord(format!("record for `{}`", record.patient_id)));
            }
            if record.session_tag() != key.session_tag() || record.kind != RecordKind::RawFrame {
                return Err(SessionEnd::BadRecord("record does not belong to this session".into()));
            }
            if last_seq.is_some_and(|l| record.seq <= l) {
                return Err(SessionEnd::BadRecord(format!("sequence {} replayed", record.seq)));
            }
            let live = open(key, &record)?;
            last_seq = Some(record.seq);
            let location = self.append(record)?;
            let stored_record = self.shared.store.read_at(location).map_err(|e| SessionEnd::Store(e.to_string()))?;
            let stored = open(key, &stored_record)?;
            records += 1;

            let control = *session.control.lock().expect("control");
            pipeline.set_running(control.running);
            pipeline.set_filter(control.filter);
            let events = pipeline.ingest(&live, &stored, ingest_at).map_err(|e| SessionEnd::Pipeline(e.to_string()))?;
            let m = pipeline.metrics();
            session.update(|i| {
                i.records = records;
                i.decoded_samples = pipeline.decoded();
                i.resync_bytes = pipeline.resync_bytes();
                i.count = pipeline.processed();
                i.class = m.class;
                i.pulse = m.pulse;
                i.device_pulse = m.device_pulse;
                i.latency_ms = m.latency_ms;
                i.lead_off = pipeline.lead_off();
                i.lead_off_events = pipeline.lead_off_events();
            });
            if !events.is_empty() {
                self.broadcast(&hello.patient_id, events);
            }
        }
        Ok(())
    }

    fn broadcast(&self, patient: &str, events: Vec<StreamEvent>) {
        let mut subs = self.shared.subscribers.lock().expect("subscribers");
        if let Some(list) = subs.get_mut(patient) {
            list.retain(|tx| events.iter().all(|e| tx.send(e.clone()).is_ok()));
        }
    }

    fn patient_known(&self, patient: &str) -> bool {
        self.shared.sessions.read().expect("sessions").iter().any(|s| s.patient_id == patient)
            || self.shared.store.patients().iter().any(|p| p == patient)
    }

    /// Events for `patient` from now on. Known patients only.
    pub fn subscribe(&self, patient: &str) -> Result<Receiver<StreamEvent>, ApiError> {
        if !self.patient_known(patient) {
            return Err(ApiError::UnknownPatient(patient.into()));
        }
        let (tx, rx) = mpsc::channel();
        self.shared.subscribers.lock().expect("subscribers").entry(patient.into()).or_default().push(tx);
        Ok(rx)
    }

    pub fn session_list(&self) -> SessionList {
        let sessions = self.shared.sessions.read().expect("sessions").iter().map(|s| (*s.snapshot()).clone()).collect();
        let patients = self
            .shared
            .store
            .index_snapshot()
            .into_iter()
            .filter(|(_, e)| !e.is_empty())
            .map(|(patient_id, entries)| PatientInfo {
                patient_id,
                records: entries.len(),
                first_ms: entries.first().map_or(0, |e| e.timestamp_ms),
                last_ms: entries.last().map_or(0, |e| e.timestamp_ms),
            })
            .collect();
        SessionList { sessions, patients }
    }

    pub fn control(&self, req: &ControlRequest) -> Result<ControlResult, ApiError> {
        let session = {
            let sessions = self.shared.sessions.read().expect("sessions");
            let found = match (&req.session_id, &req.patient_id) {
                (Some(id), _) => sessions.iter().find(|s| hex::encode(s.id) == id.to_ascii_lowercase()),
                (None, Some(p)) => sessions
                    .iter()
                    .rev()
                    .find(|s| &s.patient_id == p && s.snapshot().connected)
                    .or_else(|| sessions.iter().rev().find(|s| &s.patient_id == p)),
                (None, None) => return Err(ApiError::BadRequest("session_id or patient_id is required".into())),
            };
            found.cloned().ok_or_else(|| {
                ApiError::UnknownSession(req.session_id.clone().or(req.patient_id.clone()).unwrap_or_default())
            })?
        };
        let c = {
            let mut c = session.control.lock().expect("control");
            match req.action {
                ControlAction::Start => c.running = true,
                ControlAction::Stop => c.running = false,
                ControlAction::FilterOn => c.filter = true,
                ControlAction::FilterOff => c.filter = false,
            }
            *c
        };
        session.update(|i| {
            i.running = c.running;
            i.filter_enabled = c.filter;
        });
        Ok(ControlResult { session_id: hex::encode(session.id), running: c.running, filter_enabled: c.filter })
    }

    pub fn analysis(&self, req: &AnalysisRequest) -> Result<AnalysisReport, ApiError> {
        req.validate()?;
        let records =
            self.shared.store.query(&req.patient_id, req.t0, req.t1).map_err(|e| ApiError::Store(e.to_string()))?;
        if records.is_empty() {
            return Err(ApiError::EmptyRange { patient_id: req.patient_id.clone(), t0: req.t0, t1: req.t1 });
        }
        let sources: HashMap<[u8; SESSION_TAG_LEN], SessionSource> = {
            let all = self.shared.sources.read().expect("sources");
            records.iter().filter_map(|r| all.get(&r.session_tag()).map(|s| (r.session_tag(), s.clone()))).collect()
        };
        let window = load_window(&records, |t| sources.get(t))?;
        analyze(req, &window, self.shared.he_server.as_ref(), self.shared.he_finisher.as_ref())
    }

    /// Dispatch one non-streaming request.
    pub fn call(&self, req: &Request) -> Response {
        let id = req.id.clone();
        let result = match req.method.as_str() {
            METHOD_SESSION_LIST => Ok(serde_json::to_value(self.session_list()).expect("serializable")),
            METHOD_SESSION_CONTROL => {
                params::<ControlRequest>(&req.params).and_then(|p| self.control(&p)).map(to_value)
            }
            METHOD_ANALYSIS_RUN => params::<AnalysisRequest>(&req.params).and_then(|p| self.analysis(&p)).map(to_value),
            METHOD_STREAM_SUBSCRIBE => {
                Err(ApiError::BadRequest("stream.subscribe needs a dedicated connection".into()))
            }
            other => Err(ApiError::UnknownMethod(other.into())),
        };
        match result {
            Ok(v) => Response::success(id, v),
            Err(e) => Response::failure(id, &e),
        }
    }

    /// Serve JSON lines on one API connection. A `stream.subscribe` turns the
    /// connection into an event stream until the peer goes away.
    pub fn handle_api(&self, stream: TcpStream) -> std::io::Result<()> {
        let reader = BufReader::new(stream.try_clone()?);
        let mut out = BufWriter::new(stream);
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let req: Request = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => {
                    write_line(&mut out, &Response::failure(None, &ApiError::BadRequest(e.to_string())))?;
                    continue;
                }
            };
            if req.method == METHOD_STREAM_SUBSCRIBE {
                let rx = match params::<SubscribeRequest>(&req.params).and_then(|p| self.subscribe(&p.patient_id)) {
                    Ok(rx) => rx,
                    Err(e) => {
                        write_line(&mut out, &Response::failure(req.id.clone(), &e))?;
                        continue;
                    }
                };
                write_line(&mut out, &Response::success(req.id.clone(), Value::Null))?;
                for event in rx {
                    write_line(&mut out, &event)?;
                }
                return Ok(());
            }
            write_line(&mut out, &self.call(&req))?;
        }
        Ok(())
    }
}

fn params<T: serde::de::DeserializeOwned>(v: &Value) -> Result<T, ApiError> {
    serde_json::from_value(v.clone()).map_err(|e| ApiError::BadRequest(e.to_string()))
}

fn to_value(v: impl Serialize) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn write_line(out: &mut impl Write, v: &impl Serialize) -> std::io::Result<()> {
    serde_json::to_writer(&mut *out, v)?;
    out.write_all(b"\n")?;
    out.flush()
}

/// Append queued records, flush once the queue drains, then acknowledge.
fn store_writer(store: &RecordLog, rx: Receiver<WriteJob>) {
    while let Ok(first) = rx.recv() {
        let mut batch = vec![first];
        batch.extend(rx.try_iter());
        let results: Vec<_> = batch.iter().map(|j| store.append(&j.record)).collect();
        let flushed = store.flush();
        for (job, mut result) in batch.into_iter().zip(results) {
            if let (Ok(_), Err(e)) = (&result, &flushed) {
                result = Err(e.clone());
            }
            let _ = job.reply.send(result);
        }
    }
}

/// Re-derive pre-shared session keys for sessions recorded in the store
/// directory. ECDH sessions cannot be reopened after a restart.
fn restore_sources(
    dir: &Path,
    psk: Option<&str>,
) -> Result<HashMap<[u8; SESSION_TAG_LEN], SessionSource>, GatewayError> {
    let mut out = HashMap::new();
    let path = dir.join(SESSIONS_FILE);
    if !path.exists() {
        return Ok(out);
    }
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let Ok(meta) = serde_json::from_str::<SessionMeta>(&line) else {
            warn!("skipping unreadable session metadata line");
            continue;
        };
        let (Some(psk), KeyMode::PreShared) = (psk, meta.mode) else { continue };
        let mut id = [0u8; 16];
        if hex::decode_to_slice(&meta.session_id, &mut id).is_err() {
            continue;
        }
        let key = SessionKey::preshared(psk, id).map_err(|e| GatewayError::Config(e.to_string()))?;
        out.insert(
            key.session_tag(),
            SessionSource { key, fs: meta.fs, calibration: Calibration { gain: meta.gain, offset: meta.offset } },
        );
    }
    Ok(out)
}
