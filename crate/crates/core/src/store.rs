//! Append-only segmented log of [`CipherRecord`]s with a per-patient time
//! index rebuilt from the data on open.
//!
//! Frame layout: `u32 LE length | record bytes | u32 LE CRC32(length | record)`.
//! One writer, any number of readers; readers use positioned reads and only
//! take the index lock long enough to copy locations.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use thiserror::Error;

use crate::channel::CipherRecord;

const SEGMENT_PREFIX: &str = "segment-";
const SEGMENT_SUFFIX: &str = ".log";
const FRAME_OVERHEAD: u64 = 8;
/// Upper bound on one record, to reject garbage lengths during recovery.
const MAX_RECORD: u32 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(String),
    #[error("storage limit of {limit} bytes reached")]
    StorageFull { limit: u64 },
    #[error("corrupt record in segment {segment} at offset {offset}: {reason}")]
    CorruptRecord { segment: u32, offset: u64, reason: String },
    #[error("empty record")]
    EmptyRecord,
    #[error("invalid time range {t0}..{t1}")]
    InvalidRange { t0: u64, t1: u64 },
}

impl From<std::io::Error> for StoreError {
    fn from(e: std::io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    /// A new segment is started once the current one reaches this size.
    pub segment_bytes: u64,
    /// Total size across segments; `None` for unlimited.
    pub max_total_bytes: Option<u64>,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self { segment_bytes: 64 << 20, max_total_bytes: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RecordLocation {
    pub segment: u32,
    /// Byte offset of the frame's length prefix.
    pub offset: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct IndexEntry {
    pub timestamp_ms: u64,
    pub seq: u64,
    pub location: RecordLocation,
}

/// What [`RecordLog::open`] found.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    pub segments: usize,
    pub records: usize,
    /// Bytes dropped from the tail of the last segment.
    pub truncated_bytes: u64,
}

struct Writer {
    segment: u32,
    file: File,
    len: u64,
    total: u64,
}

pub struct RecordLog {
    dir: PathBuf,
    config: StoreConfig,
    index: RwLock<HashMap<String, Vec<IndexEntry>>>,
    readers: RwLock<HashMap<u32, File>>,
    writer: Mutex<Writer>,
    recovery: RecoveryReport,
}

impl std::fmt::Debug for RecordLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RecordLog").field("dir", &self.dir).field("recovery", &self.recovery).finish()
    }
}

fn segment_path(dir: &Path, segment: u32) -> PathBuf {
    dir.join(format!("{SEGMENT_PREFIX}{segment:06}{SEGMENT_SUFFIX}"))
}

fn frame(record: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(record.len() + FRAME_OVERHEAD as usize);
    out.extend_from_slice(&(record.len() as u32).to_le_bytes());
    out.extend_from_slice(record);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

enum Scan {
    Frame { record: CipherRecord, len: u64 },
    End,
    Bad(String),
}

/// Parse one frame at the start of `buf`.
fn scan_frame(buf: &[u8]) -> Scan {
    if buf.is_empty() {
        return Scan::End;
    }
    if buf.len() < 4 {
        return Scan::Bad("truncated length prefix".into());
    }
    let len = u32::from_le_bytes(buf[..4].try_into().unwrap());
    if len == 0 || len > MAX_RECORD {
        return Scan::Bad(format!("implausible length {len}"));
    }
    let total = len as usize + FRAME_OVERHEAD as usize;
    if buf.len() < total {
        return Scan::Bad("truncated frame".into());
    }
    let body = &buf[..4 + len as usize];
    let crc = u32::from_le_bytes(buf[4 + len as usize..total].try_into().unwrap());
    if crc32fast::hash(body) != crc {
        return Scan::Bad("checksum mismatch".into());
    }
    match CipherRecord::from_bytes(&body[4..]) {
        Ok(record) => Scan::Frame { record, len: total as u64 },
        Err(e) => Scan::Bad(format!("undecodable record: {e}")),
    }
}

fn insert_sorted(entries: &mut Vec<IndexEntry>, entry: IndexEntry) {
    let key = (entry.timestamp_ms, entry.seq, entry.location);
    let at = entries.partition_point(|e| (e.timestamp_ms, e.seq, e.location) <= key);
    entries.insert(at, entry);
}

impl RecordLog {
    /// Open or create a log in `dir`, rebuilding the index. A torn frame at
    /// the end of the newest segment is cut off and counted in the report;
    /// damage anywhere else is an error.
    pub fn open(dir: impl AsRef<Path>, config: StoreConfig) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let mut segments: Vec<u32> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let name = e.file_name().into_string().ok()?;
                name.strip_prefix(SEGMENT_PREFIX)?.strip_suffix(SEGMENT_SUFFIX)?.parse().ok()
            })
            .collect();
        segments.sort_unstable();
        if segments.is_empty() {
            segments.push(0);
        }

        let mut index: HashMap<String, Vec<IndexEntry>> = HashMap::new();
        let mut report = RecoveryReport { segments: segments.len(), ..RecoveryReport::default() };
        let mut total = 0u64;
        let last = *segments.last().unwrap();
        let mut last_len = 0;
        for &seg in &segments {
            let path = segment_path(&dir, seg);
            let mut buf = Vec::new();
            if path.exists() {
                File::open(&path)?.read_to_end(&mut buf)?;
            }
            let mut pos = 0usize;
            loop {
                match scan_frame(&buf[pos..]) {
                    Scan::End => break,
                    Scan::Frame { record, len } => {
                        let entry = IndexEntry {
                            timestamp_ms: record.timestamp_ms,
                            seq: record.seq,
                            location: RecordLocation { segment: seg, offset: pos as u64 },
                        };
                        insert_sorted(index.entry(record.patient_id).or_default(), entry);
                        report.records += 1;
                        pos += len as usize;
                    }
                    Scan::Bad(reason) => {
                        if seg != last {
                            return Err(StoreError::CorruptRecord { segment: seg, offset: pos as u64, reason });
                        }
                        report.truncated_bytes = (buf.len() - pos) as u64;
                        let f = OpenOptions::new().write(true).open(&path)?;
                        f.set_len(pos as u64)?;
                        f.sync_all()?;
                        break;
                    }
                }
            }
            total += pos as u64;
            if seg == last {
                last_len = pos as u64;
            }
        }

        let mut file = OpenOptions::new().create(true).truncate(false).read(true).write(true).open(segment_path(&dir, last))?;
        file.seek(SeekFrom::End(0))?;
        let writer = Writer { segment: last, file, len: last_len, total };
        Ok(Self {
            dir,
            config,
            index: RwLock::new(index),
            readers: RwLock::new(HashMap::new()),
            writer: Mutex::new(writer),
            recovery: report,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn recovery(&self) -> &RecoveryReport {
        &self.recovery
    }

    /// Append one record. It is visible to readers on return and durable
    /// after [`RecordLog::flush`].
    pub fn append(&self, record: &CipherRecord) -> Result<RecordLocation, StoreError> {
        let bytes = record.to_bytes();
        if bytes.is_empty() {
            return Err(StoreError::EmptyRecord);
        }
        let framed = frame(&bytes);
        // Verify the frame decodes back to the same record before it hits disk.
        match scan_frame(&framed) {
            Scan::Frame { record: back, .. } if back == *record => {}
            _ => {
                return Err(StoreError::CorruptRecord {
                    segment: u32::MAX,
                    offset: 0,
                    reason: "write-back verification failed".into(),
                })
            }
        }
        let mut w = self.writer.lock().expect("writer lock");
        let size = framed.len() as u64;
        if let Some(limit) = self.config.max_total_bytes {
            if w.total + size > limit {
                return Err(StoreError::StorageFull { limit });
            }
        }
        if w.len > 0 && w.len + size > self.config.segment_bytes {
            w.file.sync_data()?;
            let next = w.segment + 1;
            let file = OpenOptions::new().create(true).read(true).append(true).open(segment_path(&self.dir, next))?;
            *w = Writer { segment: next, file, len: 0, total: w.total };
        }
        let location = RecordLocation { segment: w.segment, offset: w.len };
        if let Err(e) = w.file.write_all(&framed) {
            // Cut back a partial write so the segment stays well framed.
            let _ = w.file.set_len(w.len);
            let _ = w.file.seek(SeekFrom::End(0));
            return Err(e.into());
        }
        w.len += size;
        w.total += size;
        let entry = IndexEntry { timestamp_ms: record.timestamp_ms, seq: record.seq, location };
        let mut index = self.index.write().expect("index lock");
        insert_sorted(index.entry(record.patient_id.clone()).or_default(), entry);
        Ok(location)
    }

    pub fn flush(&self) -> Result<(), StoreError> {
        let w = self.writer.lock().expect("writer lock");
        w.file.sync_data()?;
        Ok(())
    }

    /// Read back the record stored at `loc`.
    pub fn read_at(&self, loc: RecordLocation) -> Result<CipherRecord, StoreError> {
        let cached = self.readers.read().expect("reader lock").get(&loc.segment).map(|f| f.try_clone());
        let file = match cached {
            Some(f) => f?,
            None => {
                let f = File::open(segment_path(&self.dir, loc.segment))?;
                self.readers.write().expect("reader lock").insert(loc.segment, f.try_clone()?);
                f
            }
        };
        let corrupt = |reason: &str| StoreError::CorruptRecord {
            segment: loc.segment,
            offset: loc.offset,
            reason: reason.to_string(),
        };
        let mut len = [0u8; 4];
        file.read_exact_at(&mut len, loc.offset)?;
        let len = u32::from_le_bytes(len);
        if len == 0 || len > MAX_RECORD {
            return Err(corrupt("implausible length"));
        }
        let mut buf = vec![0u8; len as usize + FRAME_OVERHEAD as usize];
        file.read_exact_at(&mut buf, loc.offset)?;
        match scan_frame(&buf) {
            Scan::Frame { record, .. } => Ok(record),
            Scan::Bad(reason) => Err(corrupt(&reason)),
            Scan::End => Err(corrupt("empty frame")),
        }
    }

    /// Records for `patient_id` with `t0 <= timestamp <= t1`, ascending by
    /// `(timestamp, seq)`. Unknown patients yield an empty list.
    pub fn query(&self, patient_id: &str, t0: u64, t1: u64) -> Result<Vec<CipherRecord>, StoreError> {
        if t0 > t1 {
            return Err(StoreError::InvalidRange { t0, t1 });
        }
        let locations: Vec<RecordLocation> = {
            let index = self.index.read().expect("index lock");
            match index.get(patient_id) {
                None => return Ok(Vec::new()),
                Some(entries) => {
                    let start = entries.partition_point(|e| e.timestamp_ms < t0);
                    entries[start..].iter().take_while(|e| e.timestamp_ms <= t1).map(|e| e.location).collect()
                }
            }
        };
        locations.into_iter().map(|loc| self.read_at(loc)).collect()
    }

    pub fn patients(&self) -> Vec<String> {
        let mut p: Vec<String> = self.index.read().expect("index lock").keys().cloned().collect();
        p.sort();
        p
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("index lock").values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy of the index, sorted by patient.
    pub fn index_snapshot(&self) -> Vec<(String, Vec<IndexEntry>)> {
        let mut v: Vec<_> = self.index.read().expect("index lock").iter().map(|(k, e)| (k.clone(), e.clone())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn total_bytes(&self) -> u64 {
        self.writer.lock().expect("writer lock").total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::RecordKind;

    fn record(patient: &str, ts: u64, seq: u64, len: usize) -> CipherRecord {
        CipherRecord {
            kind: RecordKind::Segment,
            patient_id: patient.into(),
            timestamp_ms: ts,
            seq,
            nonce: [seq as u8; 12],
            ciphertext: (0..len).map(|i| (i as u64 * 31 + seq) as u8).collect(),
            tag: [7; 16],
        }
    }

    #[test]
    fn round_trip_and_ordering() {
        let dir = tempfile::tempdir().unwrap();
        let log = RecordLog::open(dir.path(), StoreConfig::default()).unwrap();
        for (ts, seq) in [(30, 3), (10, 1), (20, 2), (10, 0)] {
            log.append(&record("p1", ts, seq, 40)).unwrap();
        }
        let got = log.query("p1", 0, u64::MAX).unwrap();
        let keys: Vec<(u64, u64)> = got.iter().map(|r| (r.timestamp_ms, r.seq)).collect();
        assert_eq!(keys, vec![(10, 0), (10, 1), (20, 2), (30, 3)]);
        assert_eq!(log.query("p1", 20, 20).unwrap(), vec![record("p1", 20, 2, 40)]);
        assert!(log.query("p1", 15, 15).unwrap().is_empty());
        assert!(log.query("nobody", 0, u64::MAX).unwrap().is_empty());
        assert_eq!(log.query("p1", 5, 4).unwrap_err(), StoreError::InvalidRange { t0: 5, t1: 4 });
    }

    #[test]
    fn limits_and_segments() {
        let dir = tempfile::tempdir().unwrap();
        let one = frame(&record("p", 0, 0, 100).to_bytes()).len() as u64;
        let cfg = StoreConfig { segment_bytes: 3 * one, max_total_bytes: Some(7 * one) };
        let log = RecordLog::open(dir.path(), cfg.clone()).unwrap();
        for i in 0..7 {
            log.append(&record("p", i, i, 100)).unwrap();
        }
        assert_eq!(log.append(&record("p", 9, 9, 100)).unwrap_err(), StoreError::StorageFull { limit: 7 * one });
        log.flush().unwrap();
        drop(log);
        let log = RecordLog::open(dir.path(), cfg).unwrap();
        assert_eq!(log.recovery().segments, 3);
        assert_eq!(log.query("p", 0, u64::MAX).unwrap().len(), 7);
    }
}
