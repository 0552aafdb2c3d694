//! Cost comparison of the two key modes.

use std::fmt;
use std::thread;
use std::time::{Duration, Instant};

use rand::RngCore;
use serde::Serialize;

use super::{duplex_pair, handshake, open, seal, KeyMode, RecordHeader, RecordKind, Role, SessionKey};

const BENCH_PSK: &str = "4d1c3b2a0f9e8d7c6b5a49382716051423324150f6e7d8c9bafcedfeabcd0123";

#[derive(Debug, Clone, Serialize)]
pub struct ModeBench {
    pub mode: KeyMode,
    pub setup_ms: f64,
    pub seal_median_us: f64,
    pub seal_p95_us: f64,
    pub open_median_us: f64,
    pub open_p95_us: f64,
    /// Seal plus open, records per second.
    pub throughput_rps: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub payload_size: usize,
    pub n_records: usize,
    pub modes: Vec<ModeBench>,
}

impl BenchReport {
    pub fn mode(&self, mode: KeyMode) -> Option<&ModeBench> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "payload {} B, {} records", self.payload_size, self.n_records)?;
        writeln!(
            f,
            "{:<10} {:>10} {:>12} {:>12} {:>12} {:>12} {:>14}",
            "mode", "setup ms", "seal p50 us", "seal p95 us", "open p50 us", "open p95 us", "records/s"
        )?;
        for m in &self.modes {
            writeln!(
                f,
                "{:<10} {:>10.3} {:>12.2} {:>12.2} {:>12.2} {:>12.2} {:>14.0}",
                m.mode.to_string(),
                m.setup_ms,
                m.seal_median_us,
                m.seal_p95_us,
                m.open_median_us,
                m.open_p95_us,
                m.throughput_rps
            )?;
        }
        Ok(())
    }
}

fn percentile(sorted: &[Duration], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((p * (sorted.len() - 1) as f64).round() as usize).min(sorted.len() - 1);
    sorted[idx].as_secs_f64() * 1e6
}

fn ecdh_setup() -> (SessionKey, Duration) {
    let start = Instant::now();
    let (mut a, mut b) = duplex_pair();
    let peer = thread::spawn(move || handshake(Role::Responder, &mut b));
    let key = handshake(Role::Initiator, &mut a).expect("in-process handshake");
    peer.join().expect("responder thread").expect("responder handshake");
    (key, start.elapsed())
}

fn measure(mode: KeyMode, payload_size: usize, n_records: usize) -> ModeBench {
    let (mut key, setup) = match mode {
        KeyMode::PreShared => (SessionKey::new_preshared(BENCH_PSK).expect("valid bench key"), Duration::ZERO),
        KeyMode::Ecdh => ecdh_setup(),
    };
    let mut payload = vec![0u8; payload_size];
    rand::thread_rng().fill_bytes(&mut payload);
    let mut seal_t = Vec::with_capacity(n_records);
    let mut open_t = Vec::with_capacity(n_records);
    let total = Instant::now();
    for seq in 0..n_records as u64 {
        let header = RecordHeader { patient_id: "bench".into(), timestamp_ms: seq, seq, kind: RecordKind::RawFrame };
        let t = Instant::now();
        let rec = seal(&mut key, &header, &payload).expect("monotone seq");
        seal_t.push(t.elapsed());
        let t = Instant::now();
        let pt = open(&key, &rec).expect("own record");
        open_t.push(t.elapsed());
        debug_assert_eq!(pt.len(), payload_size);
    }
    let elapsed = total.elapsed().as_secs_f64();
    seal_t.sort();
    open_t.sort();
    ModeBench {
        mode,
        // Pre-shared keys need no exchange, so their setup cost is zero by definition.
        setup_ms: setup.as_secs_f64() * 1e3,
        seal_median_us: percentile(&seal_t, 0.5),
        seal_p95_us: percentile(&seal_t, 0.95),
        open_median_us: percentile(&open_t, 0.5),
        open_p95_us: percentile(&open_t, 0.95),
        throughput_rps: if elapsed > 0.0 { n_records as f64 / elapsed } else { f64::INFINITY },
    }
}

pub fn bench_modes(payload_size: usize, n_records: usize) -> BenchReport {
    let modes = [KeyMode::PreShared, KeyMode::Ecdh].into_iter().map(|m| measure(m, payload_size, n_records)).collect();
    BenchReport { payload_size, n_records, modes }
}
