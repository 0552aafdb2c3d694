//! Range analysis over stored records, and the key-holder side that
//! finishes the encrypted path.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ecgpps_core::channel::{open, CipherRecord, SessionKey, SESSION_TAG_LEN};
use ecgpps_core::fhe::{
    encrypted_finish, encrypted_server, plaintext_analysis, CipherVector, Ckks, ComparisonReport, EncryptedResults,
    EvalKeys, HeBackend, HeError, KeySet, PublicKey, SecretKey,
};
use ecgpps_core::signal::Calibration;
use ecgpps_core::wire::{Decoder, FrameEvent};

use crate::api::{AnalysisMode, AnalysisReport, AnalysisRequest, ApiError, SealedResults};

pub const SECRET_KEY_FILE: &str = "secret.key";
pub const PUBLIC_KEY_FILE: &str = "public.key";
pub const EVAL_KEY_FILE: &str = "eval.key";

/// Write the three key files of `keys` into `dir`.
pub fn write_keyset(dir: &Path, keys: &KeySet) -> Result<(), HeError> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(SECRET_KEY_FILE))?);
    keys.secret.write_to(&mut w)?;
    let mut w = BufWriter::new(File::create(dir.join(PUBLIC_KEY_FILE))?);
    keys.public.write_to(&mut w)?;
    let mut w = BufWriter::new(File::create(dir.join(EVAL_KEY_FILE))?);
    keys.eval.write_to(&mut w)?;
    Ok(())
}

/// Evaluation side: public and evaluation keys.
pub fn load_server_keys(dir: &Path) -> Result<Ckks, HeError> {
    let pk = PublicKey::read_from(&mut BufReader::new(File::open(dir.join(PUBLIC_KEY_FILE))?))?;
    let ek = EvalKeys::read_from(&mut BufReader::new(File::open(dir.join(EVAL_KEY_FILE))?))?;
    if pk.context().fingerprint() != ek.context().fingerprint() {
        return Err(HeError::ParamsMismatch);
    }
    Ok(Ckks::new(pk.context().clone()).with_public(pk).with_eval(ek))
}

/// Key-holder side: the secret key only.
pub fn load_secret_key(dir: &Path) -> Result<Ckks, HeError> {
    let sk = SecretKey::read_from(&mut BufReader::new(File::open(dir.join(SECRET_KEY_FILE))?))?;
    Ok(Ckks::new(sk.context().clone()).with_secret(sk))
}

/// What the gateway knows about the session that produced a record.
#[derive(Debug, Clone)]
pub struct SessionSource {
    pub key: SessionKey,
    pub fs: f64,
    pub calibration: Calibration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedWindow {
    pub samples: Vec<f64>,
    pub fs: f64,
    pub records: usize,
}

/// Open and decode `records` (ascending by time) into one sample window.
/// Records are grouped per session and each session is decoded in order.
pub fn load_window<'a>(
    records: &[CipherRecord],
    lookup: impl Fn(&[u8; SESSION_TAG_LEN]) -> Option<&'a SessionSource>,
) -> Result<LoadedWindow, ApiError> {
    let mut order: Vec<[u8; SESSION_TAG_LEN]> = Vec::new();
    let mut groups: HashMap<[u8; SESSION_TAG_LEN], Vec<&CipherRecord>> = HashMap::new();
    for r in records {
        let tag = r.session_tag();
        groups.entry(tag).or_insert_with(|| {
            order.push(tag);
            Vec::new()
        });
        groups.get_mut(&tag).expect("inserted").push(r);
    }
    let mut samples = Vec::new();
    let mut fs: Option<f64> = None;
    for tag in order {
        let source = lookup(&tag).ok_or_else(|| ApiError::KeyUnavailable(hex::encode(tag)))?;
        match fs {
            Some(f) if f != source.fs => {
                return Err(ApiError::Data(format!("range mixes {f} Hz and {} Hz sessions", source.fs)))
            }
            _ => fs = Some(source.fs),
        }
        let mut group = groups.remove(&tag).expect("grouped");
        group.sort_by_key(|r| r.seq);
        let mut dec = Decoder::new();
        for r in group {
            let plain = open(&source.key, r).map_err(|e| ApiError::Data(format!("record {}: {e}", r.seq)))?;
            let mut events = dec.feed(&plain);
            events.extend(dec.flush());
            for ev in events {
                if let FrameEvent::WaveSamples(s) = ev {
                    samples.extend(s.into_iter().map(|b| source.calibration.to_amplitude(b)));
                }
            }
        }
    }
    Ok(LoadedWindow { samples, fs: fs.unwrap_or(0.0), records: records.len() })
}

fn seal_ct(ct: &CipherVector) -> String {
    B64.encode(ct.to_envelope())
}

fn unseal_ct(he: &Ckks, s: &str) -> Result<CipherVector, ApiError> {
    let bytes = B64.decode(s).map_err(|e| ApiError::BadResponse(format!("ciphertext encoding: {e}")))?;
    Ok(CipherVector::from_envelope(he.context(), &bytes)?)
}

/// Run `req` on `window`. `server` evaluates; `finisher`, if present, holds
/// the secret key and completes the encrypted path in place. Without it the
/// report carries the sealed server results instead.
pub fn analyze(
    req: &AnalysisRequest,
    window: &LoadedWindow,
    server: Option<&Ckks>,
    finisher: Option<&Ckks>,
) -> Result<AnalysisReport, ApiError> {
    req.validate()?;
    let opts = req.options();
    let mut report = AnalysisReport {
        patient_id: req.patient_id.clone(),
        t0: req.t0,
        t1: req.t1,
        mode: req.mode,
        analyses: opts.analyses.clone(),
        fs: window.fs,
        samples: window.samples.len(),
        records: window.records,
        plaintext: None,
        encrypted: None,
        comparison: None,
        sealed: None,
    };
    if window.samples.is_empty() {
        return Err(ApiError::Data("the range holds no wave samples".into()));
    }
    if req.mode != AnalysisMode::Encrypted {
        report.plaintext = Some(plaintext_analysis(&window.samples, window.fs, &opts)?);
    }
    if req.mode == AnalysisMode::Plaintext {
        return Ok(report);
    }
    let server = server.ok_or(ApiError::HeUnavailable)?;
    let ct = server.encrypt(&window.samples)?;
    let res = encrypted_server(server, &ct, window.fs, &opts)?;
    report.sealed = Some(SealedResults {
        context: hex::encode(server.context().fingerprint()),
        n: res.n,
        fs: res.fs,
        window: seal_ct(&ct),
        mean: res.mean.as_ref().map(seal_ct),
        variance: res.variance.as_ref().map(seal_ct),
        integrated: res.integrated.as_ref().map(seal_ct),
        spectrum_freqs: res.spectrum.as_ref().map(|s| s.0.clone()),
        spectrum: res.spectrum.as_ref().map(|s| seal_ct(&s.1)),
    });
    if let Some(f) = finisher {
        finish_report(&mut report, f)?;
    }
    Ok(report)
}

/// Decrypt the sealed part of `report` with the secret key in `he`, fill
/// the encrypted values and, in compare mode, the comparison.
pub fn finish_report(report: &mut AnalysisReport, he: &Ckks) -> Result<(), ApiError> {
    let Some(sealed) = report.sealed.take() else {
        return Ok(());
    };
    if sealed.context != hex::encode(he.context().fingerprint()) {
        report.sealed = Some(sealed);
        return Err(ApiError::He(HeError::ParamsMismatch));
    }
    let opt = |s: &Option<String>| s.as_deref().map(|s| unseal_ct(he, s)).transpose();
    let spectrum = match (&sealed.spectrum_freqs, &sealed.spectrum) {
        (Some(f), Some(s)) => Some((f.clone(), unseal_ct(he, s)?)),
        _ => None,
    };
    let res = EncryptedResults {
        n: sealed.n,
        fs: sealed.fs,
        mean: opt(&sealed.mean)?,
        variance: opt(&sealed.variance)?,
        integrated: opt(&sealed.integrated)?,
        spectrum,
    };
    let window = unseal_ct(he, &sealed.window)?;
    if he.logical_len(&window) != sealed.n {
        return Err(ApiError::BadResponse("window length does not match".into()));
    }
    let opts = AnalysisRequest {
        patient_id: String::new(),
        t0: 0,
        t1: 0,
        analyses: report.analyses.clone(),
        mode: report.mode,
        top_k: None,
        probe_max_hz: None,
    }
    .options();
    let enc = encrypted_finish(he, &window, &res, &opts)?;
    if report.mode == AnalysisMode::Compare {
        let plain = report.plaintext.clone().ok_or_else(|| ApiError::BadResponse("compare report lacks plaintext".into()))?;
        report.comparison = Some(ComparisonReport::from_values(plain, enc.clone()));
    }
    report.encrypted = Some(enc);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ecgpps_core::channel::{seal, RecordHeader, RecordKind};
    use ecgpps_core::fhe::{keygen, Analysis, CkksContext, HeParams};
    use ecgpps_core::signal::{stream, synth, StreamConfig, SynthProfile};

    fn session(psk_byte: &str, id: u8, fs: f64, seconds: f64, base: u64) -> (SessionSource, Vec<CipherRecord>, Vec<f64>) {
        let mut key = SessionKey::preshared(&psk_byte.repeat(32), [id; 16]).unwrap();
        let w = synth(&SynthProfile::default(), seconds, fs).unwrap();
        let cfg = StreamConfig { calibration: Calibration::ECG_MV, ..StreamConfig::default() };
        let chunks = stream(&w, &cfg).unwrap();
        let records = chunks
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let h = RecordHeader {
                    patient_id: "p".into(),
                    timestamp_ms: base + c.at_ms,
                    seq: i as u64,
                    kind: RecordKind::RawFrame,
                };
                seal(&mut key, &h, &c.bytes).unwrap()
            })
            .collect();
        let expect = w
            .samples
            .iter()
            .map(|&v| Calibration::ECG_MV.to_amplitude(Calibration::ECG_MV.quantize(v).unwrap()))
            .collect();
        (SessionSource { key, fs, calibration: Calibration::ECG_MV }, records, expect)
    }

    #[test]
    fn windows_are_decoded_per_session() {
        let (a, ra, xa) = session("ab", 1, 50.0, 3.0, 1000);
        let (b, rb, xb) = session("cd", 2, 50.0, 2.0, 10_000);
        let mut all: Vec<CipherRecord> = ra.into_iter().chain(rb).collect();
        all.sort_by_key(|r| (r.timestamp_ms, r.seq));
        let sources = [a, b];
        let lookup = |t: &[u8; SESSION_TAG_LEN]| sources.iter().find(|s| s.key.session_tag() == *t);
        let w = load_window(&all, lookup).unwrap();
        assert_eq!(w.samples, [xa, xb].concat());
        assert_eq!(w.fs, 50.0);
        assert!(matches!(load_window(&all, |_| None), Err(ApiError::KeyUnavailable(_))));
    }

    #[test]
    fn mixed_rates_are_refused() {
        let (a, ra, _) = session("ab", 1, 50.0, 1.0, 0);
        let (b, rb, _) = session("ab", 2, 100.0, 1.0, 5000);
        let all: Vec<CipherRecord> = ra.into_iter().chain(rb).collect();
        let sources = [a, b];
        let lookup = |t: &[u8; SESSION_TAG_LEN]| sources.iter().find(|s| s.key.session_tag() == *t);
        assert!(matches!(load_window(&all, lookup), Err(ApiError::Data(_))));
    }

    #[test]
    fn sealed_results_finish_like_in_place() {
        let ctx = CkksContext::new(HeParams { slot_count: 1024, ..HeParams::default() }).unwrap();
        let keys = keygen(&ctx, 5);
        let dir = tempfile::tempdir().unwrap();
        write_keyset(dir.path(), &keys).unwrap();
        let server = load_server_keys(dir.path()).unwrap();
        let holder = load_secret_key(dir.path()).unwrap();

        let (_, _, x) = session("ab", 1, 50.0, 12.0, 0);
        let window = LoadedWindow { samples: x, fs: 50.0, records: 1 };
        let req = AnalysisRequest {
            patient_id: "p".into(),
            t0: 0,
            t1: 1,
            analyses: Analysis::ALL.to_vec(),
            mode: AnalysisMode::Compare,
            top_k: None,
            probe_max_hz: None,
        };
        let mut sealed = analyze(&req, &window, Some(&server), None).unwrap();
        assert!(sealed.encrypted.is_none() && sealed.sealed.is_some());
        assert!(matches!(server.decrypt(&unseal_ct(&server, &sealed.sealed.as_ref().unwrap().window).unwrap()), Err(HeError::MissingKey(_))));
        let line = serde_json::to_string(&sealed).unwrap();
        sealed = serde_json::from_str(&line).unwrap();
        finish_report(&mut sealed, &holder).unwrap();
        let c = sealed.comparison.as_ref().unwrap();
        assert_eq!(c.peak_match_pct, Some(100.0));
        assert_eq!(c.frequency_match_pct, Some(100.0));
        // The noise-free baseline makes the plaintext median exactly zero,
        // where any scheme noise gives a ratio of 0.
        for m in c.metrics.iter().filter(|m| m.plaintext != 0.0) {
            assert!(m.ratio >= 99.0, "{m:?}");
        }

        let direct = analyze(&req, &window, Some(&server), Some(&holder)).unwrap();
        assert!(direct.sealed.is_none());
        assert_eq!(direct.comparison.as_ref().unwrap().peak_match_pct, Some(100.0));

        let plain = analyze(&AnalysisRequest { mode: AnalysisMode::Plaintext, ..req.clone() }, &window, None, None).unwrap();
        assert!(plain.plaintext.is_some() && plain.sealed.is_none());
        assert_eq!(
            analyze(&AnalysisRequest { mode: AnalysisMode::Encrypted, ..req }, &window, None, None).unwrap_err(),
            ApiError::HeUnavailable
        );
    }
}
