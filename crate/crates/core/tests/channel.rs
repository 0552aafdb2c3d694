use std::collections::HashSet;
use std::io::{Read, Write};
use std::thread;

use ecgpps_core::channel::{
    bench_modes, duplex_pair, handshake, open, seal, ChannelError, CipherRecord, DuplexEnd, KeyMode, KeyRing,
    RecordHeader, RecordKind, Role, SessionKey, NONCE_LEN,
};
use proptest::prelude::*;

const PSK: &str = "000102030405060708090a0b0c0d0e0f101112131415161718191a1b1c1d1e1f";

fn header(seq: u64) -> RecordHeader {
    RecordHeader { patient_id: "patient-7".into(), timestamp_ms: 1_000 + seq, seq, kind: RecordKind::RawFrame }
}

fn ecdh_pair() -> (SessionKey, SessionKey) {
    let (mut a, mut b) = duplex_pair();
    let peer = thread::spawn(move || handshake(Role::Responder, &mut b));
    let ka = handshake(Role::Initiator, &mut a).unwrap();
    (ka, peer.join().unwrap().unwrap())
}

/// Flips one bit of the `at`-th byte read through it.
struct Corrupting {
    inner: DuplexEnd,
    at: usize,
    seen: usize,
}

impl Read for Corrupting {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        if (self.seen..self.seen + n).contains(&self.at) {
            buf[self.at - self.seen] ^= 0x01;
        }
        self.seen += n;
        Ok(n)
    }
}

impl Write for Corrupting {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.inner.write(buf)
    }
    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

#[test]
fn nonces_are_unique_within_a_session() {
    let mut key = SessionKey::new_preshared(PSK).unwrap();
    let mut seen = HashSet::new();
    for seq in 0..20_000u64 {
        let rec = seal(&mut key, &header(seq), b"x").unwrap();
        assert_eq!(rec.nonce, key.nonce_for(seq));
        assert!(seen.insert(rec.nonce));
    }
    assert_eq!(seen.len(), 20_000);
}

#[test]
fn sequence_numbers_must_increase() {
    let mut key = SessionKey::new_preshared(PSK).unwrap();
    seal(&mut key, &header(5), b"a").unwrap();
    assert!(matches!(seal(&mut key, &header(5), b"b"), Err(ChannelError::SeqReplay { last: 5, got: 5 })));
    assert!(matches!(seal(&mut key, &header(3), b"b"), Err(ChannelError::SeqReplay { .. })));
    assert!(seal(&mut key, &header(6), b"c").is_ok());
}

#[test]
fn handshake_sides_agree_and_sessions_differ() {
    let mut ids = HashSet::new();
    let mut first: Option<SessionKey> = None;
    for _ in 0..100 {
        let (a, b) = ecdh_pair();
        assert!(a.same_secret(&b));
        assert_eq!(a.session_id(), b.session_id());
        assert_eq!(a.mode(), KeyMode::Ecdh);
        assert!(ids.insert(a.session_id()));
        if let Some(f) = &first {
            assert!(!f.same_secret(&a));
        }
        first.get_or_insert(a);
    }
}

#[test]
fn corrupted_handshake_bytes_fail_confirmation() {
    for at in [2usize, 10, 40, 70] {
        let (a, b) = duplex_pair();
        let peer = thread::spawn(move || {
            let mut b = b;
            handshake(Role::Responder, &mut b)
        });
        let mut a = Corrupting { inner: a, at, seen: 0 };
        let mine = handshake(Role::Initiator, &mut a);
        drop(a);
        let theirs = peer.join().unwrap();
        assert!(mine.is_err() || theirs.is_err(), "byte {at}: both sides accepted");
        let errs = [mine.err(), theirs.err()];
        assert!(
            errs.iter().flatten().any(|e| matches!(
                e,
                ChannelError::ConfirmFailure | ChannelError::BadKey(_) | ChannelError::Malformed(_)
            )),
            "byte {at}: {errs:?}"
        );
    }
}

#[test]
fn records_do_not_open_under_another_session() {
    let (mut a, a_peer) = ecdh_pair();
    let (b, _) = ecdh_pair();
    let rec = seal(&mut a, &header(0), b"sample bytes").unwrap();
    assert_eq!(open(&a_peer, &rec).unwrap(), b"sample bytes");
    assert_eq!(open(&b, &rec), Err(ChannelError::AuthFailure));
    let psk_a = SessionKey::new_preshared(PSK).unwrap();
    assert_eq!(open(&psk_a, &rec), Err(ChannelError::AuthFailure));

    let mut ring = KeyRing::new();
    ring.insert(b);
    assert!(ring.open(&rec).is_err());
    ring.insert(a_peer);
    assert_eq!(ring.open(&rec).unwrap(), b"sample bytes");
}

#[test]
fn truncated_records_fail() {
    let mut key = SessionKey::new_preshared(PSK).unwrap();
    let rec = seal(&mut key, &header(0), &[7u8; 64]).unwrap();
    let mut short = rec.clone();
    short.ciphertext.pop();
    assert_eq!(open(&key, &short), Err(ChannelError::AuthFailure));
    let bytes = rec.to_bytes();
    for cut in [0, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(CipherRecord::from_bytes(&bytes[..cut]).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn any_single_bit_flip_is_detected(payload in prop::collection::vec(any::<u8>(), 1..256), bit in any::<prop::sample::Index>()) {
        let mut key = SessionKey::new_preshared(PSK).unwrap();
        let rec = seal(&mut key, &header(3), &payload).unwrap();
        let mut bytes = rec.to_bytes();
        let bit = bit.index(bytes.len() * 8);
        bytes[bit / 8] ^= 1 << (bit % 8);
        // Either the frame no longer parses or authentication fails.
        if let Ok(tampered) = CipherRecord::from_bytes(&bytes) {
            prop_assert!(open(&key, &tampered).is_err());
        }
    }

    #[test]
    fn nonce_fields_and_tag_are_all_covered(payload in prop::collection::vec(any::<u8>(), 1..128), i in 0usize..NONCE_LEN) {
        let mut key = SessionKey::new_preshared(PSK).unwrap();
        let rec = seal(&mut key, &header(9), &payload).unwrap();
        let mut n = rec.clone();
        n.nonce[i] ^= 0x80;
        prop_assert!(open(&key, &n).is_err());
        let mut t = rec.clone();
        t.tag[i % t.tag.len()] ^= 0x01;
        prop_assert!(open(&key, &t).is_err());
        let mut ts = rec.clone();
        ts.timestamp_ms += 1;
        prop_assert!(open(&key, &ts).is_err());
        let mut k = rec;
        k.kind = RecordKind::Segment;
        prop_assert!(open(&key, &k).is_err());
    }
}

#[test]
fn bench_compares_the_modes() {
    let report = bench_modes(256, 400);
    let psk = report.mode(KeyMode::PreShared).unwrap();
    let ecdh = report.mode(KeyMode::Ecdh).unwrap();
    assert_eq!(psk.setup_ms, 0.0);
    assert!(ecdh.setup_ms > 0.0);
    let ratio = psk.seal_median_us / ecdh.seal_median_us;
    assert!((0.5..=2.0).contains(&ratio), "seal latency ratio {ratio}");
    assert!(report.to_string().lines().count() >= 4);
}

#[test]
fn throughput_falls_as_payloads_grow() {
    let sizes = [64usize, 1024, 16 * 1024, 64 * 1024];
    let rates: Vec<f64> =
        sizes.iter().map(|&s| bench_modes(s, 200).mode(KeyMode::PreShared).unwrap().throughput_rps).collect();
    assert!(rates.windows(2).all(|w| w[0] > w[1]), "{rates:?}");
}
