//! Ephemeral P-256 key agreement with transcript key confirmation.
//!
//! Both sides send a length-prefixed SEC1 public point, derive keys with
//! HKDF over the shared secret (salted with the transcript hash), then
//! exchange length-prefixed HMACs over the transcript.

use std::io::{Read, Write};

use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use p256::ecdh::EphemeralSecret;
use p256::elliptic_curve::sec1::ToEncodedPoint;
use p256::PublicKey;
use rand::rngs::OsRng;
use sha2::{Digest, Sha256};

use super::{ChannelError, KeyMode, SessionKey};

const LABEL: &[u8] = b"ecgpps-handshake-v1";
const MAX_MESSAGE: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Initiator,
    Responder,
}

fn send<T: Write>(t: &mut T, msg: &[u8]) -> Result<(), ChannelError> {
    t.write_all(&(msg.len() as u16).to_le_bytes())?;
    t.write_all(msg)?;
    t.flush()?;
    Ok(())
}

fn recv<T: Read>(t: &mut T) -> Result<Vec<u8>, ChannelError> {
    let mut len = [0u8; 2];
    t.read_exact(&mut len)?;
    let len = u16::from_le_bytes(len) as usize;
    if len > MAX_MESSAGE {
        return Err(ChannelError::ConfirmFailure);
    }
    let mut buf = vec![0u8; len];
    t.read_exact(&mut buf)?;
    Ok(buf)
}

fn transcript(initiator_pub: &[u8], responder_pub: &[u8]) -> Vec<u8> {
    let mut t = Vec::with_capacity(LABEL.len() + 4 + initiator_pub.len() + responder_pub.len());
    t.extend_from_slice(LABEL);
    for p in [initiator_pub, responder_pub] {
        t.extend_from_slice(&(p.len() as u16).to_le_bytes());
        t.extend_from_slice(p);
    }
    t
}

fn confirmation(key: &[u8], transcript: &[u8]) -> Hmac<Sha256> {
    let mut mac = <Hmac<Sha256> as Mac>::new_from_slice(key).expect("HMAC takes any key length");
    mac.update(transcript);
    mac
}

/// Run one side of the handshake over `transport`.
pub fn handshake<T: Read + Write>(role: Role, transport: &mut T) -> Result<SessionKey, ChannelError> {
    let secret = EphemeralSecret::random(&mut OsRng);
    let own_pub = secret.public_key().to_encoded_point(false).as_bytes().to_vec();
    send(transport, &own_pub)?;
    let peer_pub = recv(transport)?;
    let peer = PublicKey::from_sec1_bytes(&peer_pub).map_err(|_| ChannelError::ConfirmFailure)?;
    let shared = secret.diffie_hellman(&peer);

    let t = match role {
        Role::Initiator => transcript(&own_pub, &peer_pub),
        Role::Responder => transcript(&peer_pub, &own_pub),
    };
    let salt = Sha256::digest(&t);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared.raw_secret_bytes());
    let mut key = [0u8; 32];
    let mut confirm_i = [0u8; 32];
    let mut confirm_r = [0u8; 32];
    let mut session_id = [0u8; 16];
    for (info, out) in [
        (&b"session key"[..], &mut key[..]),
        (b"confirm initiator", &mut confirm_i[..]),
        (b"confirm responder", &mut confirm_r[..]),
        (b"session id", &mut session_id[..]),
    ] {
        hk.expand(info, out).expect("valid HKDF output length");
    }

    let (own_confirm, peer_confirm) = match role {
        Role::Initiator => (&confirm_i, &confirm_r),
        Role::Responder => (&confirm_r, &confirm_i),
    };
    send(transport, &confirmation(own_confirm, &t).finalize().into_bytes())?;
    let peer_mac = recv(transport)?;
    confirmation(peer_confirm, &t).verify_slice(&peer_mac).map_err(|_| ChannelError::ConfirmFailure)?;
    Ok(SessionKey::from_parts(key, session_id, KeyMode::Ecdh))
}

#[cfg(test)]
mod tests {
    use super::super::{duplex_pair, DuplexEnd};
    use super::*;
    use std::collections::HashSet;
    use std::io;
    use std::thread;

    fn run_pair() -> (Result<SessionKey, ChannelError>, Result<SessionKey, ChannelError>) {
        let (mut a, mut b) = duplex_pair();
        let h = thread::spawn(move || handshake(Role::Responder, &mut b));
        let ia = handshake(Role::Initiator, &mut a);
        drop(a);
        (ia, h.join().unwrap())
    }

    #[test]
    fn both_sides_agree() {
        let (a, b) = run_pair();
        let (a, b) = (a.unwrap(), b.unwrap());
        assert!(a.same_secret(&b));
        assert_eq!(a.session_id(), b.session_id());
        assert_eq!(a.mode(), KeyMode::Ecdh);
    }

    #[test]
    fn hundred_distinct_keys() {
        let mut ids = HashSet::new();
        let mut keys: Vec<SessionKey> = Vec::new();
        for _ in 0..100 {
            let (a, _) = run_pair();
            let a = a.unwrap();
            assert!(keys.iter().all(|k| !k.same_secret(&a)));
            ids.insert(a.session_id());
            keys.push(a);
        }
        assert_eq!(ids.len(), 100);
    }

    /// Flips one byte of everything written at absolute offset `at`.
    struct Tamper {
        inner: DuplexEnd,
        written: usize,
        at: usize,
    }

    impl Read for Tamper {
        fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
            self.inner.read(buf)
        }
    }

    impl Write for Tamper {
        fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
            let mut copy = buf.to_vec();
            if (self.written..self.written + buf.len()).contains(&self.at) {
                copy[self.at - self.written] ^= 0x01;
            }
            self.written += buf.len();
            self.inner.write_all(&copy)?;
            Ok(buf.len())
        }

        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    #[test]
    fn corrupted_public_value_is_detected() {
        // Offsets inside the 65-byte point that follows the 2-byte length.
        for at in [2usize, 3, 20, 40, 66] {
            let (a, mut b) = duplex_pair();
            let mut a = Tamper { inner: a, written: 0, at };
            let h = thread::spawn(move || handshake(Role::Responder, &mut b));
            let ra = handshake(Role::Initiator, &mut a);
            drop(a);
            let rb = h.join().unwrap();
            assert!(
                ra.as_ref().err() == Some(&ChannelError::ConfirmFailure) || rb.as_ref().err() == Some(&ChannelError::ConfirmFailure),
                "offset {at}: {:?} / {:?}",
                ra.as_ref().err(),
                rb.as_ref().err()
            );
            assert!(ra.is_err() && rb.is_err());
        }
    }

    #[test]
    fn closed_transport() {
        let (mut a, b) = duplex_pair();
        drop(b);
        assert_eq!(handshake(Role::Initiator, &mut a).unwrap_err(), ChannelError::TransportClosed);
    }
}
