//! In-process byte pipe for running both ends of a handshake.

use std::io::{self, Read, Write};
use std::sync::mpsc::{channel, Receiver, Sender};

pub struct DuplexEnd {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    pending: Vec<u8>,
}

/// Two connected ends; bytes written to one are read from the other.
/// Dropping an end makes the peer's reads return EOF.
pub fn duplex_pair() -> (DuplexEnd, DuplexEnd) {
    let (tx_a, rx_b) = channel();
    let (tx_b, rx_a) = channel();
    (
        DuplexEnd { tx: tx_a, rx: rx_a, pending: Vec::new() },
        DuplexEnd { tx: tx_b, rx: rx_b, pending: Vec::new() },
    )
}

impl Read for DuplexEnd {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        if self.pending.is_empty() {
            match self.rx.recv() {
                Ok(chunk) => self.pending = chunk,
                Err(_) => return Ok(0),
            }
        }
        let n = buf.len().min(self.pending.len());
        buf[..n].copy_from_slice(&self.pending[..n]);
        self.pending.drain(..n);
        Ok(n)
    }
}

impl Write for DuplexEnd {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        self.tx.send(buf.to_vec()).map_err(|_| io::Error::from(io::ErrorKind::BrokenPipe))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}
