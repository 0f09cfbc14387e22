//! Raw byte channels: in-process queues for tests/benchmarks and TCP sockets
//! for the multi-process mode. Link emulation is applied at the sender: the
//! sending call blocks for `rtt/2 + bits/bandwidth` before the frame becomes
//! visible, which also serializes transfers on a link.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use super::link::LinkProfile;
use super::Role;
use crate::error::{Error, Result};

pub const RECV_TIMEOUT: Duration = Duration::from_secs(120);

pub trait RawChannel: Send {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()>;
    fn recv_frame(&mut self) -> Result<Vec<u8>>;
}

/// Copy of every frame that crossed a channel, for byte-accounting and
/// plaintext-flow audits in tests.
#[derive(Debug, Clone)]
pub struct RecorderEntry {
    pub peer: Role,
    pub outbound: bool,
    pub frame: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct Recorder {
    entries: Arc<Mutex<Vec<RecorderEntry>>>,
}

impl Recorder {
    pub fn new() -> Self {
        Recorder::default()
    }

    pub fn record(&self, peer: Role, outbound: bool, frame: &[u8]) {
        self.entries.lock().unwrap().push(RecorderEntry {
            peer,
            outbound,
            frame: frame.to_vec(),
        });
    }

    pub fn entries(&self) -> Vec<RecorderEntry> {
        self.entries.lock().unwrap().clone()
    }
}

/// One direction of an in-process link; frames carry the instant at which the
/// emulated transfer completes.
pub struct InProcChannel {
    tx: mpsc::Sender<(Instant, Vec<u8>)>,
    rx: mpsc::Receiver<(Instant, Vec<u8>)>,
    profile: LinkProfile,
    peer: Role,
}

impl InProcChannel {
    /// A connected pair of endpoints between `a` and `b`.
    pub fn pair(a: Role, b: Role, profile: LinkProfile) -> (InProcChannel, InProcChannel) {
        let (tx_ab, rx_ab) = mpsc::channel();
        let (tx_ba, rx_ba) = mpsc::channel();
        (
            InProcChannel {
                tx: tx_ab,
                rx: rx_ba,
                profile,
                peer: b,
            },
            InProcChannel {
                tx: tx_ba,
                rx: rx_ab,
                profile,
                peer: a,
            },
        )
    }
}

impl RawChannel for InProcChannel {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()> {
        let delay = self.profile.one_way_delay(frame.len());
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
        self.tx
            .send((Instant::now(), frame))
            .map_err(|_| Error::ChannelClosed(self.peer))
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        let (ready_at, frame) = self
            .rx
            .recv_timeout(RECV_TIMEOUT)
            .map_err(|_| Error::ChannelClosed(self.peer))?;
        let now = Instant::now();
        if ready_at > now {
            std::thread::sleep(ready_at - now);
        }
        Ok(frame)
    }
}

/// Length-prefixed frames over a TCP stream (u32 LE length, then the frame).
pub struct TcpChannel {
    stream: TcpStream,
    profile: LinkProfile,
    peer: Role,
}

impl TcpChannel {
    pub fn new(stream: TcpStream, peer: Role, profile: LinkProfile) -> Result<Self> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(RECV_TIMEOUT))?;
        Ok(TcpChannel {
            stream,
            profile,
            peer,
        })
    }
}

impl RawChannel for TcpChannel {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()> {
        let delay = self.profile.one_way_delay(frame.len());
        if !delay.is_zero() {
            std::thread::sleep(delay);
        }
        self.stream
            .write_all(&(frame.len() as u32).to_le_bytes())?;
        self.stream.write_all(&frame)?;
        Ok(())
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        let mut len = [0u8; 4];
        self.stream
            .read_exact(&mut len)
            .map_err(|_| Error::ChannelClosed(self.peer))?;
        let mut frame = vec![0u8; u32::from_le_bytes(len) as usize];
        self.stream
            .read_exact(&mut frame)
            .map_err(|_| Error::ChannelClosed(self.peer))?;
        Ok(frame)
    }
}
