//! Session handles: one per party, holding the pairwise channels, the step
//! counters, and the metrics of that party's view.

use std::collections::HashMap;
use std::net::{TcpListener, TcpStream};
use std::time::{Duration, Instant};

use super::channel::{InProcChannel, RawChannel, Recorder, TcpChannel};
use super::link::LinkProfile;
use super::metrics::{Metrics, Transcript};
use super::wire::{Message, Phase, ProtocolId, MAGIC, VERSION};
use super::Role;
use crate::error::{Error, Result};

struct PeerState {
    chan: Box<dyn RawChannel>,
    send_steps: HashMap<u8, u32>,
    recv_steps: HashMap<u8, u32>,
}

pub struct Session {
    role: Role,
    session_id: u128,
    peers: HashMap<Role, PeerState>,
    metrics: Metrics,
    recorder: Option<Recorder>,
}

impl Session {
    fn new(role: Role, session_id: u128) -> Self {
        Session {
            role,
            session_id,
            peers: HashMap::new(),
            metrics: Metrics::new(),
            recorder: None,
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn session_id(&self) -> u128 {
        self.session_id
    }

    pub fn metrics(&self) -> Metrics {
        self.metrics.clone()
    }

    /// Read-only consistent snapshot of this party's transcript.
    pub fn snapshot(&self) -> Transcript {
        self.metrics.snapshot()
    }

    /// Capture every frame crossing this session (tests only).
    pub fn install_recorder(&mut self, rec: Recorder) {
        self.recorder = Some(rec);
    }

    fn raw_send(&mut self, to: Role, mut msg: Message) -> Result<(Phase, ProtocolId, u64)> {
        let sid = self.session_id;
        let rec = self.recorder.clone();
        let peer = self
            .peers
            .get_mut(&to)
            .ok_or(Error::ChannelClosed(to))?;
        let step = peer
            .send_steps
            .entry(msg.protocol.as_u8())
            .and_modify(|s| *s += 1)
            .or_insert(1);
        msg.step = *step;
        let frame = msg.encode(sid);
        if let Some(r) = &rec {
            r.record(to, true, &frame);
        }
        let len = frame.len() as u64;
        let tags = (msg.phase, msg.protocol, len);
        peer.chan.send_frame(frame)?;
        self.metrics.record_sent(msg.phase, msg.protocol, len);
        Ok(tags)
    }

    fn raw_recv(&mut self, from: Role) -> Result<(Message, u64)> {
        let sid = self.session_id;
        let rec = self.recorder.clone();
        let peer = self
            .peers
            .get_mut(&from)
            .ok_or(Error::ChannelClosed(from))?;
        let frame = peer.chan.recv_frame()?;
        if let Some(r) = &rec {
            r.record(from, false, &frame);
        }
        let (msg_sid, msg) = Message::decode(&frame)?;
        if msg_sid != sid {
            return Err(Error::Decode(format!(
                "session id mismatch: {msg_sid:x} != {sid:x}"
            )));
        }
        let last = peer.recv_steps.entry(msg.protocol.as_u8()).or_insert(0);
        if msg.step <= *last {
            return Err(Error::Decode(format!(
                "step id {} not increasing (last {})",
                msg.step, last
            )));
        }
        *last = msg.step;
        let len = frame.len() as u64;
        self.metrics.record_recv(msg.phase, msg.protocol, len);
        Ok((msg, len))
    }

    /// Send one flight; counts one round against the message's phase/protocol.
    pub fn send(&mut self, to: Role, msg: Message) -> Result<()> {
        let (phase, proto, _) = self.raw_send(to, msg)?;
        self.metrics.record_round(phase, proto);
        Ok(())
    }

    /// Several independent flights of the same logical round (e.g. the dealer
    /// distributing shares to both parties); counts a single round, tagged by
    /// the first message.
    pub fn send_batch(&mut self, msgs: Vec<(Role, Message)>) -> Result<()> {
        let mut round: Option<(Phase, ProtocolId)> = None;
        for (to, msg) in msgs {
            let (phase, proto, _) = self.raw_send(to, msg)?;
            round.get_or_insert((phase, proto));
        }
        if let Some((phase, proto)) = round {
            self.metrics.record_round(phase, proto);
        }
        Ok(())
    }

    /// Receive one flight; counts one round against the received message's
    /// phase/protocol.
    pub fn recv(&mut self, from: Role) -> Result<Message> {
        let (msg, _) = self.raw_recv(from)?;
        self.metrics.record_round(msg.phase, msg.protocol);
        Ok(msg)
    }

    /// `recv` plus a tag check.
    pub fn recv_expect(&mut self, from: Role, phase: Phase, protocol: ProtocolId) -> Result<Message> {
        let msg = self.recv(from)?;
        if msg.phase != phase || msg.protocol != protocol {
            return Err(Error::Decode(format!(
                "expected {}/{}, got {}/{}",
                phase.name(),
                protocol.name(),
                msg.phase.name(),
                msg.protocol.name()
            )));
        }
        Ok(msg)
    }

    /// Simultaneous cross-send with `peer`: both parties call `exchange` in
    /// the same step; the two flights count as ONE round on each side.
    pub fn exchange(&mut self, peer: Role, out: Message) -> Result<Message> {
        let phase = out.phase;
        let proto = out.protocol;
        self.raw_send(peer, out)?;
        let (msg, _) = self.raw_recv(peer)?;
        if msg.phase != phase || msg.protocol != proto {
            return Err(Error::Decode("exchange step mismatch".into()));
        }
        self.metrics.record_round(phase, proto);
        Ok(msg)
    }

    /// Run `f`, attributing its wall time to `phase`.
    pub fn timed<T>(&mut self, phase: Phase, f: impl FnOnce(&mut Session) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(self);
        self.metrics.record_wall(phase, start.elapsed());
        out
    }
}

/// Three fully connected in-process endpoints sharing one link profile.
pub fn establish_inproc_trio(profile: LinkProfile) -> [Session; 3] {
    let session_id: u128 = rand::random();
    let mut sessions: Vec<Session> = Role::ALL
        .iter()
        .map(|&r| Session::new(r, session_id))
        .collect();
    for i in 0..3 {
        for j in (i + 1)..3 {
            let (a, b) = InProcChannel::pair(Role::ALL[i], Role::ALL[j], profile);
            sessions[i].peers.insert(
                Role::ALL[j],
                PeerState {
                    chan: Box::new(a),
                    send_steps: HashMap::new(),
                    recv_steps: HashMap::new(),
                },
            );
            sessions[j].peers.insert(
                Role::ALL[i],
                PeerState {
                    chan: Box::new(b),
                    send_steps: HashMap::new(),
                    recv_steps: HashMap::new(),
                },
            );
        }
    }
    let mut it = sessions.into_iter();
    [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]
}

/// Run the three party closures on their own threads and collect the results.
pub fn run_trio<R0, R1, R2>(
    sessions: [Session; 3],
    f0: impl FnOnce(Session) -> Result<R0> + Send,
    f1: impl FnOnce(Session) -> Result<R1> + Send,
    f2: impl FnOnce(Session) -> Result<R2> + Send,
) -> Result<(R0, R1, R2)>
where
    R0: Send,
    R1: Send,
    R2: Send,
{
    let [s0, s1, s2] = sessions;
    std::thread::scope(|scope| {
        let h0 = scope.spawn(move || f0(s0));
        let h1 = scope.spawn(move || f1(s1));
        let h2 = scope.spawn(move || f2(s2));
        let r0 = h0.join().map_err(|_| Error::validation("party 0 panicked"))??;
        let r1 = h1.join().map_err(|_| Error::validation("party 1 panicked"))??;
        let r2 = h2.join().map_err(|_| Error::validation("party 2 panicked"))??;
        Ok((r0, r1, r2))
    })
}

/// Session handshake: magic "PLLM", version u16 LE, role byte, session id
/// u128 LE.
pub fn encode_hello(role: Role, session_id: u128) -> [u8; 23] {
    let mut out = [0u8; 23];
    out[0..4].copy_from_slice(&MAGIC);
    out[4..6].copy_from_slice(&VERSION.to_le_bytes());
    out[6] = role.index() as u8;
    out[7..23].copy_from_slice(&session_id.to_le_bytes());
    out
}

pub fn decode_hello(buf: &[u8; 23]) -> Result<(Role, u128)> {
    if buf[0..4] != MAGIC {
        return Err(Error::Decode("bad handshake magic".into()));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            ours: VERSION,
            theirs: version,
        });
    }
    let role = Role::from_index(buf[6] as usize)
        .ok_or_else(|| Error::Decode(format!("bad role byte {}", buf[6])))?;
    Ok((role, u128::from_le_bytes(buf[7..23].try_into().unwrap())))
}

/// Addressing for the three-process TCP mode. Lower-indexed roles listen;
/// higher-indexed roles connect: P0 accepts P1 and P2, P1 accepts P2.
#[derive(Debug, Clone)]
pub struct TcpSessionConfig {
    pub role: Role,
    pub session_id: u128,
    /// Address this party listens on (unused for P2).
    pub listen: Option<String>,
    /// Addresses of the lower-indexed peers to connect to, keyed by role.
    pub connect: HashMap<Role, String>,
    pub profile: LinkProfile,
    pub handshake_timeout: Duration,
}

/// Establish a fully connected session over TCP per the addressing rule
/// above. Rejects duplicate roles, session id mismatches, and version skew.
pub fn establish_tcp_session(cfg: &TcpSessionConfig) -> Result<Session> {
    let mut session = Session::new(cfg.role, cfg.session_id);
    let expect_accept: Vec<Role> = Role::ALL
        .iter()
        .copied()
        .filter(|r| r.index() > cfg.role.index())
        .collect();
    let to_connect: Vec<Role> = Role::ALL
        .iter()
        .copied()
        .filter(|r| r.index() < cfg.role.index())
        .collect();

    // Outbound first so listeners are not starved.
    for peer in to_connect {
        let addr = cfg
            .connect
            .get(&peer)
            .ok_or_else(|| Error::validation(format!("no address for {peer}")))?;
        let stream = connect_retry(addr, cfg.handshake_timeout)?;
        let mut stream = stream;
        use std::io::{Read, Write};
        stream.write_all(&encode_hello(cfg.role, cfg.session_id))?;
        let mut buf = [0u8; 23];
        stream.read_exact(&mut buf)?;
        let (their_role, their_sid) = decode_hello(&buf)?;
        if their_role != peer {
            return Err(Error::DuplicateRole(their_role));
        }
        if their_sid != cfg.session_id {
            return Err(Error::Decode("session id mismatch in handshake".into()));
        }
        session.peers.insert(
            peer,
            PeerState {
                chan: Box::new(TcpChannel::new(stream, peer, cfg.profile)?),
                send_steps: HashMap::new(),
                recv_steps: HashMap::new(),
            },
        );
    }

    if !expect_accept.is_empty() {
        let listen = cfg
            .listen
            .as_ref()
            .ok_or_else(|| Error::validation("listen address required"))?;
        let listener = TcpListener::bind(listen)?;
        let deadline = Instant::now() + cfg.handshake_timeout;
        let mut pending: Vec<Role> = expect_accept;
        while !pending.is_empty() {
            if Instant::now() > deadline {
                return Err(Error::Timeout);
            }
            let (mut stream, _) = listener.accept()?;
            use std::io::{Read, Write};
            let mut buf = [0u8; 23];
            stream.read_exact(&mut buf)?;
            let (their_role, their_sid) = decode_hello(&buf)?;
            if !pending.contains(&their_role) {
                return Err(Error::DuplicateRole(their_role));
            }
            if their_sid != cfg.session_id {
                return Err(Error::Decode("session id mismatch in handshake".into()));
            }
            stream.write_all(&encode_hello(cfg.role, cfg.session_id))?;
            pending.retain(|&r| r != their_role);
            session.peers.insert(
                their_role,
                PeerState {
                    chan: Box::new(TcpChannel::new(stream, their_role, cfg.profile)?),
                    send_steps: HashMap::new(),
                    recv_steps: HashMap::new(),
                },
            );
        }
    }
    Ok(session)
}

fn connect_retry(addr: &str, timeout: Duration) -> Result<TcpStream> {
    let deadline = Instant::now() + timeout;
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(_) if Instant::now() < deadline => {
                std::thread::sleep(Duration::from_millis(50));
            }
            Err(_) => return Err(Error::Timeout),
        }
    }
}
