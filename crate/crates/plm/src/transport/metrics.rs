//! Round/byte accounting. Counters only ever increase; snapshots are taken
//! under one lock so they are internally consistent.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::wire::{Phase, ProtocolId};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ProtoStats {
    pub rounds: u64,
    pub bytes_sent: u64,
    pub bytes_recv: u64,
}

impl ProtoStats {
    pub fn bytes_total(&self) -> u64 {
        self.bytes_sent + self.bytes_recv
    }

    fn absorb(&mut self, other: &ProtoStats) {
        self.rounds += other.rounds;
        self.bytes_sent += other.bytes_sent;
        self.bytes_recv += other.bytes_recv;
    }
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhaseStats {
    pub rounds: u64,
    pub bytes_sent: u64,
    pub bytes_recv: u64,
    pub wall_s: f64,
    /// Per-protocol breakdown, keyed by protocol name.
    pub by_protocol: BTreeMap<String, ProtoStats>,
}

impl PhaseStats {
    pub fn bytes_total(&self) -> u64 {
        self.bytes_sent + self.bytes_recv
    }
}

/// One party's view of a session's communication costs.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Transcript {
    pub preparation: PhaseStats,
    pub offline: PhaseStats,
    pub online: PhaseStats,
}

impl Transcript {
    pub fn phase(&self, phase: Phase) -> &PhaseStats {
        match phase {
            Phase::Preparation => &self.preparation,
            Phase::Offline => &self.offline,
            Phase::Online => &self.online,
        }
    }

    fn phase_mut(&mut self, phase: Phase) -> &mut PhaseStats {
        match phase {
            Phase::Preparation => &mut self.preparation,
            Phase::Offline => &mut self.offline,
            Phase::Online => &mut self.online,
        }
    }

    /// Accumulate another transcript (or delta) into this one.
    pub fn absorb(&mut self, other: &Transcript) {
        for phase in Phase::ALL {
            let o = other.phase(phase);
            let p = self.phase_mut(phase);
            p.rounds += o.rounds;
            p.bytes_sent += o.bytes_sent;
            p.bytes_recv += o.bytes_recv;
            p.wall_s += o.wall_s;
            for (name, stats) in &o.by_protocol {
                p.by_protocol.entry(name.clone()).or_default().absorb(stats);
            }
        }
    }

    /// Per-phase and per-protocol difference `self - earlier`; counters never
    /// decrease, so this is well defined for snapshots of the same session.
    pub fn delta_since(&self, earlier: &Transcript) -> Transcript {
        let mut out = Transcript::default();
        for phase in Phase::ALL {
            let now = self.phase(phase);
            let then = earlier.phase(phase);
            let o = out.phase_mut(phase);
            o.rounds = now.rounds - then.rounds;
            o.bytes_sent = now.bytes_sent - then.bytes_sent;
            o.bytes_recv = now.bytes_recv - then.bytes_recv;
            o.wall_s = now.wall_s - then.wall_s;
            for (name, stats) in &now.by_protocol {
                let mut d = *stats;
                if let Some(prev) = then.by_protocol.get(name) {
                    d.rounds -= prev.rounds;
                    d.bytes_sent -= prev.bytes_sent;
                    d.bytes_recv -= prev.bytes_recv;
                }
                if d != ProtoStats::default() {
                    o.by_protocol.insert(name.clone(), d);
                }
            }
        }
        out
    }
}

/// Shared counter handle; cloned into every channel of a session.
#[derive(Debug, Clone, Default)]
pub struct Metrics {
    inner: Arc<Mutex<Transcript>>,
}

impl Metrics {
    pub fn new() -> Self {
        Metrics::default()
    }

    pub fn record_round(&self, phase: Phase, protocol: ProtocolId) {
        let mut t = self.inner.lock().unwrap();
        let p = t.phase_mut(phase);
        p.rounds += 1;
        p.by_protocol
            .entry(protocol.name().to_string())
            .or_default()
            .rounds += 1;
    }

    pub fn record_sent(&self, phase: Phase, protocol: ProtocolId, bytes: u64) {
        let mut t = self.inner.lock().unwrap();
        let p = t.phase_mut(phase);
        p.bytes_sent += bytes;
        p.by_protocol
            .entry(protocol.name().to_string())
            .or_default()
            .bytes_sent += bytes;
    }

    pub fn record_recv(&self, phase: Phase, protocol: ProtocolId, bytes: u64) {
        let mut t = self.inner.lock().unwrap();
        let p = t.phase_mut(phase);
        p.bytes_recv += bytes;
        p.by_protocol
            .entry(protocol.name().to_string())
            .or_default()
            .bytes_recv += bytes;
    }

    pub fn record_wall(&self, phase: Phase, wall: Duration) {
        let mut t = self.inner.lock().unwrap();
        t.phase_mut(phase).wall_s += wall.as_secs_f64();
    }

    pub fn snapshot(&self) -> Transcript {
        self.inner.lock().unwrap().clone()
    }
}

/// Checks the "totals equal sum of breakdowns" invariant.
pub fn totals_consistent(t: &Transcript) -> bool {
    Phase::ALL.iter().all(|&phase| {
        let p = t.phase(phase);
        let mut sum = ProtoStats::default();
        for s in p.by_protocol.values() {
            sum.absorb(s);
        }
        sum.rounds == p.rounds && sum.bytes_sent == p.bytes_sent && sum.bytes_recv == p.bytes_recv
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_transcript_is_zero() {
        let m = Metrics::new();
        let t = m.snapshot();
        assert_eq!(t.online.rounds, 0);
        assert_eq!(t.online.bytes_total(), 0);
        assert_eq!(t.preparation, PhaseStats::default());
    }

    #[test]
    fn totals_match_breakdown() {
        let m = Metrics::new();
        m.record_round(Phase::Online, ProtocolId::Perm);
        m.record_sent(Phase::Online, ProtocolId::Perm, 100);
        m.record_round(Phase::Online, ProtocolId::MulF);
        m.record_sent(Phase::Online, ProtocolId::MulF, 50);
        m.record_recv(Phase::Offline, ProtocolId::MulF, 7);
        let t = m.snapshot();
        assert!(totals_consistent(&t));
        assert_eq!(t.online.rounds, 2);
        assert_eq!(t.online.bytes_sent, 150);
        assert_eq!(t.offline.bytes_recv, 7);
    }

    #[test]
    fn delta_since() {
        let m = Metrics::new();
        m.record_round(Phase::Online, ProtocolId::Perm);
        let a = m.snapshot();
        m.record_round(Phase::Online, ProtocolId::Perm);
        m.record_sent(Phase::Online, ProtocolId::Perm, 10);
        let b = m.snapshot();
        let d = b.delta_since(&a);
        assert_eq!(d.online.rounds, 1);
        assert_eq!(d.online.bytes_sent, 10);
        assert!(totals_consistent(&d));
    }
}
