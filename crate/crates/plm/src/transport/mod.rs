//! Party endpoints, phase-tagged messaging, round/byte accounting, and link
//! emulation.
//!
//! Round definition (pinned here because protocol tables count rounds): a set
//! of flights with no sequential data dependency counts once. Concretely,
//! every `send`/`recv`/`exchange` call increments the calling party's round
//! counter for the message's (phase, protocol) by one, except that the two
//! opposite flights of an `exchange` count as a single round, and a
//! `send_batch` of independent flights counts once. A flight whose payload
//! depends on a value received in the current step is a new call and hence a
//! new round.

mod channel;
mod link;
mod metrics;
mod session;
mod wire;

pub use channel::{InProcChannel, RawChannel, Recorder, RecorderEntry, TcpChannel};
pub use link::LinkProfile;
pub use metrics::{totals_consistent, Metrics, PhaseStats, ProtoStats, Transcript};
pub use session::{
    establish_inproc_trio, establish_tcp_session, run_trio, Session, TcpSessionConfig,
};
pub use wire::{Body, Dtype, Message, Phase, ProtocolId, MAGIC, VERSION, WIRE_HEADER_LEN};

/// Party identity. P0 is the model provider, P1 the user, P2 the dealer that
/// only participates in the preparation and offline phases.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub enum Role {
    P0,
    P1,
    P2,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::P0, Role::P1, Role::P2];

    pub fn index(self) -> usize {
        match self {
            Role::P0 => 0,
            Role::P1 => 1,
            Role::P2 => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Role> {
        Role::ALL.get(i).copied()
    }

    /// The other computing party (P0 <-> P1).
    pub fn counterpart(self) -> Role {
        match self {
            Role::P0 => Role::P1,
            Role::P1 => Role::P0,
            Role::P2 => Role::P2,
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Role::P0 => write!(f, "p0"),
            Role::P1 => write!(f, "p1"),
            Role::P2 => write!(f, "p2"),
        }
    }
}

impl std::str::FromStr for Role {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "p0" | "0" => Ok(Role::P0),
            "p1" | "1" => Ok(Role::P1),
            "p2" | "2" => Ok(Role::P2),
            _ => Err(crate::error::Error::validation(format!("unknown role {s}"))),
        }
    }
}
