//! Secure permutation of a shared tensor by a permutation known only to P0.
//!
//! Offline, P0 discloses the permutation `pi` to the dealer; the dealer draws
//! masks `r0`, `r1` at the sharing noise scale, sends `delta = pi(r0) - r1`
//! to P0 and `(r0, r1)` to P1. Online, P1 sends `<x>_1 - r0` (one round) and
//! takes `<y>_1 = r1`; P0 computes
//!
//! ```text
//! <y>_0 = pi(<x>_0) + pi(<x>_1 - r0) + delta
//! ```
//!
//! so that `<y>_0 + <y>_1 = pi(x)`. Each mask state is strictly single-use:
//! reusing `r0` across two inputs would reveal the difference of the inputs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::perm::AnyPerm;
use crate::sharing::{gaussian_mask, ScaleHint};
use crate::tensor::Tensor;
use crate::transport::{Message, Phase, ProtocolId, Role, Session};

/// P0's half of one permutation mask: the permutation itself plus `delta`.
pub struct PermMaskP0 {
    perm: AnyPerm,
    delta: Tensor,
    used: bool,
}

/// P1's half: the two masks.
pub struct PermMaskP1 {
    r0: Tensor,
    r1: Tensor,
    used: bool,
}

/// Pure P0-side output share; exposed for transport-free statistics.
pub fn perm_y0(perm: &AnyPerm, x0: &Tensor, x1_minus_r0: &Tensor, delta: &Tensor) -> Result<Tensor> {
    perm.apply(x0)?.add(&perm.apply(x1_minus_r0)?)?.add(delta)
}

impl PermMaskP0 {
    /// Offline: disclose `pi` to the dealer, receive `delta`. Two offline
    /// rounds on P0's side (independent of the tensor size).
    ///
    /// `protocol` tags the traffic: standalone permutations use `Perm`, the
    /// nonlinear and prediction protocols pass their own id so the per
    /// protocol byte/round breakdown attributes inner flights to the outer
    /// protocol.
    pub fn offline(sess: &mut Session, perm: AnyPerm, protocol: ProtocolId) -> Result<PermMaskP0> {
        sess.send(
            Role::P2,
            Message::u64s(Phase::Offline, protocol, perm.encode()),
        )?;
        let delta = sess
            .recv_expect(Role::P2, Phase::Offline, protocol)?
            .body
            .tensor()?;
        if delta.shape() != perm.shape().as_slice() {
            return Err(Error::Decode("delta shape mismatch".into()));
        }
        Ok(PermMaskP0 {
            perm,
            delta,
            used: false,
        })
    }

    pub fn perm(&self) -> &AnyPerm {
        &self.perm
    }

    /// Online: receive `<x>_1 - r0` and fold; consumes the mask.
    pub fn online(
        &mut self,
        sess: &mut Session,
        x0: &Tensor,
        protocol: ProtocolId,
    ) -> Result<Tensor> {
        if self.used {
            return Err(Error::StateReuse("permutation mask already consumed"));
        }
        self.used = true;
        let t = sess
            .recv_expect(Role::P1, Phase::Online, protocol)?
            .body
            .tensor()?;
        perm_y0(&self.perm, x0, &t, &self.delta)
    }
}

impl PermMaskP1 {
    /// Offline: receive `(r0, r1)` from the dealer in one flight.
    pub fn offline(sess: &mut Session, shape: &[usize], protocol: ProtocolId) -> Result<PermMaskP1> {
        let msg = sess.recv_expect(Role::P2, Phase::Offline, protocol)?;
        let parts = super::unpack_tensors(msg.body, &[shape.to_vec(), shape.to_vec()])?;
        let mut it = parts.into_iter();
        Ok(PermMaskP1 {
            r0: it.next().unwrap(),
            r1: it.next().unwrap(),
            used: false,
        })
    }

    /// Online: send `<x>_1 - r0` (the protocol's single online round) and
    /// adopt `r1` as the output share; consumes the mask.
    pub fn online(
        &mut self,
        sess: &mut Session,
        x1: &Tensor,
        protocol: ProtocolId,
    ) -> Result<Tensor> {
        if self.used {
            return Err(Error::StateReuse("permutation mask already consumed"));
        }
        self.used = true;
        let t = x1.sub(&self.r0)?;
        sess.send(Role::P0, Message::f32(Phase::Online, protocol, t))?;
        Ok(self.r1.clone())
    }
}

/// Dealer side of one permutation offline: receive `pi` from P0, draw the
/// masks, distribute `delta` and `(r0, r1)` in one batched round.
pub fn perm_dealer_offline<R: Rng>(
    sess: &mut Session,
    hint: &ScaleHint,
    k: f32,
    protocol: ProtocolId,
    rng: &mut R,
) -> Result<()> {
    let enc = sess
        .recv_expect(Role::P0, Phase::Offline, protocol)?
        .body
        .u64s()?;
    let perm = AnyPerm::decode(&enc)?;
    let shape = perm.shape();
    let r0 = gaussian_mask(&shape, hint, k, rng.random());
    let r1 = gaussian_mask(&shape, hint, k, rng.random());
    let delta = perm.apply(&r0)?.sub(&r1)?;
    sess.send_batch(vec![
        (Role::P0, Message::f32(Phase::Offline, protocol, delta)),
        (
            Role::P1,
            super::pack_tensors(Phase::Offline, protocol, &[&r0, &r1]),
        ),
    ])
}
