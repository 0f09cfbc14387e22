//! Fixed-operand secure multiplication.
//!
//! P0 holds a plaintext operand `X` (typically a weight matrix) that is fixed
//! across invocations; `Y` arrives additively shared. Preparation masks `X`
//! once: the dealer sends P0 a mask seed, P0 derives `U` at scale
//! `k * rms(X)` and publishes `X - U` to P1. Each invocation then consumes
//! one offline record `(<V>, <W>)` with `W = op(U, V)`, and the single online
//! round reconstructs `Y - V` by a cross-exchange, after which
//!
//! ```text
//! <Z>_0 = op(X, Y - V) + op(X - U, <V>_0) + <W>_0
//! <Z>_1 =               op(X - U, <V>_1) + <W>_1
//! ```
//!
//! sum to `op(X, Y)` exactly (up to f32 rounding): the cross terms
//! `-XV + (X-U)V + UV` cancel.

use std::collections::VecDeque;

use rand::Rng;

use super::{pack_tensors, unpack_tensors};
use crate::error::{Error, Result};
use crate::sharing::{gaussian_mask, ScaleHint};
use crate::tensor::{MulOp, Tensor};
use crate::transport::{Message, Phase, ProtocolId, Role, Session};

/// Largest element count sent in one preparation frame; bigger masked
/// operands go out in row chunks so neither side materializes the frame and
/// the tensor twice at full size.
pub const PREP_CHUNK_ELEMS: usize = 1 << 22;

/// `<Z>_0` from P0's view. Pure so tests can drive the algebra without a
/// transport.
pub fn mul_f_z0(
    op: MulOp,
    x: &Tensor,
    y_minus_v: &Tensor,
    x_minus_u: &Tensor,
    v0: &Tensor,
    w0: &Tensor,
) -> Result<Tensor> {
    op.apply(x, y_minus_v)?
        .add(&op.apply(x_minus_u, v0)?)?
        .add(w0)
}

/// `<Z>_1` from P1's view.
pub fn mul_f_z1(op: MulOp, x_minus_u: &Tensor, v1: &Tensor, w1: &Tensor) -> Result<Tensor> {
    op.apply(x_minus_u, v1)?.add(w1)
}

/// P0/P1 state for one multiplication site.
pub struct MulFixedParty {
    role: Role,
    op: MulOp,
    x: Option<Tensor>,
    x_minus_u: Option<Tensor>,
    queue: VecDeque<(Tensor, Tensor)>,
}

impl MulFixedParty {
    pub fn new_p0(op: MulOp, x: Tensor) -> Self {
        MulFixedParty {
            role: Role::P0,
            op,
            x: Some(x),
            x_minus_u: None,
            queue: VecDeque::new(),
        }
    }

    pub fn new_p1(op: MulOp) -> Self {
        MulFixedParty {
            role: Role::P1,
            op,
            x: None,
            x_minus_u: None,
            queue: VecDeque::new(),
        }
    }

    pub fn op(&self) -> MulOp {
        self.op
    }

    pub fn x_shape(&self) -> Option<&[usize]> {
        self.x
            .as_ref()
            .or(self.x_minus_u.as_ref())
            .map(|t| t.shape())
    }

    /// Number of queued offline records not yet consumed.
    pub fn available(&self) -> usize {
        self.queue.len()
    }

    /// Mask the fixed operand. Idempotent: a second call is a local no-op and
    /// sends nothing, on every role.
    pub fn prepare(&mut self, sess: &mut Session, hint_x: &ScaleHint, k: f32) -> Result<()> {
        if self.x_minus_u.is_some() {
            return Ok(());
        }
        match self.role {
            Role::P0 => {
                let x = self
                    .x
                    .as_ref()
                    .ok_or_else(|| Error::validation("P0 state without X"))?;
                let seed_msg = sess.recv_expect(Role::P2, Phase::Preparation, ProtocolId::MulF)?;
                let seed = *seed_msg
                    .body
                    .u64s()?
                    .first()
                    .ok_or_else(|| Error::Decode("empty mask seed".into()))?;
                let u = gaussian_mask(x.shape(), hint_x, k, seed);
                let xmu = x.sub(&u)?;
                send_chunked(sess, Role::P1, &xmu)?;
                self.x_minus_u = Some(xmu);
            }
            Role::P1 => {
                self.x_minus_u = Some(recv_chunked(sess, Role::P0)?);
            }
            Role::P2 => return Err(Error::validation("dealer has no party state")),
        }
        Ok(())
    }

    /// Receive one offline record from the dealer and queue it.
    pub fn offline_recv(&mut self, sess: &mut Session, shape_y: &[usize]) -> Result<()> {
        let x_shape = self
            .x_minus_u
            .as_ref()
            .ok_or(Error::StateReuse("offline before preparation"))?
            .shape()
            .to_vec();
        let w_shape = self.op.output_shape(&x_shape, shape_y)?;
        let msg = sess.recv_expect(Role::P2, Phase::Offline, ProtocolId::MulF)?;
        let parts = unpack_tensors(msg.body, &[shape_y.to_vec(), w_shape])?;
        let mut it = parts.into_iter();
        self.queue
            .push_back((it.next().unwrap(), it.next().unwrap()));
        Ok(())
    }

    /// One online invocation: a single cross-exchange of `<Y>_i - <V>_i`,
    /// then local share algebra. Consumes one offline record.
    pub fn online(&mut self, sess: &mut Session, y_share: &Tensor) -> Result<Tensor> {
        let (v, w) = self
            .queue
            .pop_front()
            .ok_or(Error::MaterialExhausted("mul_f offline record"))?;
        let d = y_share.sub(&v)?;
        let other = sess
            .exchange(
                self.role.counterpart(),
                Message::f32(Phase::Online, ProtocolId::MulF, d.clone()),
            )?
            .body
            .tensor()?;
        let y_minus_v = d.add(&other)?;
        let xmu = self.x_minus_u.as_ref().unwrap();
        match self.role {
            Role::P0 => mul_f_z0(self.op, self.x.as_ref().unwrap(), &y_minus_v, xmu, &v, &w),
            Role::P1 => mul_f_z1(self.op, xmu, &v, &w),
            Role::P2 => unreachable!(),
        }
    }
}

/// Dealer state for the same site. Holds only the mask seed and the scale
/// hints; `U` is re-derived on demand (and cached when small) so large
/// operands do not pin memory between offline calls.
pub struct MulFixedDealer {
    op: MulOp,
    shape_x: Vec<usize>,
    hint_x: ScaleHint,
    k: f32,
    u_seed: Option<u64>,
    u_cached: Option<Tensor>,
}

impl MulFixedDealer {
    pub fn new(op: MulOp, shape_x: Vec<usize>, hint_x: ScaleHint, k: f32) -> Self {
        MulFixedDealer {
            op,
            shape_x,
            hint_x,
            k,
            u_seed: None,
            u_cached: None,
        }
    }

    /// Draw the mask seed and hand it to P0. Idempotent like the party side.
    pub fn prepare<R: Rng>(&mut self, sess: &mut Session, rng: &mut R) -> Result<()> {
        if self.u_seed.is_some() {
            return Ok(());
        }
        let seed: u64 = rng.random();
        self.u_seed = Some(seed);
        sess.send(
            Role::P0,
            Message::u64s(Phase::Preparation, ProtocolId::MulF, vec![seed]),
        )
    }

    fn u(&mut self) -> Result<Tensor> {
        if let Some(u) = &self.u_cached {
            return Ok(u.clone());
        }
        let seed = self
            .u_seed
            .ok_or(Error::StateReuse("offline before preparation"))?;
        let u = gaussian_mask(&self.shape_x, &self.hint_x, self.k, seed);
        if u.len() <= PREP_CHUNK_ELEMS {
            self.u_cached = Some(u.clone());
        }
        Ok(u)
    }

    /// Produce one offline record `(<V>, <W>)` and distribute the shares to
    /// both parties in a single batched round.
    pub fn offline_one<R: Rng>(
        &mut self,
        sess: &mut Session,
        shape_y: &[usize],
        hint_y: &ScaleHint,
        rng: &mut R,
    ) -> Result<()> {
        let u = self.u()?;
        let v0 = gaussian_mask(shape_y, hint_y, self.k, rng.random());
        let v1 = gaussian_mask(shape_y, hint_y, self.k, rng.random());
        let v = v0.add(&v1)?;
        let w = self.op.apply(&u, &v)?;
        drop(u);
        let w_hint = ScaleHint::configured(self.hint_x.rms * hint_y.rms);
        let w0 = gaussian_mask(w.shape(), &w_hint, self.k, rng.random());
        let w1 = w.sub(&w0)?;
        sess.send_batch(vec![
            (
                Role::P0,
                pack_tensors(Phase::Offline, ProtocolId::MulF, &[&v0, &w0]),
            ),
            (
                Role::P1,
                pack_tensors(Phase::Offline, ProtocolId::MulF, &[&v1, &w1]),
            ),
        ])
    }
}

fn send_chunked(sess: &mut Session, to: Role, t: &Tensor) -> Result<()> {
    let cols = if t.rows() == 0 { 1 } else { t.len() / t.rows() };
    let rows_per = (PREP_CHUNK_ELEMS / cols.max(1)).max(1);
    let n_chunks = t.rows().div_ceil(rows_per).max(1);
    sess.send(
        to,
        Message::u64s(
            Phase::Preparation,
            ProtocolId::MulF,
            vec![n_chunks as u64],
        ),
    )?;
    if n_chunks == 1 {
        return sess.send(
            to,
            Message::f32(Phase::Preparation, ProtocolId::MulF, t.clone()),
        );
    }
    for c in 0..n_chunks {
        let r0 = c * rows_per;
        let r1 = (r0 + rows_per).min(t.rows());
        let chunk = Tensor::new(
            vec![r1 - r0, cols],
            t.data()[r0 * cols..r1 * cols].to_vec(),
        )?;
        sess.send(to, Message::f32(Phase::Preparation, ProtocolId::MulF, chunk))?;
    }
    Ok(())
}

fn recv_chunked(sess: &mut Session, from: Role) -> Result<Tensor> {
    let head = sess.recv_expect(from, Phase::Preparation, ProtocolId::MulF)?;
    let n_chunks = *head
        .body
        .u64s()?
        .first()
        .ok_or_else(|| Error::Decode("empty chunk count".into()))? as usize;
    if n_chunks == 1 {
        return sess
            .recv_expect(from, Phase::Preparation, ProtocolId::MulF)?
            .body
            .tensor();
    }
    let mut acc: Option<Tensor> = None;
    for _ in 0..n_chunks {
        let chunk = sess
            .recv_expect(from, Phase::Preparation, ProtocolId::MulF)?
            .body
            .tensor()?;
        acc = Some(match acc {
            None => chunk,
            Some(t) => t.concat_rows(&chunk)?,
        });
    }
    acc.ok_or_else(|| Error::Decode("zero preparation chunks".into()))
}
