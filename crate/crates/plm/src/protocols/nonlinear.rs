//! Nonlinear evaluation on shared data via permuted plaintext disclosure.
//!
//! To evaluate `f` on a shared `x`, P0 samples a random permutation `pi`,
//! the shared input is securely permuted (P0 keeps `pi` secret from P1),
//! P0 then sends its share of `pi(x)` so P1 reconstructs the permuted
//! plaintext, applies `f`, and the result is securely permuted back with
//! `pi^-1`. Three online rounds on each computing party:
//!
//! 1. P1 -> P0: `<x>_1 - r0` (forward permutation),
//! 2. P0 -> P1: `<pi(x)>_0` (reconstruct the permuted value on P1),
//! 3. P1 -> P0: `f(pi(x)) - r0'` (inverse permutation; P0 holds a zero
//!    share of the function value).
//!
//! This is only sound for `f` that commutes with the permutation class in
//! use: elementwise functions with any permutation, row-wise reductions
//! (softmax, mean/variance normalization) with the 2D row-and-element
//! permutation, whose keyspace `n! (d!)^n` makes inverting the disclosure
//! infeasible for realistic shapes.

use rand::Rng;

use super::perm_proto::{perm_dealer_offline, PermMaskP0, PermMaskP1};
use crate::error::Result;
use crate::perm::AnyPerm;
use crate::sharing::ScaleHint;
use crate::tensor::Tensor;
use crate::transport::{Message, Phase, ProtocolId, Role, Session};

/// The nonlinearities the engine evaluates through this protocol. All of
/// them commute with the permutation class they are invoked with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NonlinFn {
    Identity,
    /// tanh-form approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    Gelu,
    /// Row-wise softmax with max subtraction.
    SoftmaxRows,
    /// Row-wise `(x - mean) / sqrt(var + eps)`, population variance; the
    /// affine scale/shift of layer normalization is public and applied
    /// outside the protocol.
    NormalizeRows { eps: f32 },
}

impl NonlinFn {
    pub fn apply(&self, x: &Tensor) -> Tensor {
        match self {
            NonlinFn::Identity => x.clone(),
            NonlinFn::Gelu => {
                let c = (2.0f64 / std::f64::consts::PI).sqrt();
                let data = x
                    .data()
                    .iter()
                    .map(|&v| {
                        let v = v as f64;
                        (0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())) as f32
                    })
                    .collect();
                Tensor::new(x.shape().to_vec(), data).unwrap()
            }
            NonlinFn::SoftmaxRows => {
                let rows = x.rows();
                let cols = x.len() / rows.max(1);
                let mut out = vec![0.0f32; x.len()];
                for r in 0..rows {
                    let row = x.row(r);
                    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let mut sum = 0.0f64;
                    for (i, &v) in row.iter().enumerate() {
                        let e = ((v - m) as f64).exp();
                        out[r * cols + i] = e as f32;
                        sum += e;
                    }
                    for i in 0..cols {
                        out[r * cols + i] = (out[r * cols + i] as f64 / sum) as f32;
                    }
                }
                Tensor::new(x.shape().to_vec(), out).unwrap()
            }
            NonlinFn::NormalizeRows { eps } => {
                let rows = x.rows();
                let cols = x.len() / rows.max(1);
                let mut out = vec![0.0f32; x.len()];
                for r in 0..rows {
                    let row = x.row(r);
                    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
                    let var = row
                        .iter()
                        .map(|&v| (v as f64 - mean).powi(2))
                        .sum::<f64>()
                        / cols as f64;
                    let inv = 1.0 / (var + *eps as f64).sqrt();
                    for i in 0..cols {
                        out[r * cols + i] = ((row[i] as f64 - mean) * inv) as f32;
                    }
                }
                Tensor::new(x.shape().to_vec(), out).unwrap()
            }
        }
    }
}

/// P0's masks for one nonlinear evaluation: a forward and an inverse
/// permutation mask over the same secret permutation.
pub struct NonlinearMaskP0 {
    fwd: PermMaskP0,
    inv: PermMaskP0,
}

/// P1's masks for one nonlinear evaluation.
pub struct NonlinearMaskP1 {
    fwd: PermMaskP1,
    inv: PermMaskP1,
}

impl NonlinearMaskP0 {
    /// Offline: register `perm` and its inverse with the dealer. `perm` must
    /// come from the commuting class for the intended function.
    pub fn offline(sess: &mut Session, perm: AnyPerm) -> Result<NonlinearMaskP0> {
        let inv = perm.inverse();
        Ok(NonlinearMaskP0 {
            fwd: PermMaskP0::offline(sess, perm, ProtocolId::Nonlinear)?,
            inv: PermMaskP0::offline(sess, inv, ProtocolId::Nonlinear)?,
        })
    }

    /// Online: three rounds, P0 ends with `<f(x)>_0`.
    pub fn online(&mut self, sess: &mut Session, x0: &Tensor) -> Result<Tensor> {
        let pix0 = self.fwd.online(sess, x0, ProtocolId::Nonlinear)?;
        sess.send(
            Role::P1,
            Message::f32(Phase::Online, ProtocolId::Nonlinear, pix0),
        )?;
        // P0 holds the zero share of the function value going into the
        // inverse permutation.
        let zero = Tensor::zeros(x0.shape().to_vec());
        self.inv.online(sess, &zero, ProtocolId::Nonlinear)
    }
}

impl NonlinearMaskP1 {
    pub fn offline(sess: &mut Session, shape: &[usize]) -> Result<NonlinearMaskP1> {
        Ok(NonlinearMaskP1 {
            fwd: PermMaskP1::offline(sess, shape, ProtocolId::Nonlinear)?,
            inv: PermMaskP1::offline(sess, shape, ProtocolId::Nonlinear)?,
        })
    }

    /// Online: three rounds, P1 ends with `<f(x)>_1`. P1 sees the permuted
    /// plaintext, which is the protocol's disclosed quantity.
    pub fn online(&mut self, sess: &mut Session, x1: &Tensor, f: NonlinFn) -> Result<Tensor> {
        let pix1 = self.fwd.online(sess, x1, ProtocolId::Nonlinear)?;
        let pix0 = sess
            .recv_expect(Role::P0, Phase::Online, ProtocolId::Nonlinear)?
            .body
            .tensor()?;
        let pix = pix0.add(&pix1)?;
        let fx = f.apply(&pix);
        self.inv.online(sess, &fx, ProtocolId::Nonlinear)
    }
}

/// Dealer side: serve the two permutation offlines of one evaluation.
/// `hint_in` scales the forward masks (input magnitude), `hint_out` the
/// inverse masks (function output magnitude).
pub fn nonlinear_dealer_offline<R: Rng>(
    sess: &mut Session,
    hint_in: &ScaleHint,
    hint_out: &ScaleHint,
    k: f32,
    rng: &mut R,
) -> Result<()> {
    perm_dealer_offline(sess, hint_in, k, ProtocolId::Nonlinear, rng)?;
    perm_dealer_offline(sess, hint_out, k, ProtocolId::Nonlinear, rng)
}
