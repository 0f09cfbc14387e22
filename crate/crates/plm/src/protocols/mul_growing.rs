//! Growing-operand secure multiplication.
//!
//! `X` accumulates rows across invocations (the key/value cache pattern):
//! step `t` appends new rows `X'` and multiplies the full `X` with a fresh
//! shared `Y`. Masks for already-appended rows are reused, so each offline
//! step only draws `U'` for the new rows plus a fresh `(V, W)` with
//! `W = op(U_full, V)`. The single online round cross-exchanges the
//! concatenation of `X' - U'` (new rows only) and `Y - V`; both parties then
//! extend their running public `X - U` and compute
//!
//! ```text
//! <Z>_0 = op(X-U, Y-V) + op(X-U, <V>_0) + op(<U>_0, Y-V) + <W>_0
//! <Z>_1 =                op(X-U, <V>_1) + op(<U>_1, Y-V) + <W>_1
//! ```
//!
//! whose sum telescopes to `op(X, Y)`. With `X` initially empty, step 1
//! degenerates to a plain secure multiplication of `X'` by `Y`.

use std::collections::VecDeque;

use rand::Rng;

use super::{pack_tensors, unpack_tensors};
use crate::error::{Error, Result};
use crate::sharing::{gaussian_mask, ScaleHint};
use crate::tensor::{MulOp, Tensor};
use crate::transport::{Phase, ProtocolId, Role, Session};

/// `<Z>_0` for the growing variant; pure for transport-free tests.
pub fn mul_g_z0(
    op: MulOp,
    x_minus_u: &Tensor,
    y_minus_v: &Tensor,
    u0: &Tensor,
    v0: &Tensor,
    w0: &Tensor,
) -> Result<Tensor> {
    op.apply(x_minus_u, y_minus_v)?
        .add(&op.apply(x_minus_u, v0)?)?
        .add(&op.apply(u0, y_minus_v)?)?
        .add(w0)
}

/// `<Z>_1` for the growing variant.
pub fn mul_g_z1(
    op: MulOp,
    x_minus_u: &Tensor,
    y_minus_v: &Tensor,
    u1: &Tensor,
    v1: &Tensor,
    w1: &Tensor,
) -> Result<Tensor> {
    op.apply(x_minus_u, v1)?
        .add(&op.apply(u1, y_minus_v)?)?
        .add(w1)
}

struct GrowingRecord {
    u_new: Tensor,
    v: Tensor,
    w: Tensor,
}

/// P0/P1 state for one growing multiplication site.
pub struct MulGrowingParty {
    role: Role,
    op: MulOp,
    /// Public masked operand accumulated so far (empty before step 1).
    x_minus_u: Tensor,
    /// This party's share of the accumulated mask.
    u_share: Tensor,
    queue: VecDeque<GrowingRecord>,
}

impl MulGrowingParty {
    pub fn new(role: Role, op: MulOp) -> Result<Self> {
        if role == Role::P2 {
            return Err(Error::validation("dealer has no party state"));
        }
        Ok(MulGrowingParty {
            role,
            op,
            x_minus_u: Tensor::from_vec(vec![]),
            u_share: Tensor::from_vec(vec![]),
            queue: VecDeque::new(),
        })
    }

    /// Rows of `X` accumulated so far.
    pub fn rows(&self) -> usize {
        if self.x_minus_u.is_empty() {
            0
        } else {
            self.x_minus_u.rows()
        }
    }

    pub fn available(&self) -> usize {
        self.queue.len()
    }

    /// Receive one growth step's offline record `(<U'>, <V>, <W>)`.
    pub fn offline_recv(
        &mut self,
        sess: &mut Session,
        shape_x_new: &[usize],
        shape_y: &[usize],
    ) -> Result<()> {
        let full_rows = self.rows()
            + self.queue.iter().map(|r| r.u_new.rows()).sum::<usize>()
            + shape_x_new[0];
        let w_shape = self
            .op
            .output_shape(&[full_rows, shape_x_new[1]], shape_y)?;
        let msg = sess.recv_expect(Role::P2, Phase::Offline, ProtocolId::MulG)?;
        let parts = unpack_tensors(
            msg.body,
            &[shape_x_new.to_vec(), shape_y.to_vec(), w_shape],
        )?;
        let mut it = parts.into_iter();
        self.queue.push_back(GrowingRecord {
            u_new: it.next().unwrap(),
            v: it.next().unwrap(),
            w: it.next().unwrap(),
        });
        Ok(())
    }

    /// One online growth step: append `X'` (shared), multiply the full `X`
    /// with `Y` (shared). A single cross-exchange carries both differences.
    pub fn online(
        &mut self,
        sess: &mut Session,
        x_new_share: &Tensor,
        y_share: &Tensor,
    ) -> Result<Tensor> {
        let rec = self
            .queue
            .pop_front()
            .ok_or(Error::MaterialExhausted("mul_g offline record"))?;
        let dx = x_new_share.sub(&rec.u_new)?;
        let dy = y_share.sub(&rec.v)?;
        let out = pack_tensors(Phase::Online, ProtocolId::MulG, &[&dx, &dy]);
        let reply = sess.exchange(self.role.counterpart(), out)?;
        let parts = unpack_tensors(
            reply.body,
            &[dx.shape().to_vec(), dy.shape().to_vec()],
        )?;
        let mut it = parts.into_iter();
        let (odx, ody) = (it.next().unwrap(), it.next().unwrap());
        let x_new_minus_u = dx.add(&odx)?;
        let y_minus_v = dy.add(&ody)?;
        self.x_minus_u = self.x_minus_u.concat_rows(&x_new_minus_u)?;
        self.u_share = self.u_share.concat_rows(&rec.u_new)?;
        match self.role {
            Role::P0 => mul_g_z0(
                self.op,
                &self.x_minus_u,
                &y_minus_v,
                &self.u_share,
                &rec.v,
                &rec.w,
            ),
            Role::P1 => mul_g_z1(
                self.op,
                &self.x_minus_u,
                &y_minus_v,
                &self.u_share,
                &rec.v,
                &rec.w,
            ),
            Role::P2 => unreachable!(),
        }
    }
}

/// Dealer state: the full mask accumulated in the clear (the dealer generated
/// it, so no secret leaks) plus the scale hints for new draws.
pub struct MulGrowingDealer {
    op: MulOp,
    hint_x: ScaleHint,
    k: f32,
    u_full: Tensor,
    u0_full: Tensor,
}

impl MulGrowingDealer {
    pub fn new(op: MulOp, hint_x: ScaleHint, k: f32) -> Self {
        MulGrowingDealer {
            op,
            hint_x,
            k,
            u_full: Tensor::from_vec(vec![]),
            u0_full: Tensor::from_vec(vec![]),
        }
    }

    pub fn rows(&self) -> usize {
        if self.u_full.is_empty() {
            0
        } else {
            self.u_full.rows()
        }
    }

    /// One growth step's material: draw `U'` shares for the new rows, a fresh
    /// shared `V`, and share `W = op(U_full, V)`; distribute in one batched
    /// round.
    pub fn offline_step<R: Rng>(
        &mut self,
        sess: &mut Session,
        shape_x_new: &[usize],
        shape_y: &[usize],
        hint_y: &ScaleHint,
        rng: &mut R,
    ) -> Result<()> {
        let u0_new = gaussian_mask(shape_x_new, &self.hint_x, self.k, rng.random());
        let u1_new = gaussian_mask(shape_x_new, &self.hint_x, self.k, rng.random());
        let u_new = u0_new.add(&u1_new)?;
        self.u_full = self.u_full.concat_rows(&u_new)?;
        self.u0_full = self.u0_full.concat_rows(&u0_new)?;
        let v0 = gaussian_mask(shape_y, hint_y, self.k, rng.random());
        let v1 = gaussian_mask(shape_y, hint_y, self.k, rng.random());
        let v = v0.add(&v1)?;
        let w = self.op.apply(&self.u_full, &v)?;
        let w_hint = ScaleHint::configured(self.hint_x.rms * hint_y.rms);
        let w0 = gaussian_mask(w.shape(), &w_hint, self.k, rng.random());
        let w1 = w.sub(&w0)?;
        sess.send_batch(vec![
            (
                Role::P0,
                pack_tensors(Phase::Offline, ProtocolId::MulG, &[&u0_new, &v0, &w0]),
            ),
            (
                Role::P1,
                pack_tensors(Phase::Offline, ProtocolId::MulG, &[&u1_new, &v1, &w1]),
            ),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharing::share_plain;
    use crate::tensor::randn;
    use crate::transport::{establish_inproc_trio, run_trio, LinkProfile, Transcript};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Drive `steps` growth steps through the transport and return per-step
    /// reconstructions plus the computing parties' transcripts.
    fn run_steps(
        op: MulOp,
        d: usize,
        steps: usize,
        y_shape: impl Fn(usize) -> Vec<usize>,
        seed: u64,
        k: f32,
    ) -> (Vec<Tensor>, Vec<Tensor>, Transcript, Transcript) {
        let hint = ScaleHint::configured(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut x0s = Vec::new();
        let mut x1s = Vec::new();
        let mut y0s = Vec::new();
        let mut y1s = Vec::new();
        let mut expects = Vec::new();
        let mut x_full = Tensor::from_vec(vec![]);
        for t in 0..steps {
            let x_new = randn(vec![1, d], 1.0, seed * 1000 + t as u64);
            let y = randn(y_shape(t), 1.0, seed * 2000 + t as u64);
            x_full = x_full.concat_rows(&x_new).unwrap();
            expects.push(op.apply(&x_full, &y).unwrap());
            let (x0, x1) = share_plain(&x_new, &hint, k, &mut rng).unwrap();
            let (y0, y1) = share_plain(&y, &hint, k, &mut rng).unwrap();
            xs.push(x_new);
            ys.push(y);
            x0s.push(x0.data);
            x1s.push(x1.data);
            y0s.push(y0.data);
            y1s.push(y1.data);
        }
        let shapes_y: Vec<Vec<usize>> = ys.iter().map(|y| y.shape().to_vec()).collect();
        let [s0, s1, s2] = establish_inproc_trio(LinkProfile::lan());
        let shapes_y2 = shapes_y.clone();
        let shapes_y3 = shapes_y.clone();
        let ((z0s, t0), (z1s, t1), _) = run_trio(
            [s0, s1, s2],
            |mut s| {
                let mut p = MulGrowingParty::new(Role::P0, op)?;
                for sy in &shapes_y {
                    p.offline_recv(&mut s, &[1, d], sy)?;
                }
                let mut zs = Vec::new();
                for t in 0..steps {
                    zs.push(p.online(&mut s, &x0s[t], &y0s[t])?);
                }
                Ok((zs, s.snapshot()))
            },
            |mut s| {
                let mut p = MulGrowingParty::new(Role::P1, op)?;
                for sy in &shapes_y2 {
                    p.offline_recv(&mut s, &[1, d], sy)?;
                }
                let mut zs = Vec::new();
                for t in 0..steps {
                    zs.push(p.online(&mut s, &x1s[t], &y1s[t])?);
                }
                Ok((zs, s.snapshot()))
            },
            move |mut s| {
                let mut dealer = MulGrowingDealer::new(op, hint, k);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD0E);
                for sy in &shapes_y3 {
                    dealer.offline_step(&mut s, &[1, d], sy, &hint, &mut rng)?;
                }
                Ok(())
            },
        )
        .unwrap();
        let recon: Vec<Tensor> = z0s
            .iter()
            .zip(&z1s)
            .map(|(a, b)| a.add(b).unwrap())
            .collect();
        (recon, expects, t0, t1)
    }

    #[test]
    fn five_growth_steps_match_oracle() {
        // Tight bound at small k; f32-floor bound at the production k = 100
        // (shares of W sit at magnitude k^2, whose ulp caps the precision).
        for (k, tol) in [(5.0f32, 1e-4f32), (100.0, 5e-2)] {
            let (recon, expects, _, _) =
                run_steps(MulOp::MatMul, 6, 5, |_| vec![6], 3, k);
            for (t, (z, e)) in recon.iter().zip(&expects).enumerate() {
                assert!(
                    z.rel_frobenius(e) <= tol,
                    "step {t} k {k}: err {}",
                    z.rel_frobenius(e)
                );
            }
        }
    }

    #[test]
    fn one_online_round_per_step() {
        let (_, _, t0, t1) = run_steps(MulOp::MatMul, 4, 3, |_| vec![4], 9, 100.0);
        assert_eq!(t0.online.rounds, 3);
        assert_eq!(t1.online.rounds, 3);
    }

    #[test]
    fn head_scores_and_mix_variants() {
        let heads = 2;
        let (recon, expects, _, _) = run_steps(
            MulOp::HeadScores { heads },
            8,
            4,
            |_| vec![8],
            5,
            5.0,
        );
        for (z, e) in recon.iter().zip(&expects) {
            assert!(z.rel_frobenius(e) <= 1e-4);
        }
        let (recon, expects, _, _) = run_steps(
            MulOp::HeadMix { heads },
            8,
            4,
            |t| vec![heads, t + 1],
            6,
            5.0,
        );
        for (z, e) in recon.iter().zip(&expects) {
            assert!(z.rel_frobenius(e) <= 1e-4);
        }
    }

    #[test]
    fn first_step_equals_fixed_product() {
        let (recon, expects, _, _) = run_steps(MulOp::MatMul, 5, 1, |_| vec![5], 12, 5.0);
        assert!(recon[0].rel_frobenius(&expects[0]) <= 1e-4);
    }

    #[test]
    fn exhausted_material_errors() {
        let mut p = MulGrowingParty::new(Role::P0, MulOp::MatMul).unwrap();
        let [s0, _s1, _s2] = establish_inproc_trio(LinkProfile::lan());
        let mut s0 = s0;
        let err = p.online(&mut s0, &Tensor::zeros(vec![1, 2]), &Tensor::zeros(vec![2]));
        assert!(matches!(err, Err(Error::MaterialExhausted(_))));
    }

    #[test]
    fn pure_algebra_closes_without_transport() {
        let op = MulOp::MatMul;
        for (k, tol) in [(5.0f32, 1e-4f32), (100.0, 5e-2)] {
            for seed in 0..50u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = randn(vec![4, 3], 1.0, seed + 500);
                let y = randn(vec![3], 1.0, seed + 700);
                let h = ScaleHint::configured(1.0);
                let u0 = gaussian_mask(x.shape(), &h, k, rng.random());
                let u1 = gaussian_mask(x.shape(), &h, k, rng.random());
                let u = u0.add(&u1).unwrap();
                let v0 = gaussian_mask(y.shape(), &h, k, rng.random());
                let v1 = gaussian_mask(y.shape(), &h, k, rng.random());
                let v = v0.add(&v1).unwrap();
                let w = op.apply(&u, &v).unwrap();
                let w0 = gaussian_mask(w.shape(), &h, k, rng.random());
                let w1 = w.sub(&w0).unwrap();
                let xmu = x.sub(&u).unwrap();
                let ymv = y.sub(&v).unwrap();
                let z0 = mul_g_z0(op, &xmu, &ymv, &u0, &v0, &w0).unwrap();
                let z1 = mul_g_z1(op, &xmu, &ymv, &u1, &v1, &w1).unwrap();
                let z = z0.add(&z1).unwrap();
                let expect = op.apply(&x, &y).unwrap();
                assert!(
                    z.rel_frobenius(&expect) <= tol,
                    "seed {seed} k {k}: {}",
                    z.rel_frobenius(&expect)
                );
            }
        }
    }
}
