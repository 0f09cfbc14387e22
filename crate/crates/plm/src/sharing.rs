//! Additive secret sharing over f32 tensors with scale-controlled noise.
//!
//! Shares of a value `x` are `<x>_0 + <x>_1 = x`. Because the domain is the
//! reals rather than a finite ring, masks are drawn zero-mean Gaussian with a
//! standard deviation of `k * rms(x)` so every revealed quantity carries
//! noise `k` times larger than the signal (`k = 100` by default). Beaver
//! triple components follow the same discipline: each share of `u` is drawn
//! at scale `k * rms(x)`, each share of `v` at `k * rms(y)`, and `<w>_0` at
//! `k * rms(x) * rms(y)` (treating `E[x^2 y^2]` as `E[x^2] E[y^2]`, an
//! independence approximation).

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{MulOp, Tensor};
use crate::transport::Role;

/// Default noise coefficient.
pub const DEFAULT_K: f32 = 100.0;

/// One party's additive share of a tensor.
#[derive(Debug, Clone)]
pub struct Share {
    pub party: Role,
    pub data: Tensor,
}

impl Share {
    pub fn new(party: Role, data: Tensor) -> Result<Self> {
        if party == Role::P2 {
            return Err(Error::validation("the dealer holds no shares"));
        }
        Ok(Share { party, data })
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }
}

/// Where a second-moment estimate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum HintSource {
    Calibrated,
    Configured,
    Exact,
}

/// Estimate of `E[x^2]^(1/2)` for a tensor, used to size masks.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ScaleHint {
    pub rms: f32,
    pub source: HintSource,
}

impl ScaleHint {
    pub fn new(rms: f32, source: HintSource) -> Result<Self> {
        if !rms.is_finite() || rms < 0.0 {
            return Err(Error::validation("rms must be finite and nonnegative"));
        }
        Ok(ScaleHint { rms, source })
    }

    pub fn configured(rms: f32) -> Self {
        ScaleHint {
            rms,
            source: HintSource::Configured,
        }
    }
}

/// Exact rms hint computed from plaintext.
pub fn estimate_rms(x: &Tensor) -> Result<ScaleHint> {
    if x.is_empty() {
        return Err(Error::validation("cannot estimate rms of an empty tensor"));
    }
    if !x.is_finite() {
        return Err(Error::validation("non-finite values in tensor"));
    }
    ScaleHint::new(x.rms(), HintSource::Exact)
}

/// Draw a Gaussian mask tensor at the sharing noise scale for the hinted rms.
pub fn gaussian_mask(shape: &[usize], hint: &ScaleHint, k: f32, seed: u64) -> Tensor {
    crate::tensor::randn(shape.to_vec(), k * hint.rms, seed)
}

/// Split plaintext `x` into two shares: `<x>_0` is Gaussian noise at scale
/// `k * hint.rms`, `<x>_1 = x - <x>_0`.
pub fn share_plain<R: Rng>(
    x: &Tensor,
    hint: &ScaleHint,
    k: f32,
    rng: &mut R,
) -> Result<(Share, Share)> {
    if !x.is_finite() {
        return Err(Error::validation("cannot share non-finite values"));
    }
    if k.is_nan() || k <= 0.0 {
        return Err(Error::validation("noise coefficient must be positive"));
    }
    let s0 = gaussian_mask(x.shape(), hint, k, rng.random());
    let s1 = x.sub(&s0)?;
    Ok((Share::new(Role::P0, s0)?, Share::new(Role::P1, s1)?))
}

/// Elementwise sum of the two shares.
pub fn reconstruct(s0: &Share, s1: &Share) -> Result<Tensor> {
    if s0.party == s1.party {
        return Err(Error::DuplicateRole(s0.party));
    }
    s0.data.add(&s1.data)
}

/// Dealer-side Beaver triple for the product `op(x, y)`, shares addressed to
/// P0 and P1.
#[derive(Debug, Clone)]
pub struct BeaverTriple {
    pub u: (Share, Share),
    pub v: (Share, Share),
    pub w: (Share, Share),
    pub op: MulOp,
}

impl BeaverTriple {
    pub fn reconstruct_u(&self) -> Result<Tensor> {
        reconstruct(&self.u.0, &self.u.1)
    }
    pub fn reconstruct_v(&self) -> Result<Tensor> {
        reconstruct(&self.v.0, &self.v.1)
    }
    pub fn reconstruct_w(&self) -> Result<Tensor> {
        reconstruct(&self.w.0, &self.w.1)
    }
}

/// Generate a Beaver triple for `op` with operand shapes `shape_x`, `shape_y`.
///
/// `<u>_i`, `<v>_i` and `<w>_0` are independent Gaussians at the prescribed
/// scales; `<w>_1 = op(u, v) - <w>_0` closes the relation exactly (up to f32
/// rounding).
pub fn gen_mul_triple<R: Rng>(
    op: MulOp,
    shape_x: &[usize],
    shape_y: &[usize],
    hint_x: &ScaleHint,
    hint_y: &ScaleHint,
    k: f32,
    rng: &mut R,
) -> Result<BeaverTriple> {
    op.output_shape(shape_x, shape_y)?;
    if k.is_nan() || k <= 0.0 {
        return Err(Error::validation("noise coefficient must be positive"));
    }
    let u0 = gaussian_mask(shape_x, hint_x, k, rng.random());
    let u1 = gaussian_mask(shape_x, hint_x, k, rng.random());
    let v0 = gaussian_mask(shape_y, hint_y, k, rng.random());
    let v1 = gaussian_mask(shape_y, hint_y, k, rng.random());
    let w_hint = ScaleHint::new(hint_x.rms * hint_y.rms, HintSource::Configured)?;
    let u = u0.add(&u1)?;
    let v = v0.add(&v1)?;
    let w = op.apply(&u, &v)?;
    let w0 = gaussian_mask(w.shape(), &w_hint, k, rng.random());
    let w1 = w.sub(&w0)?;
    Ok(BeaverTriple {
        u: (Share::new(Role::P0, u0)?, Share::new(Role::P1, u1)?),
        v: (Share::new(Role::P0, v0)?, Share::new(Role::P1, v1)?),
        w: (Share::new(Role::P0, w0)?, Share::new(Role::P1, w1)?),
        op,
    })
}
