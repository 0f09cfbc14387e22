//! Dense f32 tensors with the handful of operations the protocols need.
//!
//! Matrix products accumulate in f64 so that the reference and secure paths
//! lose the same (small) amount of precision. The heavy loops (products and
//! Gaussian mask generation) have a rayon path behind the `parallel` feature
//! and a sequential path that is always compiled; benchmarks compare both.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Row-major dense tensor of f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Number of rows when viewed as a matrix (first dimension; 1 for scalars).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let w = self.len() / self.rows();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape,
                got: self.shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Root mean square of the elements; 0 for the all-zero tensor.
    pub fn rms(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.data.iter().map(|v| (*v as f64) * (*v as f64)).sum();
        (sum / self.data.len() as f64).sqrt() as f32
    }

    /// Append the rows of `extra` after the rows of `self`.
    /// `concat(empty, x) = x`, matching the null convention of the growing
    /// multiplication state.
    pub fn concat_rows(&self, extra: &Tensor) -> Result<Tensor> {
        if self.is_empty() {
            return Ok(extra.clone());
        }
        if extra.is_empty() {
            return Ok(self.clone());
        }
        let w = self.len() / self.rows();
        let we = extra.len() / extra.rows();
        if w != we {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                got: extra.shape.clone(),
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&extra.data);
        Ok(Tensor {
            shape: vec![self.rows() + extra.rows(), w],
            data,
        })
    }

    /// Transpose of a matrix-shaped tensor.
    pub fn transpose2d(&self) -> Result<Tensor> {
        let (r, c) = match self.shape() {
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::ShapeMismatch {
                    expected: vec![0, 0],
                    got: self.shape.clone(),
                })
            }
        };
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            shape: vec![c, r],
            data,
        })
    }

    /// Max absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Relative Frobenius distance ||a - b|| / ||b||.
    pub fn rel_frobenius(&self, other: &Tensor) -> f32 {
        let num: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum();
        let den: f64 = other.data.iter().map(|v| (*v as f64).powi(2)).sum();
        if den == 0.0 {
            return num.sqrt() as f32;
        }
        (num.sqrt() / den.sqrt()) as f32
    }
}

/// Deterministic Gaussian tensor: zero mean, standard deviation `std`.
///
/// The stream is keyed by (seed, chunk index) so the parallel and sequential
/// paths produce bit-identical output.
pub fn randn(shape: Vec<usize>, std: f32, seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = randn_vec(n, std, seed);
    Tensor { shape, data }
}

const RANDN_CHUNK: usize = 1 << 16;

pub fn randn_vec(n: usize, std: f32, seed: u64) -> Vec<f32> {
    let chunks = n.div_ceil(RANDN_CHUNK.max(1)).max(1);
    let fill = |chunk_idx: usize, out: &mut [f32]| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(chunk_idx as u64 + 1);
        for v in out.iter_mut() {
            let z: f32 = StandardNormal.sample(&mut rng);
            *v = z * std;
        }
    };
    let mut data = vec![0.0f32; n];
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(RANDN_CHUNK)
            .enumerate()
            .for_each(|(i, c)| fill(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, c) in data.chunks_mut(RANDN_CHUNK).enumerate() {
            fill(i, c);
        }
    }
    let _ = chunks;
    data
}

/// The bilinear products the multiplication protocols are instantiated with.
/// All of them distribute over addition in both operands, which is the only
/// property the masking algebra relies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MulOp {
    /// Plain matrix (or matrix-vector) product.
    MatMul,
    /// Per-head dot products: keys `[n, d]` x query `[d]` -> scores `[h, n]`.
    HeadScores { heads: usize },
    /// Per-head mixing: values `[n, d]` x probs `[h, n]` -> context `[d]`.
    HeadMix { heads: usize },
}

impl MulOp {
    pub fn output_shape(&self, xs: &[usize], ys: &[usize]) -> Result<Vec<usize>> {
        match self {
            MulOp::MatMul => match (xs, ys) {
                ([m, k], [k2, n]) if k == k2 => Ok(vec![*m, *n]),
                ([m, k], [k2]) if k == k2 => Ok(vec![*m]),
                ([k], [k2]) if k == k2 => Ok(vec![1]),
                _ => Err(Error::ShapeMismatch {
                    expected: xs.to_vec(),
                    got: ys.to_vec(),
                }),
            },
            MulOp::HeadScores { heads } => match (xs, ys) {
                ([n, d], [d2]) if d == d2 && d % heads == 0 => Ok(vec![*heads, *n]),
                _ => Err(Error::ShapeMismatch {
                    expected: xs.to_vec(),
                    got: ys.to_vec(),
                }),
            },
            MulOp::HeadMix { heads } => match (xs, ys) {
                ([n, d], [h, n2]) if n == n2 && h == heads && d % heads == 0 => Ok(vec![*d]),
                _ => Err(Error::ShapeMismatch {
                    expected: xs.to_vec(),
                    got: ys.to_vec(),
                }),
            },
        }
    }

    pub fn apply(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let out_shape = self.output_shape(x.shape(), y.shape())?;
        let data = match self {
            MulOp::MatMul => {
                let (m, k) = match x.shape() {
                    [m, k] => (*m, *k),
                    [k] => (1, *k),
                    _ => unreachable!("checked by output_shape"),
                };
                let n = y.len() / k;
                matmul_impl(x.data(), y.data(), m, k, n)
            }
            MulOp::HeadScores { heads } => {
                let n = x.shape()[0];
                let d = x.shape()[1];
                let dh = d / heads;
                let mut out = vec![0.0f32; heads * n];
                for h in 0..*heads {
                    for j in 0..n {
                        let mut acc = 0.0f64;
                        let xr = &x.data()[j * d + h * dh..j * d + (h + 1) * dh];
                        let yr = &y.data()[h * dh..(h + 1) * dh];
                        for c in 0..dh {
                            acc += xr[c] as f64 * yr[c] as f64;
                        }
                        out[h * n + j] = acc as f32;
                    }
                }
                out
            }
            MulOp::HeadMix { heads } => {
                let n = x.shape()[0];
                let d = x.shape()[1];
                let dh = d / heads;
                let mut out = vec![0.0f32; d];
                for h in 0..*heads {
                    for (c, o) in out.iter_mut().enumerate().skip(h * dh).take(dh) {
                        let mut acc = 0.0f64;
                        for j in 0..n {
                            acc += y.data()[h * n + j] as f64 * x.data()[j * d + c] as f64;
                        }
                        *o = acc as f32;
                    }
                }
                out
            }
        };
        Tensor::new(out_shape, data)
    }
}

/// `[m,k] x [k,n] -> [m,n]` row-major product, f64 accumulation.
pub fn matmul_seq(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for (i, row_out) in out.chunks_mut(n).enumerate() {
        matmul_row(&a[i * k..(i + 1) * k], b, row_out, k, n);
    }
    out
}

#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row_out)| {
        matmul_row(&a[i * k..(i + 1) * k], b, row_out, k, n);
    });
    out
}

fn matmul_row(a_row: &[f32], b: &[f32], out: &mut [f32], k: usize, n: usize) {
    if n == 1 {
        let mut acc = 0.0f64;
        for (c, av) in a_row.iter().enumerate() {
            acc += *av as f64 * b[c] as f64;
        }
        out[0] = acc as f32;
        return;
    }
    let mut acc = vec![0.0f64; n];
    for (c, av) in a_row.iter().enumerate() {
        let av = *av as f64;
        let brow = &b[c * n..(c + 1) * n];
        for (j, bv) in brow.iter().enumerate() {
            acc[j] += av * *bv as f64;
        }
    }
    for (o, a) in out.iter_mut().zip(acc) {
        *o = a as f32;
    }
    let _ = k;
}

fn matmul_impl(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    #[cfg(feature = "parallel")]
    {
        matmul_par(a, b, m, k, n)
    }
    #[cfg(not(feature = "parallel"))]
    {
        matmul_seq(a, b, m, k, n)
    }
}
