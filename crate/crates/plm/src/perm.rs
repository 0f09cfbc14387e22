//! Permutations and the 2D (row + per-row element) permutation.
//!
//! Convention, used everywhere in this crate: a permutation is stored as an
//! index array `pi`, and application is a gather, `y[i] = x[pi[i]]`. The
//! inverse is the array inverse: `inv[pi[i]] = i`.
//!
//! The 2D permutation over an `[n, d]` tensor first permutes the `d` elements
//! inside each row (each row with its own independent permutation), then
//! permutes the `n` rows. It commutes with any function applied row-wise that
//! is invariant to the order of elements within a row's reduction (softmax,
//! mean/variance normalization), which is exactly what the nonlinear protocol
//! needs. The space it is drawn from has size `n! * (d!)^n`.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Index-array permutation; `apply` gathers `y[i] = x[pi[i]]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation((0..n).collect())
    }

    pub fn random<R: Rng>(n: usize, rng: &mut R) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        Permutation(idx)
    }

    pub fn from_indices(idx: Vec<usize>) -> Result<Self> {
        let n = idx.len();
        let mut seen = vec![false; n];
        for &i in &idx {
            if i >= n || seen[i] {
                return Err(Error::validation("not a bijection"));
            }
            seen[i] = true;
        }
        Ok(Permutation(idx))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0usize; self.0.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inv[p] = i;
        }
        Permutation(inv)
    }

    pub fn apply_slice<T: Copy>(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.0.len());
        self.0.iter().map(|&i| x[i]).collect()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.len() != self.0.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.0.len()],
                got: x.shape().to_vec(),
            });
        }
        Ok(Tensor::from_vec(self.apply_slice(x.data())))
    }
}

/// Per-row element permutations followed by a row permutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation2D {
    pub row_perm: Permutation,
    pub elem_perms: Vec<Permutation>,
}

impl Permutation2D {
    pub fn random<R: Rng>(n: usize, d: usize, rng: &mut R) -> Self {
        Permutation2D {
            row_perm: Permutation::random(n, rng),
            elem_perms: (0..n).map(|_| Permutation::random(d, rng)).collect(),
        }
    }

    pub fn identity(n: usize, d: usize) -> Self {
        Permutation2D {
            row_perm: Permutation::identity(n),
            elem_perms: vec![Permutation::identity(d); n],
        }
    }

    pub fn n(&self) -> usize {
        self.row_perm.len()
    }

    pub fn d(&self) -> usize {
        self.elem_perms.first().map(|p| p.len()).unwrap_or(0)
    }

    /// Elements first (each source row with its own permutation), then rows.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = (self.n(), self.d());
        if x.shape() != [n, d] {
            return Err(Error::ShapeMismatch {
                expected: vec![n, d],
                got: x.shape().to_vec(),
            });
        }
        let mut out = vec![0.0f32; n * d];
        for r in 0..n {
            let src = self.row_perm.indices()[r];
            let row = x.row(src);
            for c in 0..d {
                out[r * d + c] = row[self.elem_perms[src].indices()[c]];
            }
        }
        Tensor::new(vec![n, d], out)
    }

    /// Inverse as a `Permutation2D` (row inverse first, then element inverses,
    /// re-indexed so that `inverse().apply(self.apply(x)) == x`).
    pub fn inverse(&self) -> Permutation2D {
        let row_inv = self.row_perm.inverse();
        // Output position p of apply() carries source row row_perm[p]
        // gathered through elem_perms[row_perm[p]]; undoing position s of the
        // inverse therefore needs elem_perms[row_perm[s]].inverse().
        let n = self.n();
        let mut elem = Vec::with_capacity(n);
        for s in 0..n {
            elem.push(self.elem_perms[self.row_perm.indices()[s]].inverse());
        }
        Permutation2D {
            row_perm: row_inv,
            elem_perms: elem,
        }
    }
}

/// Either a flat or a 2D permutation, with a uniform apply/invert surface so
/// the permutation protocol does not care which class it runs over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnyPerm {
    Flat(Permutation),
    TwoD(Permutation2D),
}

impl AnyPerm {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            AnyPerm::Flat(p) => {
                let out = p.apply(x)?;
                out.reshape(x.shape().to_vec())
            }
            AnyPerm::TwoD(p) => p.apply(x),
        }
    }

    pub fn inverse(&self) -> AnyPerm {
        match self {
            AnyPerm::Flat(p) => AnyPerm::Flat(p.inverse()),
            AnyPerm::TwoD(p) => AnyPerm::TwoD(p.inverse()),
        }
    }

    pub fn element_count(&self) -> usize {
        match self {
            AnyPerm::Flat(p) => p.len(),
            AnyPerm::TwoD(p) => p.n() * p.d(),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            AnyPerm::Flat(p) => vec![p.len()],
            AnyPerm::TwoD(p) => vec![p.n(), p.d()],
        }
    }

    /// Wire encoding as a u64 vector (sent from P0 to the dealer offline).
    pub fn encode(&self) -> Vec<u64> {
        match self {
            AnyPerm::Flat(p) => {
                let mut v = vec![0u64, p.len() as u64];
                v.extend(p.indices().iter().map(|&i| i as u64));
                v
            }
            AnyPerm::TwoD(p) => {
                let mut v = vec![1u64, p.n() as u64, p.d() as u64];
                v.extend(p.row_perm.indices().iter().map(|&i| i as u64));
                for e in &p.elem_perms {
                    v.extend(e.indices().iter().map(|&i| i as u64));
                }
                v
            }
        }
    }

    pub fn decode(v: &[u64]) -> Result<AnyPerm> {
        let bad = || Error::Decode("malformed permutation encoding".into());
        match v.first() {
            Some(0) => {
                let n = *v.get(1).ok_or_else(bad)? as usize;
                if v.len() != 2 + n {
                    return Err(bad());
                }
                let idx = v[2..].iter().map(|&i| i as usize).collect();
                Ok(AnyPerm::Flat(Permutation::from_indices(idx)?))
            }
            Some(1) => {
                let n = *v.get(1).ok_or_else(bad)? as usize;
                let d = *v.get(2).ok_or_else(bad)? as usize;
                if v.len() != 3 + n + n * d {
                    return Err(bad());
                }
                let row = Permutation::from_indices(v[3..3 + n].iter().map(|&i| i as usize).collect())?;
                let mut elems = Vec::with_capacity(n);
                for r in 0..n {
                    let off = 3 + n + r * d;
                    elems.push(Permutation::from_indices(
                        v[off..off + d].iter().map(|&i| i as usize).collect(),
                    )?);
                }
                Ok(AnyPerm::TwoD(Permutation2D {
                    row_perm: row,
                    elem_perms: elems,
                }))
            }
            _ => Err(bad()),
        }
    }
}

/// log2 of the 2D permutation space size, `n! * (d!)^n` with `n` rows of `d`
/// elements (or `h! * (n!)^h` in attention-score terms).
pub fn perm2d_space_log2(n: u64, d: u64) -> f64 {
    let log2_fact = |m: u64| -> f64 { (2..=m).map(|i| (i as f64).log2()).sum() };
    log2_fact(n) + n as f64 * log2_fact(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn apply_then_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Permutation::random(16, &mut rng);
        let x: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let y = p.apply_slice(&x);
        let back = p.inverse().apply_slice(&y);
        assert_eq!(back, x);
    }

    #[test]
    fn documented_convention() {
        // pi = [1,2,3,0] maps x=(1,2,3,4) to (2,3,4,1).
        let p = Permutation::from_indices(vec![1, 2, 3, 0]).unwrap();
        let y = p.apply_slice(&[1.0f32, 2.0, 3.0, 4.0]);
        assert_eq!(y, vec![2.0, 3.0, 4.0, 1.0]);
    }

    #[test]
    fn rejects_non_bijection() {
        assert!(Permutation::from_indices(vec![0, 0, 1]).is_err());
        assert!(Permutation::from_indices(vec![0, 3]).is_err());
    }

    #[test]
    fn perm2d_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Permutation2D::random(4, 6, &mut rng);
        let x = crate::tensor::randn(vec![4, 6], 1.0, 3);
        let y = p.apply(&x).unwrap();
        let back = p.inverse().apply(&y).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn perm2d_identity_when_degenerate() {
        let p = Permutation2D::random(1, 1, &mut ChaCha8Rng::seed_from_u64(1));
        let x = Tensor::new(vec![1, 1], vec![42.0]).unwrap();
        assert_eq!(p.apply(&x).unwrap(), x);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in [
            AnyPerm::Flat(Permutation::random(10, &mut rng)),
            AnyPerm::TwoD(Permutation2D::random(3, 5, &mut rng)),
        ] {
            let enc = p.encode();
            assert_eq!(AnyPerm::decode(&enc).unwrap(), p);
        }
    }

    #[test]
    fn space_size_formula() {
        // 2 rows of 2 elements: 2! * (2!)^2 = 8.
        assert!((perm2d_space_log2(2, 2) - 3.0).abs() < 1e-12);
    }
}
