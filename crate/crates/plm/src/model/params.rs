//! Model parameters and the deterministic toy-model generator.
//!
//! P0 holds everything in plaintext. The public subset is exactly the
//! layer-norm affine weights and the positional embeddings; everything else
//! (embedding/head matrix, attention and FFN dense weights) is private and
//! enters the protocols only as fixed masked operands. The embedding and the
//! head projection share the weight matrix `E`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::ModelConfig;
use crate::tensor::{randn, Tensor};

/// One transformer layer. Weight matrices are stored `[out, in]` so that
/// `W x` is a plain matrix-vector product with the hidden column vector.
#[derive(Debug, Clone)]
pub struct LayerParams {
    /// Public affine scale of the first layer norm, `[d]`.
    pub ln1_gamma: Tensor,
    /// Public affine shift of the first layer norm, `[d]`.
    pub ln1_beta: Tensor,
    /// Stacked query/key/value projection, `[3d, d]` (rows 0..d produce q,
    /// d..2d produce k, 2d..3d produce v).
    pub w_qkv: Tensor,
    /// Attention output projection, `[d, d]`.
    pub w_o: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    /// First FFN dense, `[d_ffn, d]`.
    pub w1: Tensor,
    /// Second FFN dense, `[d, d_ffn]`.
    pub w2: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    /// Embedding / head matrix `E`, `[n_vocab, d]`. Private.
    pub emb: Tensor,
    /// Positional embeddings, `[max_seq, d]`. Public.
    pub pos: Tensor,
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    /// `E^T`, `[d, n_vocab]`: the fixed operand of the embedding lookup
    /// (one-hot enters as the shared vector).
    pub fn emb_t(&self) -> Tensor {
        self.emb.transpose2d().expect("emb is 2-d")
    }
}

/// Deterministic toy model: every weight is Gaussian with standard deviation
/// 0.02 under a seed stream derived from `cfg.seed`; layer-norm affine
/// weights start at scale 1 and shift 0.
pub fn gen_toy_model(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut draw = |shape: Vec<usize>| randn(shape, 0.02, rng.random());
    let (n, d, f) = (cfg.n_vocab, cfg.d_model, cfg.d_ffn);
    let emb = draw(vec![n, d]);
    let pos = draw(vec![cfg.max_seq, d]);
    let layers = (0..cfg.n_layers)
        .map(|_| LayerParams {
            ln1_gamma: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            ln1_beta: Tensor::zeros(vec![d]),
            w_qkv: draw(vec![3 * d, d]),
            w_o: draw(vec![d, d]),
            ln2_gamma: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
            ln2_beta: Tensor::zeros(vec![d]),
            w1: draw(vec![f, d]),
            w2: draw(vec![d, f]),
        })
        .collect();
    Ok(ModelParams {
        cfg: cfg.clone(),
        emb,
        pos,
        layers,
    })
}
