//! Plaintext reference forward pass with an incremental KV cache.
//!
//! The secure engine evaluates exactly the same functional graph (same
//! nonlinearity definitions, same bilinear head operations, f64
//! accumulation), so this state machine is the correctness oracle for every
//! secure run. Tokens are processed one position at a time; a query at
//! position t only ever sees cached positions <= t, so causality holds
//! structurally and no masking offset is needed.

use crate::error::{Error, Result};
use crate::model::{ModelParams, SiteProbe};
use crate::pir::argmax_lowest;
use crate::protocols::NonlinFn;
use crate::tensor::{MulOp, Tensor};

/// Layer-norm variance epsilon, shared by the oracle and the secure engine.
pub const LN_EPS: f32 = 1e-5;

/// Incremental plaintext forward state.
pub struct PlainState<'a> {
    params: &'a ModelParams,
    k_cache: Vec<Tensor>,
    v_cache: Vec<Tensor>,
}

impl<'a> PlainState<'a> {
    pub fn new(params: &'a ModelParams) -> Self {
        let d = params.cfg.d_model;
        PlainState {
            params,
            k_cache: vec![Tensor::zeros(vec![0, d]); params.cfg.n_layers],
            v_cache: vec![Tensor::zeros(vec![0, d]); params.cfg.n_layers],
        }
    }

    pub fn tokens_processed(&self) -> usize {
        self.k_cache[0].rows()
    }

    /// Process one token; returns the final hidden state `[d]`.
    pub fn step(&mut self, token: usize) -> Result<Tensor> {
        self.step_probed(token, &mut |_, _| {})
    }

    /// Like [`step`](Self::step) but reporting every intermediate tensor to
    /// `probe` under its site name (used for scale calibration and tests).
    pub fn step_probed(&mut self, token: usize, probe: SiteProbe<'_>) -> Result<Tensor> {
        let cfg = &self.params.cfg;
        let (d, heads) = (cfg.d_model, cfg.n_heads);
        if token >= cfg.n_vocab {
            return Err(Error::validation(format!(
                "token id {token} out of vocabulary {}",
                cfg.n_vocab
            )));
        }
        let pos = self.tokens_processed();
        if pos >= cfg.max_seq {
            return Err(Error::validation(format!(
                "sequence length {} exceeds max_seq {}",
                pos + 1,
                cfg.max_seq
            )));
        }
        let mut x = Tensor::new(vec![d], self.params.emb.row(token).to_vec())?
            .add(&Tensor::new(vec![d], self.params.pos.row(pos).to_vec())?)?;
        let scale = 1.0 / (cfg.head_dim() as f32).sqrt();
        for (l, layer) in self.params.layers.iter().enumerate() {
            probe(&format!("l{l}.ln1.in"), &x);
            let xn = ln_normalize(&x)?;
            probe(&format!("l{l}.ln1.out"), &xn);
            let xa = xn.hadamard(&layer.ln1_gamma)?.add(&layer.ln1_beta)?;
            probe(&format!("l{l}.qkv.in"), &xa);
            let qkv = MulOp::MatMul.apply(&layer.w_qkv, &xa)?;
            let q = Tensor::new(vec![d], qkv.data()[..d].to_vec())?;
            let k = Tensor::new(vec![1, d], qkv.data()[d..2 * d].to_vec())?;
            let v = Tensor::new(vec![1, d], qkv.data()[2 * d..].to_vec())?;
            probe(&format!("l{l}.q"), &q);
            probe(&format!("l{l}.k"), &k);
            probe(&format!("l{l}.v"), &v);
            self.k_cache[l] = self.k_cache[l].concat_rows(&k)?;
            self.v_cache[l] = self.v_cache[l].concat_rows(&v)?;
            let scores = MulOp::HeadScores { heads }
                .apply(&self.k_cache[l], &q)?
                .scale(scale);
            probe(&format!("l{l}.scores"), &scores);
            let probs = NonlinFn::SoftmaxRows.apply(&scores);
            probe(&format!("l{l}.probs"), &probs);
            let ctx = MulOp::HeadMix { heads }.apply(&self.v_cache[l], &probs)?;
            probe(&format!("l{l}.ctx"), &ctx);
            let attn = MulOp::MatMul.apply(&layer.w_o, &ctx)?;
            x.add_assign(&attn)?;
            probe(&format!("l{l}.ln2.in"), &x);
            let xn2 = ln_normalize(&x)?;
            probe(&format!("l{l}.ln2.out"), &xn2);
            let xa2 = xn2.hadamard(&layer.ln2_gamma)?.add(&layer.ln2_beta)?;
            probe(&format!("l{l}.ffn.in"), &xa2);
            let hid = MulOp::MatMul.apply(&layer.w1, &xa2)?;
            probe(&format!("l{l}.gelu.in"), &hid);
            let act = NonlinFn::Gelu.apply(&hid);
            probe(&format!("l{l}.gelu.out"), &act);
            let f = MulOp::MatMul.apply(&layer.w2, &act)?;
            x.add_assign(&f)?;
        }
        probe("head.in", &x);
        Ok(x)
    }

    /// Next-token scores `E h`, `[n_vocab]`.
    pub fn logits(&self, hidden: &Tensor) -> Result<Tensor> {
        MulOp::MatMul.apply(&self.params.emb, hidden)
    }

    /// Recompute the attention output of layer `l` for the latest query from
    /// scratch (no cached score path), for cache-consistency checks.
    pub fn cache_len(&self, l: usize) -> usize {
        self.k_cache[l].rows()
    }
}

/// `(x - mean) / sqrt(var + eps)` over the whole vector, as one row.
fn ln_normalize(x: &Tensor) -> Result<Tensor> {
    let row = x.clone().reshape(vec![1, x.len()])?;
    let n = NonlinFn::NormalizeRows { eps: LN_EPS }.apply(&row);
    n.reshape(vec![x.len()])
}

/// Result of a greedy plaintext generation run.
#[derive(Debug, Clone)]
pub struct GenTrace {
    /// Generated token ids (`steps` of them).
    pub tokens: Vec<usize>,
    /// Final hidden state of every processed position, in order.
    pub hidden: Vec<Tensor>,
}

/// Greedy generation: feed the prompt one position at a time, then emit
/// `steps` argmax tokens. `steps = 0` performs no work at all.
pub fn greedy_generate(params: &ModelParams, prompt: &[usize], steps: usize) -> Result<GenTrace> {
    if steps == 0 {
        return Ok(GenTrace {
            tokens: vec![],
            hidden: vec![],
        });
    }
    if prompt.is_empty() {
        return Err(Error::validation("prompt must be nonempty to generate"));
    }
    let mut st = PlainState::new(params);
    let mut trace = GenTrace {
        tokens: vec![],
        hidden: vec![],
    };
    let mut next = prompt[0];
    let total = prompt.len() + steps - 1;
    for t in 0..total {
        let h = st.step(next)?;
        trace.hidden.push(h.clone());
        if t + 1 < prompt.len() {
            next = prompt[t + 1];
        } else {
            let scores = st.logits(&h)?;
            let tok = argmax_lowest(scores.data());
            trace.tokens.push(tok);
            next = tok;
        }
    }
    Ok(trace)
}
