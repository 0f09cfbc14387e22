//! Three-party secure inference engine.
//!
//! P0 holds the model, P1 holds the tokens and learns the predictions, P2
//! deals correlated randomness and never touches live data. Each processed
//! token runs one offline staging pass (dealer to parties) followed by one
//! online pass (P0 and P1 only). The per-layer online composition is
//!
//! ```text
//! LN1(3) qkv(1) scores(1) softmax(3) mix(1) proj(1)
//! LN2(3) ffn1(1) gelu(3) ffn2(1)          = 18 rounds
//! ```
//!
//! plus 1 round for the embedding and, on predicted steps, 1 for the head
//! projection and 4 for the private retrieval. Tokens are processed one
//! position at a time (the prompt included), so a query only ever attends to
//! cached earlier positions and causality is structural.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::he::{HeClient, HeConfig, HeServer};
use crate::model::{HintTable, ModelConfig, ModelParams, LN_EPS};
use crate::perm::{AnyPerm, Permutation, Permutation2D};
use crate::pir::{
    prediction_dealer_offline, prediction_handshake_p0, prediction_handshake_p1, PredictionP0,
    PredictionP1,
};
use crate::protocols::{
    nonlinear_dealer_offline, pack_tensors, unpack_tensors, MulFixedDealer, MulFixedParty,
    MulGrowingDealer, MulGrowingParty, NonlinFn, NonlinearMaskP0, NonlinearMaskP1,
};
use crate::sharing::ScaleHint;
use crate::tensor::{MulOp, Tensor};
use crate::transport::{
    LinkProfile, Message, Phase, ProtocolId, Role, Session, Transcript,
};

/// Analytic online round count of one transformer layer on a single-token
/// step, per the composition documented above: 3 (LN1) + 1 (fused qkv) +
/// 1 (scores) + 3 (softmax) + 1 (mix) + 1 (proj) + 3 (LN2) + 1 (ffn1) +
/// 3 (gelu) + 1 (ffn2).
pub const LAYER_ONLINE_ROUNDS: u64 = 18;

/// Online rounds of the embedding lookup preceding the layer stack.
pub const EMBED_ONLINE_ROUNDS: u64 = 1;

/// Extra online rounds on predicted steps: head projection plus retrieval.
pub const PREDICT_ONLINE_ROUNDS: u64 = 1 + 4;

/// Public generation plan, agreed by all three parties.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenPlan {
    pub prompt_len: usize,
    pub gen_steps: usize,
}

impl GenPlan {
    /// Token positions processed: the prompt plus every generated token that
    /// must be fed back. Zero generation steps mean zero work.
    pub fn total_steps(&self) -> usize {
        if self.gen_steps == 0 {
            0
        } else {
            self.prompt_len + self.gen_steps - 1
        }
    }

    /// Whether the step at position `t` ends with a secure prediction.
    pub fn predicts_at(&self, t: usize) -> bool {
        self.gen_steps > 0 && t + 1 >= self.prompt_len
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.gen_steps > 0 && self.prompt_len == 0 {
            return Err(Error::validation("prompt must be nonempty to generate"));
        }
        if self.total_steps() > cfg.max_seq {
            return Err(Error::validation(format!(
                "plan needs {} positions, max_seq is {}",
                self.total_steps(),
                cfg.max_seq
            )));
        }
        Ok(())
    }
}

/// Per-token result on a computing party.
#[derive(Debug, Clone)]
pub struct TokenRecord {
    /// Transcript delta covering this token (offline staging + online pass).
    pub delta: Transcript,
    /// This party's share of the final hidden state.
    pub hidden_share: Tensor,
    /// The predicted token id (P1 only, on predicted steps).
    pub token: Option<usize>,
}

struct LayerMasks0 {
    ln1: NonlinearMaskP0,
    softmax: NonlinearMaskP0,
    ln2: NonlinearMaskP0,
    gelu: NonlinearMaskP0,
}

struct LayerMasks1 {
    ln1: NonlinearMaskP1,
    softmax: NonlinearMaskP1,
    ln2: NonlinearMaskP1,
    gelu: NonlinearMaskP1,
}

struct LayerP0 {
    qkv: MulFixedParty,
    proj: MulFixedParty,
    ffn1: MulFixedParty,
    ffn2: MulFixedParty,
    scores: MulGrowingParty,
    mix: MulGrowingParty,
    masks: VecDeque<LayerMasks0>,
}

struct LayerP1 {
    qkv: MulFixedParty,
    proj: MulFixedParty,
    ffn1: MulFixedParty,
    ffn2: MulFixedParty,
    scores: MulGrowingParty,
    mix: MulGrowingParty,
    masks: VecDeque<LayerMasks1>,
}

/// Model-holder engine (P0).
pub struct SecureP0 {
    params: ModelParams,
    hints: HintTable,
    k: f32,
    allow_insecure_he: bool,
    rng: ChaCha8Rng,
    mul_emb: MulFixedParty,
    mul_head: MulFixedParty,
    layers: Vec<LayerP0>,
    pred_queue: VecDeque<PredictionP0>,
    he_cfg: Option<HeConfig>,
    staged: usize,
    done: usize,
}

impl SecureP0 {
    pub fn new(
        params: ModelParams,
        hints: HintTable,
        allow_insecure_he: bool,
        seed: u64,
    ) -> Result<Self> {
        params.cfg.validate()?;
        let heads = params.cfg.n_heads;
        let layers = params
            .layers
            .iter()
            .map(|l| {
                Ok(LayerP0 {
                    qkv: MulFixedParty::new_p0(MulOp::MatMul, l.w_qkv.clone()),
                    proj: MulFixedParty::new_p0(MulOp::MatMul, l.w_o.clone()),
                    ffn1: MulFixedParty::new_p0(MulOp::MatMul, l.w1.clone()),
                    ffn2: MulFixedParty::new_p0(MulOp::MatMul, l.w2.clone()),
                    scores: MulGrowingParty::new(Role::P0, MulOp::HeadScores { heads })?,
                    mix: MulGrowingParty::new(Role::P0, MulOp::HeadMix { heads })?,
                    masks: VecDeque::new(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SecureP0 {
            k: params.cfg.k_scale,
            mul_emb: MulFixedParty::new_p0(MulOp::MatMul, params.emb_t()),
            mul_head: MulFixedParty::new_p0(MulOp::MatMul, params.emb.clone()),
            rng: ChaCha8Rng::seed_from_u64(seed),
            layers,
            params,
            hints,
            allow_insecure_he,
            pred_queue: VecDeque::new(),
            he_cfg: None,
            staged: 0,
            done: 0,
        })
    }

    /// Preparation: publish the scale table to the dealer and the public LN
    /// affine weights to P1, receive the retrieval parameters, and mask
    /// every fixed operand.
    pub fn prepare(&mut self, sess: &mut Session) -> Result<()> {
        sess.send(
            Role::P2,
            Message::bytes(
                Phase::Preparation,
                ProtocolId::Control,
                self.hints.to_wire(),
            ),
        )?;
        let gammas: Vec<&Tensor> = self
            .params
            .layers
            .iter()
            .flat_map(|l| [&l.ln1_gamma, &l.ln2_gamma])
            .collect();
        let msg = pack_tensors(Phase::Preparation, ProtocolId::Control, &gammas);
        sess.send(Role::P1, msg)?;
        let server = prediction_handshake_p0(sess, self.allow_insecure_he)?;
        self.he_cfg = Some(server.config().clone());
        let k = self.k;
        self.mul_emb.prepare(sess, &self.hints.get("emb.w")?, k)?;
        for l in 0..self.layers.len() {
            let (qw, pw, f1, f2) = (
                self.hints.get(&format!("l{l}.qkv.w"))?,
                self.hints.get(&format!("l{l}.proj.w"))?,
                self.hints.get(&format!("l{l}.ffn1.w"))?,
                self.hints.get(&format!("l{l}.ffn2.w"))?,
            );
            let layer = &mut self.layers[l];
            layer.qkv.prepare(sess, &qw, k)?;
            layer.proj.prepare(sess, &pw, k)?;
            layer.ffn1.prepare(sess, &f1, k)?;
            layer.ffn2.prepare(sess, &f2, k)?;
        }
        self.mul_head.prepare(sess, &self.hints.get("head.w")?, k)?;
        Ok(())
    }

    /// Stage the offline material for the next token position.
    pub fn stage_token(&mut self, sess: &mut Session, predict: bool) -> Result<()> {
        let cfg = &self.params.cfg;
        if self.staged >= cfg.max_seq {
            return Err(Error::validation("cache overflow beyond max sequence length"));
        }
        let (d, h, f, n_vocab) = (cfg.d_model, cfg.n_heads, cfg.d_ffn, cfg.n_vocab);
        let n = self.staged + 1;
        self.mul_emb.offline_recv(sess, &[n_vocab])?;
        for l in 0..self.layers.len() {
            let ln1 = NonlinearMaskP0::offline(
                sess,
                AnyPerm::TwoD(Permutation2D::random(1, d, &mut self.rng)),
            )?;
            let layer = &mut self.layers[l];
            layer.qkv.offline_recv(sess, &[d])?;
            layer.scores.offline_recv(sess, &[1, d], &[d])?;
            let softmax = NonlinearMaskP0::offline(
                sess,
                AnyPerm::TwoD(Permutation2D::random(h, n, &mut self.rng)),
            )?;
            layer.mix.offline_recv(sess, &[1, d], &[h, n])?;
            layer.proj.offline_recv(sess, &[d])?;
            let ln2 = NonlinearMaskP0::offline(
                sess,
                AnyPerm::TwoD(Permutation2D::random(1, d, &mut self.rng)),
            )?;
            layer.ffn1.offline_recv(sess, &[d])?;
            let gelu = NonlinearMaskP0::offline(
                sess,
                AnyPerm::Flat(Permutation::random(f, &mut self.rng)),
            )?;
            layer.ffn2.offline_recv(sess, &[f])?;
            self.layers[l].masks.push_back(LayerMasks0 {
                ln1,
                softmax,
                ln2,
                gelu,
            });
        }
        if predict {
            self.mul_head.offline_recv(sess, &[d])?;
            let cfg_he = self
                .he_cfg
                .clone()
                .ok_or(Error::StateReuse("offline before preparation"))?;
            let server = HeServer::new(cfg_he, self.allow_insecure_he)?;
            let perm = Permutation::random(n_vocab, &mut self.rng);
            self.pred_queue
                .push_back(PredictionP0::offline(sess, perm, server)?);
        }
        self.staged += 1;
        Ok(())
    }

    /// Online pass for one token. Returns P0's share of the final hidden
    /// state.
    pub fn process_token(&mut self, sess: &mut Session, predict: bool) -> Result<Tensor> {
        if self.done >= self.staged {
            return Err(Error::MaterialExhausted("token step not staged"));
        }
        let cfg = self.params.cfg.clone();
        let (d, n_vocab) = (cfg.d_model, cfg.n_vocab);
        let pos = self.done;
        let scale = 1.0 / (cfg.head_dim() as f32).sqrt();
        let onehot_share = Tensor::zeros(vec![n_vocab]);
        let mut x = self.mul_emb.online(sess, &onehot_share)?;
        x.add_assign(&Tensor::new(vec![d], self.params.pos.row(pos).to_vec())?)?;
        for l in 0..self.layers.len() {
            let (gamma1, beta1, gamma2, beta2) = {
                let lp = &self.params.layers[l];
                (
                    lp.ln1_gamma.clone(),
                    lp.ln1_beta.clone(),
                    lp.ln2_gamma.clone(),
                    lp.ln2_beta.clone(),
                )
            };
            let layer = &mut self.layers[l];
            let mut masks = layer
                .masks
                .pop_front()
                .ok_or(Error::MaterialExhausted("layer masks"))?;
            let x2d = x.clone().reshape(vec![1, d])?;
            let n0 = masks.ln1.online(sess, &x2d)?.reshape(vec![d])?;
            let xa = n0.hadamard(&gamma1)?.add(&beta1)?;
            let qkv = layer.qkv.online(sess, &xa)?;
            let q = Tensor::new(vec![d], qkv.data()[..d].to_vec())?;
            let key = Tensor::new(vec![1, d], qkv.data()[d..2 * d].to_vec())?;
            let val = Tensor::new(vec![1, d], qkv.data()[2 * d..].to_vec())?;
            let s = layer.scores.online(sess, &key, &q)?.scale(scale);
            let p = masks.softmax.online(sess, &s)?;
            let ctx = layer.mix.online(sess, &val, &p)?;
            let attn = layer.proj.online(sess, &ctx)?;
            x.add_assign(&attn)?;
            let x2d = x.clone().reshape(vec![1, d])?;
            let n2 = masks.ln2.online(sess, &x2d)?.reshape(vec![d])?;
            let xa2 = n2.hadamard(&gamma2)?.add(&beta2)?;
            let hid = layer.ffn1.online(sess, &xa2)?;
            let act = masks.gelu.online(sess, &hid)?;
            let ffn = layer.ffn2.online(sess, &act)?;
            x.add_assign(&ffn)?;
        }
        if predict {
            let s = self.mul_head.online(sess, &x)?;
            let pred = self
                .pred_queue
                .pop_front()
                .ok_or(Error::MaterialExhausted("prediction material"))?;
            pred.online(sess, &s)?;
        }
        self.done += 1;
        Ok(x)
    }

    /// Full run: preparation, then stage + process for every planned token.
    pub fn run(mut self, sess: &mut Session, plan: &GenPlan) -> Result<Vec<TokenRecord>> {
        plan.validate(&self.params.cfg)?;
        sess.timed(Phase::Preparation, |s| self.prepare(s))?;
        let mut out = Vec::new();
        for t in 0..plan.total_steps() {
            let predict = plan.predicts_at(t);
            let before = sess.snapshot();
            sess.timed(Phase::Offline, |s| self.stage_token(s, predict))?;
            let hidden = sess.timed(Phase::Online, |s| self.process_token(s, predict))?;
            out.push(TokenRecord {
                delta: sess.snapshot().delta_since(&before),
                hidden_share: hidden,
                token: None,
            });
        }
        Ok(out)
    }
}

/// Input-holder engine (P1).
pub struct SecureP1 {
    cfg: ModelConfig,
    he_cfg: HeConfig,
    allow_insecure_he: bool,
    rng: ChaCha8Rng,
    mul_emb: MulFixedParty,
    mul_head: MulFixedParty,
    layers: Vec<LayerP1>,
    /// Public LN affine scales, received in preparation: `(ln1, ln2)` per
    /// layer.
    gammas: Vec<(Tensor, Tensor)>,
    pred_queue: VecDeque<PredictionP1>,
    pending_client: Option<HeClient>,
    staged: usize,
    done: usize,
}

impl SecureP1 {
    pub fn new(
        cfg: ModelConfig,
        he_cfg: HeConfig,
        allow_insecure_he: bool,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let heads = cfg.n_heads;
        let layers = (0..cfg.n_layers)
            .map(|_| {
                Ok(LayerP1 {
                    qkv: MulFixedParty::new_p1(MulOp::MatMul),
                    proj: MulFixedParty::new_p1(MulOp::MatMul),
                    ffn1: MulFixedParty::new_p1(MulOp::MatMul),
                    ffn2: MulFixedParty::new_p1(MulOp::MatMul),
                    scores: MulGrowingParty::new(Role::P1, MulOp::HeadScores { heads })?,
                    mix: MulGrowingParty::new(Role::P1, MulOp::HeadMix { heads })?,
                    masks: VecDeque::new(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SecureP1 {
            mul_emb: MulFixedParty::new_p1(MulOp::MatMul),
            mul_head: MulFixedParty::new_p1(MulOp::MatMul),
            rng: ChaCha8Rng::seed_from_u64(seed),
            layers,
            cfg,
            he_cfg,
            allow_insecure_he,
            gammas: Vec::new(),
            pred_queue: VecDeque::new(),
            pending_client: None,
            staged: 0,
            done: 0,
        })
    }

    pub fn prepare(&mut self, sess: &mut Session) -> Result<()> {
        let d = self.cfg.d_model;
        let msg = sess.recv_expect(Role::P0, Phase::Preparation, ProtocolId::Control)?;
        let shapes = vec![vec![d]; 2 * self.cfg.n_layers];
        let mut parts = unpack_tensors(msg.body, &shapes)?.into_iter();
        for _ in 0..self.cfg.n_layers {
            let g1 = parts.next().unwrap();
            let g2 = parts.next().unwrap();
            self.gammas.push((g1, g2));
        }
        let client = HeClient::new(self.he_cfg.clone(), self.allow_insecure_he, &mut self.rng)?;
        prediction_handshake_p1(sess, &client)?;
        self.pending_client = Some(client);
        let dummy = ScaleHint::configured(0.0);
        self.mul_emb.prepare(sess, &dummy, 1.0)?;
        for layer in &mut self.layers {
            layer.qkv.prepare(sess, &dummy, 1.0)?;
            layer.proj.prepare(sess, &dummy, 1.0)?;
            layer.ffn1.prepare(sess, &dummy, 1.0)?;
            layer.ffn2.prepare(sess, &dummy, 1.0)?;
        }
        self.mul_head.prepare(sess, &dummy, 1.0)?;
        Ok(())
    }

    pub fn stage_token(&mut self, sess: &mut Session, predict: bool) -> Result<()> {
        let cfg = self.cfg.clone();
        if self.staged >= cfg.max_seq {
            return Err(Error::validation("cache overflow beyond max sequence length"));
        }
        let (d, h, f, n_vocab) = (cfg.d_model, cfg.n_heads, cfg.d_ffn, cfg.n_vocab);
        let n = self.staged + 1;
        self.mul_emb.offline_recv(sess, &[n_vocab])?;
        for l in 0..self.layers.len() {
            let ln1 = NonlinearMaskP1::offline(sess, &[1, d])?;
            let layer = &mut self.layers[l];
            layer.qkv.offline_recv(sess, &[d])?;
            layer.scores.offline_recv(sess, &[1, d], &[d])?;
            let softmax = NonlinearMaskP1::offline(sess, &[h, n])?;
            layer.mix.offline_recv(sess, &[1, d], &[h, n])?;
            layer.proj.offline_recv(sess, &[d])?;
            let ln2 = NonlinearMaskP1::offline(sess, &[1, d])?;
            layer.ffn1.offline_recv(sess, &[d])?;
            let gelu = NonlinearMaskP1::offline(sess, &[f])?;
            layer.ffn2.offline_recv(sess, &[f])?;
            self.layers[l].masks.push_back(LayerMasks1 {
                ln1,
                softmax,
                ln2,
                gelu,
            });
        }
        if predict {
            self.mul_head.offline_recv(sess, &[d])?;
            let client = match self.pending_client.take() {
                Some(c) => c,
                None => HeClient::new(self.he_cfg.clone(), self.allow_insecure_he, &mut self.rng)?,
            };
            self.pred_queue
                .push_back(PredictionP1::offline(sess, n_vocab, client)?);
        }
        self.staged += 1;
        Ok(())
    }

    /// Online pass for one token held by P1. Returns P1's hidden-state share
    /// and, on predicted steps, the retrieved next token id.
    pub fn process_token(
        &mut self,
        sess: &mut Session,
        token: usize,
        predict: bool,
    ) -> Result<(Tensor, Option<usize>)> {
        if self.done >= self.staged {
            return Err(Error::MaterialExhausted("token step not staged"));
        }
        let cfg = self.cfg.clone();
        let (d, n_vocab) = (cfg.d_model, cfg.n_vocab);
        if token >= n_vocab {
            return Err(Error::validation(format!(
                "token id {token} out of vocabulary {n_vocab}"
            )));
        }
        let scale = 1.0 / (cfg.head_dim() as f32).sqrt();
        let mut onehot = vec![0.0f32; n_vocab];
        onehot[token] = 1.0;
        let mut x = self
            .mul_emb
            .online(sess, &Tensor::new(vec![n_vocab], onehot)?)?;
        for l in 0..self.layers.len() {
            let (gamma1, gamma2) = self.gammas[l].clone();
            let layer = &mut self.layers[l];
            let mut masks = layer
                .masks
                .pop_front()
                .ok_or(Error::MaterialExhausted("layer masks"))?;
            let x2d = x.clone().reshape(vec![1, d])?;
            let n1 = masks
                .ln1
                .online(sess, &x2d, NonlinFn::NormalizeRows { eps: LN_EPS })?
                .reshape(vec![d])?;
            let xa = n1.hadamard(&gamma1)?;
            let qkv = layer.qkv.online(sess, &xa)?;
            let q = Tensor::new(vec![d], qkv.data()[..d].to_vec())?;
            let key = Tensor::new(vec![1, d], qkv.data()[d..2 * d].to_vec())?;
            let val = Tensor::new(vec![1, d], qkv.data()[2 * d..].to_vec())?;
            let s = layer.scores.online(sess, &key, &q)?.scale(scale);
            let p = masks.softmax.online(sess, &s, NonlinFn::SoftmaxRows)?;
            let ctx = layer.mix.online(sess, &val, &p)?;
            let attn = layer.proj.online(sess, &ctx)?;
            x.add_assign(&attn)?;
            let x2d = x.clone().reshape(vec![1, d])?;
            let n2 = masks
                .ln2
                .online(sess, &x2d, NonlinFn::NormalizeRows { eps: LN_EPS })?
                .reshape(vec![d])?;
            let xa2 = n2.hadamard(&gamma2)?;
            let hid = layer.ffn1.online(sess, &xa2)?;
            let act = masks.gelu.online(sess, &hid, NonlinFn::Gelu)?;
            let ffn = layer.ffn2.online(sess, &act)?;
            x.add_assign(&ffn)?;
        }
        let mut next = None;
        if predict {
            let s = self.mul_head.online(sess, &x)?;
            let pred = self
                .pred_queue
                .pop_front()
                .ok_or(Error::MaterialExhausted("prediction material"))?;
            let outcome = pred.online(sess, &s, &mut self.rng)?;
            next = Some(outcome.token);
        }
        self.done += 1;
        Ok((x, next))
    }

    /// Full run: drives generation from the prompt, feeding every retrieved
    /// token back in.
    pub fn run(
        mut self,
        sess: &mut Session,
        plan: &GenPlan,
        prompt: &[usize],
    ) -> Result<Vec<TokenRecord>> {
        plan.validate(&self.cfg)?;
        if prompt.len() != plan.prompt_len {
            return Err(Error::validation("prompt length does not match plan"));
        }
        if plan.total_steps() == 0 {
            return Ok(Vec::new());
        }
        sess.timed(Phase::Preparation, |s| self.prepare(s))?;
        let mut out = Vec::new();
        let mut next = prompt[0];
        for t in 0..plan.total_steps() {
            let predict = plan.predicts_at(t);
            let before = sess.snapshot();
            sess.timed(Phase::Offline, |s| self.stage_token(s, predict))?;
            let (hidden, tok) =
                sess.timed(Phase::Online, |s| self.process_token(s, next, predict))?;
            out.push(TokenRecord {
                delta: sess.snapshot().delta_since(&before),
                hidden_share: hidden,
                token: tok,
            });
            next = if t + 1 < prompt.len() {
                prompt[t + 1]
            } else {
                tok.ok_or_else(|| Error::validation("predicted step produced no token"))?
            };
        }
        Ok(out)
    }
}

struct LayerDealer {
    qkv: MulFixedDealer,
    proj: MulFixedDealer,
    ffn1: MulFixedDealer,
    ffn2: MulFixedDealer,
    scores: MulGrowingDealer,
    mix: MulGrowingDealer,
}

/// Dealer engine (P2): preparation and offline staging only.
pub struct SecureDealer {
    cfg: ModelConfig,
    k: f32,
    rng: ChaCha8Rng,
    hints: Option<HintTable>,
    mul_emb: Option<MulFixedDealer>,
    mul_head: Option<MulFixedDealer>,
    layers: Vec<LayerDealer>,
    staged: usize,
}

impl SecureDealer {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(SecureDealer {
            k: cfg.k_scale,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cfg,
            hints: None,
            mul_emb: None,
            mul_head: None,
            layers: Vec::new(),
            staged: 0,
        })
    }

    pub fn prepare(&mut self, sess: &mut Session) -> Result<()> {
        let msg = sess.recv_expect(Role::P0, Phase::Preparation, ProtocolId::Control)?;
        let hints = HintTable::from_wire(&msg.body.bytes()?)?;
        let cfg = &self.cfg;
        let (d, f, n_vocab, heads, k) = (cfg.d_model, cfg.d_ffn, cfg.n_vocab, cfg.n_heads, self.k);
        let mut emb = MulFixedDealer::new(
            MulOp::MatMul,
            vec![d, n_vocab],
            hints.get("emb.w")?,
            k,
        );
        emb.prepare(sess, &mut self.rng)?;
        self.mul_emb = Some(emb);
        for l in 0..cfg.n_layers {
            let mut layer = LayerDealer {
                qkv: MulFixedDealer::new(
                    MulOp::MatMul,
                    vec![3 * d, d],
                    hints.get(&format!("l{l}.qkv.w"))?,
                    k,
                ),
                proj: MulFixedDealer::new(
                    MulOp::MatMul,
                    vec![d, d],
                    hints.get(&format!("l{l}.proj.w"))?,
                    k,
                ),
                ffn1: MulFixedDealer::new(
                    MulOp::MatMul,
                    vec![f, d],
                    hints.get(&format!("l{l}.ffn1.w"))?,
                    k,
                ),
                ffn2: MulFixedDealer::new(
                    MulOp::MatMul,
                    vec![d, f],
                    hints.get(&format!("l{l}.ffn2.w"))?,
                    k,
                ),
                scores: MulGrowingDealer::new(
                    MulOp::HeadScores { heads },
                    hints.get(&format!("l{l}.k"))?,
                    k,
                ),
                mix: MulGrowingDealer::new(
                    MulOp::HeadMix { heads },
                    hints.get(&format!("l{l}.v"))?,
                    k,
                ),
            };
            layer.qkv.prepare(sess, &mut self.rng)?;
            layer.proj.prepare(sess, &mut self.rng)?;
            layer.ffn1.prepare(sess, &mut self.rng)?;
            layer.ffn2.prepare(sess, &mut self.rng)?;
            self.layers.push(layer);
        }
        let mut head = MulFixedDealer::new(
            MulOp::MatMul,
            vec![n_vocab, d],
            hints.get("head.w")?,
            k,
        );
        head.prepare(sess, &mut self.rng)?;
        self.mul_head = Some(head);
        self.hints = Some(hints);
        Ok(())
    }

    pub fn stage_token(&mut self, sess: &mut Session, predict: bool) -> Result<()> {
        let hints = self
            .hints
            .clone()
            .ok_or(Error::StateReuse("offline before preparation"))?;
        let cfg = self.cfg.clone();
        let (d, h, f, n_vocab, k) = (cfg.d_model, cfg.n_heads, cfg.d_ffn, cfg.n_vocab, self.k);
        let n = self.staged + 1;
        self.mul_emb
            .as_mut()
            .unwrap()
            .offline_one(sess, &[n_vocab], &hints.get("emb.onehot")?, &mut self.rng)?;
        for l in 0..self.layers.len() {
            nonlinear_dealer_offline(
                sess,
                &hints.get(&format!("l{l}.ln1.in"))?,
                &hints.get(&format!("l{l}.ln1.out"))?,
                k,
                &mut self.rng,
            )?;
            let layer = &mut self.layers[l];
            layer.qkv.offline_one(
                sess,
                &[d],
                &hints.get(&format!("l{l}.qkv.in"))?,
                &mut self.rng,
            )?;
            layer.scores.offline_step(
                sess,
                &[1, d],
                &[d],
                &hints.get(&format!("l{l}.q"))?,
                &mut self.rng,
            )?;
            nonlinear_dealer_offline(
                sess,
                &hints.get(&format!("l{l}.scores"))?,
                &hints.get(&format!("l{l}.probs"))?,
                k,
                &mut self.rng,
            )?;
            layer.mix.offline_step(
                sess,
                &[1, d],
                &[h, n],
                &hints.get(&format!("l{l}.probs"))?,
                &mut self.rng,
            )?;
            layer.proj.offline_one(
                sess,
                &[d],
                &hints.get(&format!("l{l}.ctx"))?,
                &mut self.rng,
            )?;
            nonlinear_dealer_offline(
                sess,
                &hints.get(&format!("l{l}.ln2.in"))?,
                &hints.get(&format!("l{l}.ln2.out"))?,
                k,
                &mut self.rng,
            )?;
            layer.ffn1.offline_one(
                sess,
                &[d],
                &hints.get(&format!("l{l}.ffn.in"))?,
                &mut self.rng,
            )?;
            nonlinear_dealer_offline(
                sess,
                &hints.get(&format!("l{l}.gelu.in"))?,
                &hints.get(&format!("l{l}.gelu.out"))?,
                k,
                &mut self.rng,
            )?;
            layer.ffn2.offline_one(
                sess,
                &[f],
                &hints.get(&format!("l{l}.gelu.out"))?,
                &mut self.rng,
            )?;
        }
        if predict {
            self.mul_head.as_mut().unwrap().offline_one(
                sess,
                &[d],
                &hints.get("head.in")?,
                &mut self.rng,
            )?;
            prediction_dealer_offline(sess, &hints.get("head.scores")?, k, &mut self.rng)?;
        }
        self.staged += 1;
        Ok(())
    }

    pub fn run(mut self, sess: &mut Session, plan: &GenPlan) -> Result<()> {
        plan.validate(&self.cfg)?;
        if plan.total_steps() == 0 {
            return Ok(());
        }
        sess.timed(Phase::Preparation, |s| self.prepare(s))?;
        for t in 0..plan.total_steps() {
            let predict = plan.predicts_at(t);
            sess.timed(Phase::Offline, |s| self.stage_token(s, predict))?;
        }
        Ok(())
    }
}

/// Result of an in-process three-party generation.
#[derive(Debug)]
pub struct SecureGenResult {
    /// Tokens retrieved by P1 (the output party), in order.
    pub tokens: Vec<usize>,
    pub p0: Vec<TokenRecord>,
    pub p1: Vec<TokenRecord>,
    /// Full end-of-run transcripts per role.
    pub transcript_p0: Transcript,
    pub transcript_p1: Transcript,
    pub transcript_p2: Transcript,
}

/// Run a complete secure greedy generation with all three parties in-process.
///
/// Calibration happens on P0's side from synthetic prompts before the
/// session starts.
#[allow(clippy::too_many_arguments)]
pub fn secure_generate(
    params: &ModelParams,
    prompt: &[usize],
    steps: usize,
    profile: LinkProfile,
    he_cfg: HeConfig,
    allow_insecure_he: bool,
    seed: u64,
) -> Result<SecureGenResult> {
    let plan = GenPlan {
        prompt_len: prompt.len(),
        gen_steps: steps,
    };
    plan.validate(&params.cfg)?;
    if plan.total_steps() == 0 {
        return Ok(SecureGenResult {
            tokens: vec![],
            p0: vec![],
            p1: vec![],
            transcript_p0: Transcript::default(),
            transcript_p1: Transcript::default(),
            transcript_p2: Transcript::default(),
        });
    }
    let hints = crate::model::calibrate(params, 2, params.cfg.max_seq.min(8), seed ^ 0xca11b)?;
    let engine0 = SecureP0::new(params.clone(), hints, allow_insecure_he, seed ^ 0xaa)?;
    let engine1 = SecureP1::new(
        params.cfg.clone(),
        he_cfg,
        allow_insecure_he,
        seed ^ 0xbb,
    )?;
    let dealer = SecureDealer::new(params.cfg.clone(), seed ^ 0xcc)?;
    let [s0, s1, s2] = crate::transport::establish_inproc_trio(profile);
    let (r0, r1, t2) = crate::transport::run_trio(
        [s0, s1, s2],
        move |mut sess| {
            let recs = engine0.run(&mut sess, &plan)?;
            Ok((recs, sess.snapshot()))
        },
        move |mut sess| {
            let recs = engine1.run(&mut sess, &plan, prompt)?;
            Ok((recs, sess.snapshot()))
        },
        move |mut sess| {
            dealer.run(&mut sess, &plan)?;
            Ok(sess.snapshot())
        },
    )?;
    let (p0, transcript_p0) = r0;
    let (p1, transcript_p1) = r1;
    let tokens = p1.iter().filter_map(|r| r.token).collect();
    Ok(SecureGenResult {
        tokens,
        p0,
        p1,
        transcript_p0,
        transcript_p1,
        transcript_p2: t2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gen_toy_model, greedy_generate, ModelConfig};
    use crate::sharing::reconstruct;
    use crate::sharing::Share;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            n_vocab: 120,
            d_model: 32,
            n_heads: 4,
            n_layers: 2,
            d_ffn: 64,
            max_seq: 16,
            ..ModelConfig::default()
        }
    }

    fn reconstruct_hidden(r0: &TokenRecord, r1: &TokenRecord) -> Tensor {
        let s0 = Share::new(Role::P0, r0.hidden_share.clone()).unwrap();
        let s1 = Share::new(Role::P1, r1.hidden_share.clone()).unwrap();
        reconstruct(&s0, &s1).unwrap()
    }

    #[test]
    fn secure_generation_matches_oracle_tokens_and_hidden() {
        let cfg = small_cfg();
        let params = gen_toy_model(&cfg).unwrap();
        let prompt = [5usize, 17, 3];
        let steps = 4;
        let oracle = greedy_generate(&params, &prompt, steps).unwrap();
        let sec = secure_generate(
            &params,
            &prompt,
            steps,
            LinkProfile::lan(),
            HeConfig::stub(),
            true,
            77,
        )
        .unwrap();
        assert_eq!(sec.tokens, oracle.tokens);
        for (t, (r0, r1)) in sec.p0.iter().zip(&sec.p1).enumerate() {
            let h = reconstruct_hidden(r0, r1);
            let rel = h.rel_frobenius(&oracle.hidden[t]);
            assert!(rel <= 1e-3, "step {t} hidden rel err {rel}");
        }
    }

    #[test]
    fn production_noise_scale_stays_within_f32_floor() {
        // At k = 100 the f32 share quantization floors the hidden-state
        // error near 2e-3; assert the engine stays within a scale-aware
        // bound there while the toy default k meets the tight 1e-3 budget.
        let mut cfg = small_cfg();
        cfg.k_scale = 100.0;
        let params = gen_toy_model(&cfg).unwrap();
        let prompt = [5usize, 17, 3];
        let oracle = greedy_generate(&params, &prompt, 2).unwrap();
        let sec = secure_generate(
            &params,
            &prompt,
            2,
            LinkProfile::lan(),
            HeConfig::stub(),
            true,
            77,
        )
        .unwrap();
        for (t, (r0, r1)) in sec.p0.iter().zip(&sec.p1).enumerate() {
            let rel = reconstruct_hidden(r0, r1).rel_frobenius(&oracle.hidden[t]);
            assert!(rel <= 1e-2, "step {t} hidden rel err {rel}");
        }
    }

    #[test]
    fn zero_steps_zero_online_rounds() {
        let cfg = small_cfg();
        let params = gen_toy_model(&cfg).unwrap();
        let sec = secure_generate(
            &params,
            &[1, 2, 3],
            0,
            LinkProfile::lan(),
            HeConfig::stub(),
            true,
            1,
        )
        .unwrap();
        assert!(sec.tokens.is_empty());
        assert_eq!(sec.transcript_p0.online.rounds, 0);
        assert_eq!(
            sec.transcript_p0.preparation.bytes_total()
                + sec.transcript_p0.offline.bytes_total()
                + sec.transcript_p0.online.bytes_total(),
            0
        );
    }

    #[test]
    fn per_layer_online_rounds_constant_18() {
        let cfg = small_cfg();
        let params = gen_toy_model(&cfg).unwrap();
        let sec = secure_generate(
            &params,
            &[2, 9],
            3,
            LinkProfile::lan(),
            HeConfig::stub(),
            true,
            5,
        )
        .unwrap();
        // Non-predicted step (the first of the prompt): 1 embed round plus
        // 18 per layer. Predicted steps add 1 head round and 4 retrieval
        // rounds.
        let l = cfg.n_layers as u64;
        let first = &sec.p1[0].delta;
        assert_eq!(
            first.online.rounds,
            EMBED_ONLINE_ROUNDS + LAYER_ONLINE_ROUNDS * l
        );
        for rec in &sec.p1[1..] {
            assert_eq!(
                rec.delta.online.rounds,
                EMBED_ONLINE_ROUNDS + LAYER_ONLINE_ROUNDS * l + PREDICT_ONLINE_ROUNDS
            );
        }
        assert!((16..=24).contains(&LAYER_ONLINE_ROUNDS));
    }

    #[test]
    fn unstaged_online_errors() {
        let cfg = small_cfg();
        let params = gen_toy_model(&cfg).unwrap();
        let hints = crate::model::calibrate(&params, 1, 4, 3).unwrap();
        let mut engine = SecureP0::new(params, hints, true, 1).unwrap();
        let [mut s0, _s1, _s2] = crate::transport::establish_inproc_trio(LinkProfile::lan());
        let err = engine.process_token(&mut s0, false).unwrap_err();
        assert!(matches!(err, Error::MaterialExhausted(_)));
    }

    #[test]
    fn plan_arithmetic() {
        let p = GenPlan {
            prompt_len: 6,
            gen_steps: 20,
        };
        assert_eq!(p.total_steps(), 25);
        assert!(!p.predicts_at(4));
        assert!(p.predicts_at(5));
        assert!(p.predicts_at(24));
        let z = GenPlan {
            prompt_len: 6,
            gen_steps: 0,
        };
        assert_eq!(z.total_steps(), 0);
        assert!(!z.predicts_at(5));
    }
}
