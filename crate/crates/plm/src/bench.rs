//! Benchmark runner and report emitter.
//!
//! Every number in a report comes from a [`Transcript`] snapshot taken
//! around the measured operation; nothing is estimated. Rounds and bytes are
//! deterministic for a given spec and seed, so they are asserted equal
//! across repetitions and only wall time is averaged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::he::{HeClient, HeConfig};
use crate::model::{
    calibrate, gen_toy_model, GenPlan, ModelConfig, SecureDealer, SecureP0, SecureP1,
};
use crate::perm::{AnyPerm, Permutation};
use crate::pir::{
    prediction_dealer_offline, prediction_handshake_p0, prediction_handshake_p1, PredictionP0,
    PredictionP1,
};
use crate::protocols::{nonlinear_dealer_offline, NonlinFn, NonlinearMaskP0, NonlinearMaskP1};
use crate::sharing::{estimate_rms, DEFAULT_K};
use crate::tensor::randn;
use crate::transport::{
    establish_inproc_trio, run_trio, LinkProfile, Phase, Role, Session, Transcript,
};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Nonlinear,
    Argmax,
    Layer,
    Generate,
}

impl Suite {
    pub fn name(&self) -> &'static str {
        match self {
            Suite::Nonlinear => "nonlinear",
            Suite::Argmax => "argmax",
            Suite::Layer => "layer",
            Suite::Generate => "generate",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Suite> {
        match s {
            "nonlinear" => Ok(Suite::Nonlinear),
            "argmax" => Ok(Suite::Argmax),
            "layer" => Ok(Suite::Layer),
            "generate" => Ok(Suite::Generate),
            other => Err(Error::validation(format!("unknown suite {other}"))),
        }
    }
}

/// Named network profile.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum ProfileSpec {
    Lan,
    WanA,
    WanB,
    Custom {
        rtt_ms: f64,
        bandwidth_mbps: Option<f64>,
    },
}

impl ProfileSpec {
    pub fn link(&self) -> LinkProfile {
        match self {
            ProfileSpec::Lan => LinkProfile::lan(),
            ProfileSpec::WanA => LinkProfile::wan_a(),
            ProfileSpec::WanB => LinkProfile::wan_b(),
            ProfileSpec::Custom {
                rtt_ms,
                bandwidth_mbps,
            } => LinkProfile::new(*rtt_ms, bandwidth_mbps.map(|m| m * 1e6)),
        }
    }

    pub fn name(&self) -> String {
        match self {
            ProfileSpec::Lan => "lan".into(),
            ProfileSpec::WanA => "wan-a".into(),
            ProfileSpec::WanB => "wan-b".into(),
            ProfileSpec::Custom {
                rtt_ms,
                bandwidth_mbps,
            } => match bandwidth_mbps {
                Some(m) => format!("custom-{rtt_ms}ms-{m}mbps"),
                None => format!("custom-{rtt_ms}ms"),
            },
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BenchSpec {
    pub suite: Suite,
    /// Element count (nonlinear/argmax), hidden width d (layer), or
    /// generation steps (generate).
    pub size: usize,
    /// Prompt length for the generate suite.
    pub prompt_len: usize,
    pub profile: ProfileSpec,
    pub reps: usize,
    pub seed: u64,
    /// Model configuration for the generate suite (the layer suite derives
    /// its own single-layer config from `size`).
    pub model: ModelConfig,
}

impl BenchSpec {
    pub fn new(suite: Suite, size: usize) -> Self {
        BenchSpec {
            suite,
            size,
            prompt_len: 6,
            profile: ProfileSpec::Lan,
            reps: 3,
            seed: 0,
            model: ModelConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps < 3 {
            return Err(Error::validation("timing rows need at least 3 repetitions"));
        }
        if self.size == 0 {
            return Err(Error::validation("size must be positive"));
        }
        self.model.validate()?;
        if self.suite == Suite::Generate {
            GenPlan {
                prompt_len: self.prompt_len,
                gen_steps: self.size,
            }
            .validate(&self.model)?;
        }
        Ok(())
    }
}

/// One report row; counters come from P1's transcript deltas.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BenchRow {
    pub label: String,
    pub online_rounds: u64,
    pub online_bytes: u64,
    pub offline_rounds: u64,
    pub offline_bytes: u64,
    pub prep_rounds: u64,
    pub prep_bytes: u64,
    pub wall_ms_mean: f64,
    pub wall_ms_std: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BenchReport {
    pub schema_version: String,
    pub suite: String,
    pub profile: String,
    pub reps: usize,
    pub seed: u64,
    pub rows: Vec<BenchRow>,
    /// Present when a party failed; the report is then partial.
    pub failure: Option<String>,
}

/// Run the spec end to end with an in-process trio, once per repetition.
pub fn run_bench(spec: &BenchSpec) -> BenchReport {
    let mut report = BenchReport {
        schema_version: SCHEMA_VERSION.to_string(),
        suite: spec.suite.name().to_string(),
        profile: spec.profile.name(),
        reps: spec.reps,
        seed: spec.seed,
        rows: vec![],
        failure: None,
    };
    if let Err(e) = spec.validate() {
        report.failure = Some(e.to_string());
        return report;
    }
    let mut walls: Vec<Vec<f64>> = vec![];
    for rep in 0..spec.reps {
        let rows = match run_rep(spec) {
            Ok(r) => r,
            Err(e) => {
                report.failure = Some(format!("repetition {rep}: {e}"));
                break;
            }
        };
        if rep == 0 {
            for (label, t) in &rows {
                report.rows.push(BenchRow {
                    label: label.clone(),
                    online_rounds: t.online.rounds,
                    online_bytes: t.online.bytes_total(),
                    offline_rounds: t.offline.rounds,
                    offline_bytes: t.offline.bytes_total(),
                    prep_rounds: t.preparation.rounds,
                    prep_bytes: t.preparation.bytes_total(),
                    wall_ms_mean: 0.0,
                    wall_ms_std: 0.0,
                });
                walls.push(vec![]);
            }
        } else if rows.len() != report.rows.len()
            || rows.iter().zip(&report.rows).any(|((_, t), row)| {
                t.online.rounds != row.online_rounds
                    || t.online.bytes_total() != row.online_bytes
                    || t.offline.bytes_total() != row.offline_bytes
            })
        {
            report.failure = Some(format!(
                "repetition {rep}: nondeterministic rounds/bytes for fixed spec"
            ));
            break;
        }
        for (i, (_, t)) in rows.iter().enumerate() {
            walls[i].push(t.online.wall_s * 1e3);
        }
    }
    for (row, w) in report.rows.iter_mut().zip(&walls) {
        if w.is_empty() {
            continue;
        }
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        row.wall_ms_mean = mean;
        row.wall_ms_std = var.sqrt();
    }
    report
}

/// One repetition with an in-process trio; rows come from P1.
fn run_rep(spec: &BenchSpec) -> Result<Vec<(String, Transcript)>> {
    let [s0, s1, s2] = establish_inproc_trio(spec.profile.link());
    let (_, rows, _) = run_trio(
        [s0, s1, s2],
        |mut sess: Session| run_bench_role(spec, Role::P0, &mut sess),
        |mut sess: Session| run_bench_role(spec, Role::P1, &mut sess),
        |mut sess: Session| run_bench_role(spec, Role::P2, &mut sess),
    )?;
    Ok(rows)
}

/// One repetition of `spec` for one role over an established session. Rows
/// are only produced on P1 (the measuring party); the other roles return an
/// empty list. Counters are deltas, so several repetitions may share one
/// session.
pub fn run_bench_role(
    spec: &BenchSpec,
    role: Role,
    sess: &mut Session,
) -> Result<Vec<(String, Transcript)>> {
    match spec.suite {
        Suite::Nonlinear => nonlinear_role(spec, role, sess),
        Suite::Argmax => argmax_role(spec, role, sess),
        Suite::Layer => layer_role(spec, role, sess),
        Suite::Generate => generate_role(spec, role, sess),
    }
}

/// The benchmark input is synthetic, so every role derives the plaintext
/// and the sharing mask from the public seed instead of communicating them.
fn derived_shares(n: usize, seed: u64) -> Result<(crate::tensor::Tensor, crate::tensor::Tensor)> {
    let x = randn(vec![n], 1.0, seed);
    let hint = estimate_rms(&x)?;
    let s0 = crate::sharing::gaussian_mask(&[n], &hint, DEFAULT_K, seed ^ 0x5ea1);
    let s1 = x.sub(&s0)?;
    Ok((s0, s1))
}

fn nonlinear_role(
    spec: &BenchSpec,
    role: Role,
    sess: &mut Session,
) -> Result<Vec<(String, Transcript)>> {
    let n = spec.size;
    let seed = spec.seed;
    let before = sess.snapshot();
    match role {
        Role::P0 => {
            let (x0, _) = derived_shares(n, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa);
            let perm = AnyPerm::Flat(Permutation::random(n, &mut rng));
            let mut mask = sess.timed(Phase::Offline, |s| NonlinearMaskP0::offline(s, perm))?;
            sess.timed(Phase::Online, |s| mask.online(s, &x0))?;
            Ok(vec![])
        }
        Role::P1 => {
            let (_, x1) = derived_shares(n, seed)?;
            let mut mask = sess.timed(Phase::Offline, |s| NonlinearMaskP1::offline(s, &[n]))?;
            sess.timed(Phase::Online, |s| mask.online(s, &x1, NonlinFn::Gelu))?;
            Ok(vec![(
                n.to_string(),
                sess.snapshot().delta_since(&before),
            )])
        }
        Role::P2 => {
            let x = randn(vec![n], 1.0, seed);
            let hint_in = estimate_rms(&x)?;
            let hint_out = estimate_rms(&NonlinFn::Gelu.apply(&x))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc);
            sess.timed(Phase::Offline, |s| {
                nonlinear_dealer_offline(s, &hint_in, &hint_out, DEFAULT_K, &mut rng)
            })?;
            Ok(vec![])
        }
    }
}

fn argmax_role(
    spec: &BenchSpec,
    role: Role,
    sess: &mut Session,
) -> Result<Vec<(String, Transcript)>> {
    let n = spec.size;
    let seed = spec.seed;
    let before = sess.snapshot();
    match role {
        Role::P0 => {
            let (s0, _) = derived_shares(n, seed)?;
            let server = sess.timed(Phase::Preparation, |s| prediction_handshake_p0(s, false))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa);
            let perm = Permutation::random(n, &mut rng);
            let pred = sess.timed(Phase::Offline, |s| PredictionP0::offline(s, perm, server))?;
            sess.timed(Phase::Online, |s| pred.online(s, &s0))?;
            Ok(vec![])
        }
        Role::P1 => {
            let (_, s1) = derived_shares(n, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb);
            let client = HeClient::new(HeConfig::bfv_default(), false, &mut rng)?;
            sess.timed(Phase::Preparation, |s| prediction_handshake_p1(s, &client))?;
            let pred = sess.timed(Phase::Offline, |s| PredictionP1::offline(s, n, client))?;
            sess.timed(Phase::Online, |s| pred.online(s, &s1, &mut rng))?;
            Ok(vec![(
                n.to_string(),
                sess.snapshot().delta_since(&before),
            )])
        }
        Role::P2 => {
            let x = randn(vec![n], 1.0, seed);
            let hint = estimate_rms(&x)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc);
            sess.timed(Phase::Offline, |s| {
                prediction_dealer_offline(s, &hint, DEFAULT_K, &mut rng)
            })?;
            Ok(vec![])
        }
    }
}

/// Single-layer config for a given hidden width.
pub fn layer_config(d: usize) -> ModelConfig {
    let heads = [32usize, 16, 8, 4, 2, 1]
        .into_iter()
        .find(|&h| d.is_multiple_of(h))
        .unwrap_or(1);
    ModelConfig {
        n_vocab: 128,
        d_model: d,
        n_heads: heads,
        n_layers: 1,
        d_ffn: 4 * d,
        max_seq: 8,
        ..ModelConfig::default()
    }
}

const LAYER_STEPS: usize = 2;

fn layer_role(
    spec: &BenchSpec,
    role: Role,
    sess: &mut Session,
) -> Result<Vec<(String, Transcript)>> {
    let cfg = layer_config(spec.size);
    let seed = spec.seed;
    match role {
        Role::P0 => {
            let params = gen_toy_model(&cfg)?;
            let hints = calibrate(&params, 1, LAYER_STEPS, seed)?;
            let mut engine = SecureP0::new(params, hints, true, seed ^ 0xa)?;
            sess.timed(Phase::Preparation, |s| engine.prepare(s))?;
            for _ in 0..LAYER_STEPS {
                sess.timed(Phase::Offline, |s| engine.stage_token(s, false))?;
                sess.timed(Phase::Online, |s| engine.process_token(s, false))?;
            }
            Ok(vec![])
        }
        Role::P1 => {
            let mut engine = SecureP1::new(cfg, HeConfig::stub(), true, seed ^ 0xb)?;
            sess.timed(Phase::Preparation, |s| engine.prepare(s))?;
            let mut rows = vec![];
            for t in 0..LAYER_STEPS {
                let before = sess.snapshot();
                sess.timed(Phase::Offline, |s| engine.stage_token(s, false))?;
                sess.timed(Phase::Online, |s| engine.process_token(s, t + 1, false))?;
                rows.push((format!("step{t}"), sess.snapshot().delta_since(&before)));
            }
            Ok(rows)
        }
        Role::P2 => {
            let mut dealer = SecureDealer::new(cfg, seed ^ 0xc)?;
            sess.timed(Phase::Preparation, |s| dealer.prepare(s))?;
            for _ in 0..LAYER_STEPS {
                sess.timed(Phase::Offline, |s| dealer.stage_token(s, false))?;
            }
            Ok(vec![])
        }
    }
}

fn generate_role(
    spec: &BenchSpec,
    role: Role,
    sess: &mut Session,
) -> Result<Vec<(String, Transcript)>> {
    let cfg = spec.model.clone();
    let seed = spec.seed;
    let plan = GenPlan {
        prompt_len: spec.prompt_len,
        gen_steps: spec.size,
    };
    match role {
        Role::P0 => {
            let params = gen_toy_model(&cfg)?;
            let hints = calibrate(&params, 2, cfg.max_seq.min(8), seed ^ 0xca11b)?;
            let engine = SecureP0::new(params, hints, false, seed ^ 0xaa)?;
            engine.run(sess, &plan)?;
            Ok(vec![])
        }
        Role::P1 => {
            // The benchmark prompt is synthetic and seed-derived.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let prompt: Vec<usize> = (0..spec.prompt_len)
                .map(|_| rng.random_range(0..cfg.n_vocab))
                .collect();
            let engine = SecureP1::new(cfg, HeConfig::bfv_default(), false, seed ^ 0xbb)?;
            let recs = engine.run(sess, &plan, &prompt)?;
            // One row per generated token: the first aggregates all prompt
            // positions (the first token always costs more), the rest are
            // one position step each.
            let mut rows = vec![];
            let first_span = spec.prompt_len.min(recs.len());
            let mut agg = Transcript::default();
            for r in &recs[..first_span] {
                agg.absorb(&r.delta);
            }
            rows.push(("token1".to_string(), agg));
            for (i, r) in recs[first_span..].iter().enumerate() {
                rows.push((format!("token{}", i + 2), r.delta.clone()));
            }
            Ok(rows)
        }
        Role::P2 => {
            let dealer = SecureDealer::new(cfg, seed ^ 0xcc)?;
            dealer.run(sess, &plan)?;
            Ok(vec![])
        }
    }
}

/// Serialize a report with stable field ordering.
pub fn emit_report(report: &BenchReport, format: &str) -> Result<Vec<u8>> {
    match format {
        "json" => {
            let mut v = serde_json::to_vec_pretty(report)
                .map_err(|e| Error::validation(e.to_string()))?;
            v.push(b'\n');
            Ok(v)
        }
        "csv" => {
            let mut out = String::new();
            out.push_str(
                "schema_version,suite,profile,reps,seed,label,online_rounds,online_bytes,\
                 offline_rounds,offline_bytes,prep_rounds,prep_bytes,wall_ms_mean,wall_ms_std,\
                 failure\n",
            );
            let failure = report.failure.clone().unwrap_or_default();
            for r in &report.rows {
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    report.schema_version,
                    report.suite,
                    report.profile,
                    report.reps,
                    report.seed,
                    r.label,
                    r.online_rounds,
                    r.online_bytes,
                    r.offline_rounds,
                    r.offline_bytes,
                    r.prep_rounds,
                    r.prep_bytes,
                    r.wall_ms_mean,
                    r.wall_ms_std,
                    failure,
                ));
            }
            if report.rows.is_empty() {
                out.push_str(&format!(
                    "{},{},{},{},{},,,,,,,,,,{}\n",
                    report.schema_version,
                    report.suite,
                    report.profile,
                    report.reps,
                    report.seed,
                    failure,
                ));
            }
            Ok(out.into_bytes())
        }
        "table" => {
            let mut out = String::new();
            out.push_str(&format!(
                "suite={} profile={} reps={} seed={} schema={}\n",
                report.suite, report.profile, report.reps, report.seed, report.schema_version
            ));
            if let Some(f) = &report.failure {
                out.push_str(&format!("PARTIAL REPORT, failure: {f}\n"));
            }
            out.push_str(&format!(
                "{:<10} {:>9} {:>12} {:>9} {:>13} {:>12} {:>12}\n",
                "row", "on.rounds", "on.bytes", "off.rnds", "off.bytes", "wall.ms", "std.ms"
            ));
            for r in &report.rows {
                out.push_str(&format!(
                    "{:<10} {:>9} {:>12} {:>9} {:>13} {:>12.3} {:>12.3}\n",
                    r.label,
                    r.online_rounds,
                    r.online_bytes,
                    r.offline_rounds,
                    r.offline_bytes,
                    r.wall_ms_mean,
                    r.wall_ms_std
                ));
            }
            Ok(out.into_bytes())
        }
        other => Err(Error::validation(format!("unknown format {other}"))),
    }
}
