//! Scale calibration: per-site rms estimates that size every mask the dealer
//! draws.
//!
//! P0 runs the plaintext oracle on synthetic random prompts (never the real
//! input, which it does not have), accumulates the rms of every intermediate
//! site, and ships the resulting table to the dealer during preparation.
//! Only second-moment scales leave P0; no weights and no activations do.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ModelParams, PlainState};
use crate::sharing::{HintSource, ScaleHint};

/// Site-name -> rms table, serialized as JSON on the wire.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct HintTable {
    map: BTreeMap<String, f32>,
}

impl HintTable {
    pub fn insert(&mut self, site: &str, rms: f32) {
        self.map.insert(site.to_string(), rms);
    }

    pub fn get(&self, site: &str) -> Result<ScaleHint> {
        let rms = *self
            .map
            .get(site)
            .ok_or_else(|| Error::validation(format!("no scale hint for site {site}")))?;
        ScaleHint::new(rms, HintSource::Calibrated)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn to_wire(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("hint table serializes")
    }

    pub fn from_wire(bytes: &[u8]) -> Result<HintTable> {
        serde_json::from_slice(bytes).map_err(|e| Error::Decode(format!("hint table: {e}")))
    }
}

/// Build the hint table from `n_prompts` random prompts of `len` tokens.
///
/// Adds the structural and weight-scale entries the activation probes cannot
/// see: the one-hot rms `sqrt(1/N)` and the rms of each fixed operand.
pub fn calibrate(params: &ModelParams, n_prompts: usize, len: usize, seed: u64) -> Result<HintTable> {
    if n_prompts == 0 || len == 0 {
        return Err(Error::validation("calibration needs at least one prompt token"));
    }
    let cfg = &params.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for _ in 0..n_prompts {
        let mut st = PlainState::new(params);
        for _ in 0..len.min(cfg.max_seq) {
            let tok = rng.random_range(0..cfg.n_vocab);
            let h = st.step_probed(tok, &mut |site, t| {
                let e = sums.entry(site.to_string()).or_insert((0.0, 0));
                e.0 += t.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
                e.1 += t.len();
            })?;
            let scores = st.logits(&h)?;
            let e = sums.entry("head.scores".to_string()).or_insert((0.0, 0));
            e.0 += scores
                .data()
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>();
            e.1 += scores.len();
        }
    }
    let mut table = HintTable::default();
    for (site, (sq, count)) in sums {
        table.insert(&site, (sq / count as f64).sqrt() as f32);
    }
    table.insert("emb.onehot", (1.0 / cfg.n_vocab as f32).sqrt());
    table.insert("emb.w", params.emb.rms());
    table.insert("head.w", params.emb.rms());
    for (l, layer) in params.layers.iter().enumerate() {
        table.insert(&format!("l{l}.qkv.w"), layer.w_qkv.rms());
        table.insert(&format!("l{l}.proj.w"), layer.w_o.rms());
        table.insert(&format!("l{l}.ffn1.w"), layer.w1.rms());
        table.insert(&format!("l{l}.ffn2.w"), layer.w2.rms());
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{gen_toy_model, ModelConfig};

    #[test]
    fn covers_every_engine_site() {
        let params = gen_toy_model(&ModelConfig::default()).unwrap();
        let t = calibrate(&params, 2, 4, 7).unwrap();
        for l in 0..2 {
            for site in [
                "ln1.in", "ln1.out", "qkv.in", "q", "k", "v", "scores", "probs", "ctx",
                "ln2.in", "ln2.out", "ffn.in", "gelu.in", "gelu.out", "qkv.w", "proj.w",
                "ffn1.w", "ffn2.w",
            ] {
                let hint = t.get(&format!("l{l}.{site}")).unwrap();
                assert!(hint.rms > 0.0, "l{l}.{site}");
            }
        }
        for site in ["emb.onehot", "emb.w", "head.w", "head.in", "head.scores"] {
            assert!(t.get(site).unwrap().rms > 0.0, "{site}");
        }
        assert!(t.get("nonexistent").is_err());
    }

    #[test]
    fn wire_roundtrip_is_exact() {
        let params = gen_toy_model(&ModelConfig::default()).unwrap();
        let t = calibrate(&params, 1, 3, 1).unwrap();
        let back = HintTable::from_wire(&t.to_wire()).unwrap();
        assert_eq!(t.len(), back.len());
        assert_eq!(
            t.get("l0.scores").unwrap().rms,
            back.get("l0.scores").unwrap().rms
        );
    }

    #[test]
    fn normalized_sites_near_unit_scale() {
        let params = gen_toy_model(&ModelConfig::default()).unwrap();
        let t = calibrate(&params, 2, 6, 3).unwrap();
        let rms = t.get("l0.ln1.out").unwrap().rms;
        assert!((0.9..1.1).contains(&rms), "ln out rms {rms}");
        let probs = t.get("l0.probs").unwrap().rms;
        assert!(probs <= 1.0, "probs rms {probs}");
    }
}
