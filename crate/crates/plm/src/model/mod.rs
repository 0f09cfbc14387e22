//! Toy transformer model: configuration, deterministic parameter generator,
//! plaintext reference oracle, scale calibration, and the three-party secure
//! inference engine built from the protocol layer.

pub mod calibrate;
pub mod config;
pub mod engine;
pub mod params;
pub mod plain;

pub use calibrate::{calibrate, HintTable};
pub use config::ModelConfig;
pub use engine::{
    secure_generate, GenPlan, SecureDealer, SecureGenResult, SecureP0, SecureP1, TokenRecord,
    EMBED_ONLINE_ROUNDS,
    LAYER_ONLINE_ROUNDS, PREDICT_ONLINE_ROUNDS,
};
pub use params::{gen_toy_model, LayerParams, ModelParams};
pub use plain::{greedy_generate, GenTrace, PlainState, LN_EPS};

use crate::tensor::Tensor;

/// Callback receiving every named intermediate tensor of an oracle step.
pub type SiteProbe<'p> = &'p mut dyn FnMut(&str, &Tensor);
