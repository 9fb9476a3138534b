pub mod baselines;
pub mod classifier;
pub mod data;
pub mod error;
pub mod metrics;
pub mod mixture;
pub mod nonparam;
pub mod predictor;
pub mod protocol;
pub mod seeds;
pub mod synth;

pub use error::{Error, Result};
pub use predictor::SurvivalPredictor;
