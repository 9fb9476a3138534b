//! Model file written by `fit`: the fitted model plus the preprocessing
//! recipe needed to turn a raw CSV into its feature matrix.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use survmix::baselines::KMeansSurvivalModel;
use survmix::data::PreprocessRecipe;
use survmix::mixture::SurvMixModel;
use survmix::SurvivalPredictor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum Fitted {
    Survmixclust(SurvMixModel),
    KmeansSurvival(KMeansSurvivalModel),
}

impl Fitted {
    pub fn predictor(&self) -> &dyn SurvivalPredictor {
        match self {
            Fitted::Survmixclust(m) => m,
            Fitted::KmeansSurvival(m) => m,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bundle {
    pub recipe: PreprocessRecipe,
    /// Largest observed time in the training data; the default curve grid
    /// ends here.
    pub train_max_time: f64,
    pub model: Fitted,
}

impl Bundle {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing model file {}", path.display()))
    }
}
