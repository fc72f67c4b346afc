//! Loss, training loop, metrics, baselines, cross-validation and ablations.

mod ablate;
mod baselines;
mod cv;
mod fit;
mod loss;
mod metrics;

use serde::{Deserialize, Serialize};

use crate::csai::CsaiConfig;
use crate::error::{invalid, Result};
use crate::masking::{MaskMode, Permutation};

pub use ablate::{ablate, AblationAxis, AblationReport, AblationRow, FoldRow};
pub use baselines::{baseline_value, Baseline};
pub use cv::{cross_validate, fold_splits, summarize, CvReport, CvSummary, FoldResult, MeanStd};
pub use fit::{
    evaluate, evaluate_baseline, evaluate_split, predict, prepare_splits, run_split, split_plan, split_result, train,
    BaselineMetrics, EpochRecord, Prediction, PreparedSplits, SplitEvaluation, SplitResult, TrainOutcome,
};
pub use loss::{bce_with_logits, compute_loss, loss_graph, reconstruction_loss, LossComponents, LossWeights, ReconTarget};
pub use metrics::{auc, score_cells, Metrics};

/// Artificial masking settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskingConfig {
    /// Share of observed cells to hide.
    pub rate: f64,
    /// Strength of the non-uniform reweighting.
    pub adjust_factor: f64,
    pub permutation: Permutation,
    pub mode: MaskMode,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            rate: 0.1,
            adjust_factor: 5.0,
            permutation: Permutation::TrainOnly,
            mode: MaskMode::Corrected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Epochs without a new best validation MAE before stopping.
    pub patience: usize,
    pub folds: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub masking: MaskingConfig,
    pub model: CsaiConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            patience: 20,
            folds: 5,
            seed: 0,
            loss: LossWeights::default(),
            masking: MaskingConfig::default(),
            model: CsaiConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_eps > 0.0) {
            return Err(invalid("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        let m = &self.masking;
        if !(0.0..1.0).contains(&m.rate) {
            return Err(invalid(format!("masking rate must lie in [0, 1), got {}", m.rate)));
        }
        if !(m.adjust_factor >= 0.0 && m.adjust_factor.is_finite()) {
            return Err(invalid(format!("adjust_factor must be nonnegative, got {}", m.adjust_factor)));
        }
        self.loss.validate()?;
        self.model.validate()
    }
}
