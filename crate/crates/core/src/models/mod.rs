//! Trainable predictors: the sign-constrained hybrid model and the dilated
//! recurrent network, the glucose-specific MSE objective, a reverse-mode
//! gradient core with finite-difference verification, the training loop and
//! hyperparameter search.

mod checkpoint;
mod dilated;
mod gmse;
mod hybrid;
mod search;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, LoadedModel};
pub use dilated::DilatedRnn;
pub use gmse::{gmse, gmse_single, gmse_single_grad, GmseConfig};
pub use hybrid::{HybridModel, Sign};
pub use search::{hyperparameter_search, SearchResult, SearchSpace};
pub use train::{backprop_check, dataset_gmse, train, EpochLog, TrainingLog};

use crate::features::{Channel, NormStats, WindowAccess};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("targets and predictions differ in length: {targets} vs {predictions}")]
    LengthMismatch { targets: usize, predictions: usize },
    #[error("window channel schema does not match the model")]
    SchemaMismatch,
    #[error("loss became non-finite at epoch {epoch}")]
    DivergenceDetected { epoch: usize },
    #[error("training requires a non-empty {0} set")]
    EmptySet(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// A differentiable glucose predictor over raw 48-step window matrices.
///
/// Models own their normalization statistics and read the persistence anchor
/// (the final raw glucose) from the matrix itself, so the full prediction is
/// a differentiable function of the raw window.
pub trait Model: Send + Sync {
    fn kind_name(&self) -> &'static str;
    fn channels(&self) -> &[Channel];
    fn norm(&self) -> &NormStats;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// Prediction (mg/dl) from a raw, unnormalized `48 × F` matrix.
    fn forward(&self, raw: &[f64]) -> f64;

    /// Reverse pass. Returns the prediction and accumulates the gradient of
    /// `upstream · ŷ` into the buffers that are present: `param_grad` over
    /// the flat parameter vector, `input_grad` over the raw input matrix.
    fn backward(
        &self,
        raw: &[f64],
        upstream: f64,
        param_grad: Option<&mut [f64]>,
        input_grad: Option<&mut [f64]>,
    ) -> f64;

    fn n_params(&self) -> usize {
        self.params().len()
    }
}

/// Mini-batch optimization settings. The seed fully determines training
/// given a fixed data order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub step_size: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            step_size: 3e-3,
            batch_size: 64,
            max_epochs: 30,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.step_size > 0.0) {
            return Err(ModelError::InvalidConfig(format!(
                "step_size {} must be positive",
                self.step_size
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(ModelError::InvalidConfig(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Predict one window after checking the channel schema.
pub fn predict(
    model: &dyn Model,
    windows: &dyn WindowAccess,
    idx: usize,
) -> Result<f64, ModelError> {
    if windows.channels() != model.channels() {
        return Err(ModelError::SchemaMismatch);
    }
    let mut buf = vec![0.0; windows.matrix_len()];
    windows.materialize_into(idx, &mut buf);
    let y = model.forward(&buf);
    debug_assert!(y.is_finite());
    Ok(y)
}

/// Index of the glucose channel inside a schema.
pub(crate) fn glucose_index(channels: &[Channel]) -> usize {
    channels
        .iter()
        .position(|c| *c == Channel::Glucose)
        .expect("schema contains the glucose channel")
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::features::{FeatureWindow, TagSet, WindowStore, WINDOW_STEPS};
    use chrono::TimeZone;
    use rand::Rng;

    /// Synthetic windows with an AR-style glucose trace, occasional meals and
    /// boluses, and a target that extrapolates the recent trend plus a meal
    /// bump — learnable structure for optimizer tests.
    pub fn synthetic_store(n: usize, seed: u64) -> WindowStore {
        let channels = crate::features::base_channels();
        let f = channels.len();
        let mut rng = crate::seeds::rng(seed, "models-testutil");
        let mut windows = Vec::with_capacity(n);
        for w in 0..n {
            let mut matrix = vec![0.0; WINDOW_STEPS * f];
            let mut g = rng.gen_range(90.0..200.0);
            let mut trend: f64 = rng.gen_range(-1.5..1.5);
            let mut carbs_recent = 0.0;
            for s in 0..WINDOW_STEPS {
                trend = 0.9 * trend + rng.gen_range(-0.4..0.4);
                g = (g + trend).clamp(45.0, 380.0);
                let meal = if rng.gen_bool(0.02) {
                    rng.gen_range(15.0..70.0)
                } else {
                    0.0
                };
                if s >= WINDOW_STEPS - 6 {
                    carbs_recent += meal;
                }
                let bolus = if meal > 0.0 { meal / 12.0 } else { 0.0 };
                let basal = 0.8;
                matrix[s * f] = g;
                matrix[s * f + 1] = basal;
                matrix[s * f + 2] = basal * 5.0 / 60.0 + bolus;
                matrix[s * f + 3] = 1.0 + rng.gen_range(0.0..0.5);
                matrix[s * f + 4] = meal;
                matrix[s * f + 5] = carbs_recent;
                matrix[s * f + 6] = 0.8;
                matrix[s * f + 7] = 70.0;
                matrix[s * f + 8] = (w % 24) as f64;
            }
            let target = (g + 2.0 * trend + 0.05 * carbs_recent
                + rng.gen_range(-0.5..0.5))
            .clamp(40.0, 400.0);
            windows.push(FeatureWindow {
                participant_id: "synthetic".into(),
                end_time: chrono::Utc.timestamp_opt(1_577_836_800 + 300 * w as i64, 0).unwrap(),
                matrix,
                target_mgdl: target,
                tags: TagSet::default(),
            });
        }
        WindowStore { channels, windows }
    }

    pub fn fitted_norm(store: &WindowStore) -> NormStats {
        // Plain per-channel moments over all window entries.
        let f = store.channels.len();
        let mut mean = vec![0.0; f];
        let mut m2 = vec![0.0; f];
        let mut count = 0u64;
        for w in &store.windows {
            for s in 0..WINDOW_STEPS {
                count += 1;
                for c in 0..f {
                    let x = w.matrix[s * f + c];
                    let d = x - mean[c];
                    mean[c] += d / count as f64;
                    m2[c] += d * (x - mean[c]);
                }
            }
        }
        let std = m2
            .iter()
            .map(|v| {
                let sd = (v / count as f64).sqrt();
                if sd < 1e-9 {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        NormStats {
            channels: store.channels.clone(),
            mean,
            std,
        }
    }
}
