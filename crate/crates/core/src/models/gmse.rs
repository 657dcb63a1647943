//! Glucose-specific mean squared error: squared error with a smooth
//! multiplicative penalty that amplifies overestimates near the low-glucose
//! region and underestimates near the high-glucose region.

use super::ModelError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmseConfig {
    pub hypo_threshold: f64,
    pub hyper_threshold: f64,
    /// Asymptotic penalty factor in the dangerous corners; ≥ 1.
    pub penalty_max: f64,
    /// Width of the sigmoid blend, mg/dl.
    pub transition_width: f64,
}

impl Default for GmseConfig {
    fn default() -> Self {
        Self {
            hypo_threshold: 70.0,
            hyper_threshold: 180.0,
            penalty_max: 2.5,
            transition_width: 10.0,
        }
    }
}

impl GmseConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.penalty_max < 1.0 {
            return Err(ModelError::InvalidConfig(format!(
                "penalty_max {} must be >= 1",
                self.penalty_max
            )));
        }
        if self.hypo_threshold >= self.hyper_threshold {
            return Err(ModelError::InvalidConfig(
                "thresholds must be ordered hypo < hyper".into(),
            ));
        }
        if !(self.transition_width > 0.0) {
            return Err(ModelError::InvalidConfig(
                "transition_width must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Penalty factor: 1 everywhere except the two dangerous corners
/// (overestimation below the hypo threshold, underestimation above the
/// hyper threshold), where it blends smoothly toward `penalty_max`.
fn penalty(target: f64, prediction: f64, cfg: &GmseConfig) -> f64 {
    let w = cfg.transition_width;
    let hypo_gate = sigmoid((cfg.hypo_threshold - target) / w);
    let over_gate = sigmoid((prediction - target) / w);
    let hyper_gate = sigmoid((target - cfg.hyper_threshold) / w);
    let under_gate = sigmoid((target - prediction) / w);
    1.0 + (cfg.penalty_max - 1.0) * (hypo_gate * over_gate + hyper_gate * under_gate)
}

/// Loss for one (target, prediction) pair.
pub fn gmse_single(target: f64, prediction: f64, cfg: &GmseConfig) -> f64 {
    let err = target - prediction;
    err * err * penalty(target, prediction, cfg)
}

/// Loss and its derivative with respect to the prediction.
pub fn gmse_single_grad(target: f64, prediction: f64, cfg: &GmseConfig) -> (f64, f64) {
    let w = cfg.transition_width;
    let err = target - prediction;
    let hypo_gate = sigmoid((cfg.hypo_threshold - target) / w);
    let over_gate = sigmoid((prediction - target) / w);
    let hyper_gate = sigmoid((target - cfg.hyper_threshold) / w);
    let under_gate = sigmoid((target - prediction) / w);
    let pen = 1.0 + (cfg.penalty_max - 1.0) * (hypo_gate * over_gate + hyper_gate * under_gate);
    let dpen = (cfg.penalty_max - 1.0) / w
        * (hypo_gate * over_gate * (1.0 - over_gate) - hyper_gate * under_gate * (1.0 - under_gate));
    let loss = err * err * pen;
    let dloss = -2.0 * err * pen + err * err * dpen;
    (loss, dloss)
}

/// Mean glucose-specific squared error over paired lists.
pub fn gmse(targets: &[f64], predictions: &[f64], cfg: &GmseConfig) -> Result<f64, ModelError> {
    if targets.len() != predictions.len() {
        return Err(ModelError::LengthMismatch {
            targets: targets.len(),
            predictions: predictions.len(),
        });
    }
    if targets.is_empty() {
        return Err(ModelError::LengthMismatch {
            targets: 0,
            predictions: 0,
        });
    }
    let sum: f64 = targets
        .iter()
        .zip(predictions)
        .map(|(g, p)| gmse_single(*g, *p, cfg))
        .sum();
    Ok(sum / targets.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn zero_when_predictions_equal_targets() {
        let cfg = GmseConfig::default();
        let g = vec![60.0, 120.0, 250.0];
        assert_eq!(gmse(&g, &g, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn overestimation_in_hypo_region_costs_more() {
        let cfg = GmseConfig::default();
        let over = gmse_single(60.0, 80.0, &cfg);
        let under = gmse_single(60.0, 40.0, &cfg);
        assert!(over > under, "over {over} vs under {under}");
    }

    #[test]
    fn underestimation_in_hyper_region_costs_more() {
        let cfg = GmseConfig::default();
        let under = gmse_single(200.0, 180.0, &cfg);
        let over = gmse_single(200.0, 220.0, &cfg);
        assert!(under > over, "under {under} vs over {over}");
    }

    #[test]
    fn safe_band_is_symmetric_to_within_blend_leakage() {
        let cfg = GmseConfig::default();
        let up = gmse_single(120.0, 130.0, &cfg);
        let down = gmse_single(120.0, 110.0, &cfg);
        // The sigmoid blend leaks a sliver of penalty into the safe band;
        // the two directions agree to well under a percent.
        assert!((up - down).abs() / up < 0.005, "up {up} vs down {down}");
    }

    #[test]
    fn never_below_plain_mse() {
        let cfg = GmseConfig::default();
        let mut rng = crate::seeds::rng(21, "gmse-fuzz");
        for _ in 0..10_000 {
            let g = rng.gen_range(30.0..400.0);
            let p = rng.gen_range(30.0..400.0);
            let loss = gmse_single(g, p, &cfg);
            let mse = (g - p) * (g - p);
            assert!(loss >= mse - 1e-12, "g {g} p {p}: {loss} < {mse}");
            assert!(loss <= mse * cfg.penalty_max + 1e-9);
        }
    }

    #[test]
    fn mismatched_lengths_error() {
        let cfg = GmseConfig::default();
        assert!(matches!(
            gmse(&[1.0], &[1.0, 2.0], &cfg),
            Err(ModelError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = GmseConfig::default();
        let mut rng = crate::seeds::rng(22, "gmse-grad");
        for _ in 0..500 {
            let g = rng.gen_range(40.0..350.0);
            let p = rng.gen_range(40.0..350.0);
            let (_, grad) = gmse_single_grad(g, p, &cfg);
            let h = 1e-5;
            let fd = (gmse_single(g, p + h, &cfg) - gmse_single(g, p - h, &cfg)) / (2.0 * h);
            let denom = grad.abs().max(fd.abs()).max(1e-6);
            assert!(
                ((grad - fd) / denom).abs() < 1e-6,
                "g {g} p {p}: analytic {grad} vs fd {fd}"
            );
        }
    }
}
