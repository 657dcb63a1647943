//! Conformance analysis: attribution-based impact curves, dynamic time
//! warping between learned and theoretical dynamics, and the statistical
//! test battery.

mod attribution;
mod dtw;
mod stats;

pub use attribution::{
    attribute, attribution_matrices, completeness_residual, impact_curve,
    impact_curve_from_attributions, AttributionConfig,
};
pub use dtw::{dtw_distance, dtw_raw};
pub use stats::{
    friedman_test, spearman_rho, wilcoxon_signed_rank, wilcoxon_signed_rank_with,
    Alternative,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no events on the requested channel in the calibration sample")]
    NoEvents,
    #[error("empty sequence")]
    EmptySequence,
    #[error("offset grids do not match")]
    GridMismatch,
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("constant input sequence")]
    ConstantInput,
    #[error("input lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("too few pairs after dropping zero differences: {0}")]
    TooFewPairs(usize),
    #[error("model error: {0}")]
    Model(#[from] crate::models::ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(String),
}

/// Attribution magnitude as a function of minutes since an event, with a
/// standard-error band. Offsets run 0–240 min in 5-minute steps; offset 0 is
/// the event slot itself, where the impact is structurally zero (an event in
/// the prediction slot is not a model input).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactCurve {
    pub offsets_min: Vec<f64>,
    pub mean_impact: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_events: Vec<usize>,
}

/// Standard offset grid for impact curves: 0, 5, …, 240 min.
pub fn curve_offsets() -> Vec<f64> {
    (0..=48).map(|k| k as f64 * 5.0).collect()
}

impl ImpactCurve {
    /// Wrap a theoretical (noise-free) curve sampled on the standard grid.
    pub fn theoretical(values: Vec<f64>) -> Self {
        let offsets = curve_offsets();
        assert_eq!(values.len(), offsets.len(), "theoretical curve length");
        let n = values.len();
        Self {
            offsets_min: offsets,
            mean_impact: values,
            stderr: vec![0.0; n],
            n_events: vec![1; n],
        }
    }

    /// Mean of the defined buckets (n ≥ 1) whose offset lies in
    /// `[lo_min, hi_min]`. Returns `None` when no bucket qualifies.
    pub fn mean_over(&self, lo_min: f64, hi_min: f64) -> Option<f64> {
        let mut sum = 0.0;
        let mut count = 0usize;
        for ((off, mean), n) in self
            .offsets_min
            .iter()
            .zip(&self.mean_impact)
            .zip(&self.n_events)
        {
            if *n >= 1 && *off >= lo_min && *off <= hi_min {
                sum += mean;
                count += 1;
            }
        }
        if count == 0 {
            None
        } else {
            Some(sum / count as f64)
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<(), AnalysisError> {
        writeln!(w, "offset_min,mean,stderr,n")?;
        for i in 0..self.offsets_min.len() {
            writeln!(
                w,
                "{},{},{},{}",
                self.offsets_min[i], self.mean_impact[i], self.stderr[i], self.n_events[i]
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self, AnalysisError> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut curve = Self {
            offsets_min: vec![],
            mean_impact: vec![],
            stderr: vec![],
            n_events: vec![],
        };
        for rec in rdr.records() {
            let rec = rec.map_err(|e| AnalysisError::Csv(e.to_string()))?;
            let field = |i: usize| -> Result<f64, AnalysisError> {
                rec.get(i)
                    .ok_or_else(|| AnalysisError::Csv(format!("missing column {i}")))?
                    .parse::<f64>()
                    .map_err(|e| AnalysisError::Csv(e.to_string()))
            };
            curve.offsets_min.push(field(0)?);
            curve.mean_impact.push(field(1)?);
            curve.stderr.push(field(2)?);
            curve.n_events.push(field(3)? as usize);
        }
        if curve.offsets_min.is_empty() {
            return Err(AnalysisError::EmptySequence);
        }
        Ok(curve)
    }
}

/// Total difference between learned and theoretical impact: DTW distance
/// between the z-score-normalized mean-impact sequences.
pub fn dynamics_error(
    learned: &ImpactCurve,
    theoretical: &ImpactCurve,
) -> Result<f64, AnalysisError> {
    if learned.offsets_min != theoretical.offsets_min {
        return Err(AnalysisError::GridMismatch);
    }
    dtw_distance(&learned.mean_impact, &theoretical.mean_impact)
}

/// Per-channel conformance summary written by the experiment pipeline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConformanceReport {
    pub channel: String,
    pub dynamics_error: f64,
    pub sign_summary: SignSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SignSummary {
    pub first_2h_mean: f64,
    pub full_4h_mean: f64,
}

impl ConformanceReport {
    pub fn new(
        channel: &str,
        learned: &ImpactCurve,
        theoretical: &ImpactCurve,
    ) -> Result<Self, AnalysisError> {
        Ok(Self {
            channel: channel.to_string(),
            dynamics_error: dynamics_error(learned, theoretical)?,
            sign_summary: SignSummary {
                first_2h_mean: learned.mean_over(0.0, 120.0).unwrap_or(0.0),
                full_4h_mean: learned.mean_over(0.0, 240.0).unwrap_or(0.0),
            },
        })
    }
}

#[cfg(test)]
mod curve_tests {
    use super::*;

    #[test]
    fn dynamics_error_zero_for_identical_curves() {
        let vals: Vec<f64> = (0..=48).map(|k| (k as f64 / 8.0).sin()).collect();
        let a = ImpactCurve::theoretical(vals.clone());
        let b = ImpactCurve::theoretical(vals);
        assert_eq!(dynamics_error(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn sign_flip_scores_worse() {
        let p = crate::hovorka::HovorkaParams::for_weight(70.0);
        let (carb, _) = crate::hovorka::theoretical_activity_curves(&p).unwrap();
        let flipped = ImpactCurve::theoretical(carb.mean_impact.iter().map(|v| -v).collect());
        let same = dynamics_error(&carb, &carb).unwrap();
        let flip = dynamics_error(&flipped, &carb).unwrap();
        assert!(flip > same, "flipped {flip} should exceed {same}");
    }

    #[test]
    fn grid_mismatch_is_reported() {
        let a = ImpactCurve::theoretical(vec![0.0; 49]);
        let mut b = ImpactCurve::theoretical(vec![0.0; 49]);
        b.offsets_min[3] = 14.0;
        assert!(matches!(
            dynamics_error(&a, &b),
            Err(AnalysisError::GridMismatch)
        ));
    }

    #[test]
    fn csv_round_trip() {
        let vals: Vec<f64> = (0..=48).map(|k| k as f64 * 0.25 - 3.0).collect();
        let curve = ImpactCurve::theoretical(vals);
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        let back = ImpactCurve::read_csv(&buf[..]).unwrap();
        assert_eq!(curve, back);
    }
}
