//! Single-layer physiologically constrained model: the prediction is the
//! last observed glucose plus a signed linear correction over all lags and
//! channels. Carbohydrate channels are constrained to contribute
//! non-negatively and insulin channels non-positively through a softplus
//! reparameterization, so the constraints hold for every parameter value.

use super::{glucose_index, Model, ModelError};
use crate::features::{Channel, NormStats, WINDOW_STEPS};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Free,
    NonNegative,
    NonPositive,
}

impl Sign {
    /// Default constraint for a channel: carbohydrates push glucose up,
    /// insulin pulls it down, everything else is unconstrained.
    pub fn for_channel(channel: Channel) -> Sign {
        match channel {
            Channel::Carbs | Channel::CarbActivity => Sign::NonNegative,
            Channel::TotalInsulin | Channel::InsulinActivity | Channel::HclsBasal => {
                Sign::NonPositive
            }
            _ => Sign::Free,
        }
    }

    pub(crate) fn code(&self) -> u8 {
        match self {
            Sign::Free => 0,
            Sign::NonNegative => 1,
            Sign::NonPositive => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Sign> {
        match code {
            0 => Some(Sign::Free),
            1 => Some(Sign::NonNegative),
            2 => Some(Sign::NonPositive),
            _ => None,
        }
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
pub struct HybridModel {
    channels: Vec<Channel>,
    norm: NormStats,
    signs: Vec<Sign>,
    /// Free parameters: `48 × F` lag weights followed by the bias.
    params: Vec<f64>,
    glucose_idx: usize,
}

impl HybridModel {
    pub fn new(norm: NormStats, seed: u64) -> Self {
        let channels = norm.channels.clone();
        let signs: Vec<Sign> = channels.iter().map(|c| Sign::for_channel(*c)).collect();
        Self::with_signs(norm, signs, seed)
    }

    pub fn with_signs(norm: NormStats, signs: Vec<Sign>, seed: u64) -> Self {
        let channels = norm.channels.clone();
        assert_eq!(signs.len(), channels.len());
        let f = channels.len();
        let mut rng = crate::seeds::rng(seed, "hybrid-init");
        let mut params = Vec::with_capacity(WINDOW_STEPS * f + 1);
        for _ in 0..WINDOW_STEPS {
            for sign in &signs {
                let v = match sign {
                    // softplus(−6 + ε) starts the effective weight near zero.
                    Sign::NonNegative | Sign::NonPositive => -6.0 + rng.gen_range(-0.5..0.5),
                    Sign::Free => rng.gen_range(-0.01..0.01),
                };
                params.push(v);
            }
        }
        params.push(0.0); // bias
        let glucose_idx = glucose_index(&channels);
        Self {
            channels,
            norm,
            signs,
            params,
            glucose_idx,
        }
    }

    pub(crate) fn from_parts(norm: NormStats, signs: Vec<Sign>, params: Vec<f64>) -> Self {
        let channels = norm.channels.clone();
        assert_eq!(params.len(), WINDOW_STEPS * channels.len() + 1);
        let glucose_idx = glucose_index(&channels);
        Self {
            channels,
            norm,
            signs,
            params,
            glucose_idx,
        }
    }

    pub fn signs(&self) -> &[Sign] {
        &self.signs
    }

    /// Effective (sign-transformed) weight for a lag and channel.
    pub fn effective_weight(&self, step: usize, channel: usize) -> f64 {
        let theta = self.params[step * self.channels.len() + channel];
        match self.signs[channel] {
            Sign::Free => theta,
            Sign::NonNegative => softplus(theta),
            Sign::NonPositive => -softplus(theta),
        }
    }
}

impl Model for HybridModel {
    fn kind_name(&self) -> &'static str {
        "hybrid"
    }

    fn channels(&self) -> &[Channel] {
        &self.channels
    }

    fn norm(&self) -> &NormStats {
        &self.norm
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, raw: &[f64]) -> f64 {
        let f = self.channels.len();
        debug_assert_eq!(raw.len(), WINDOW_STEPS * f);
        let anchor = raw[(WINDOW_STEPS - 1) * f + self.glucose_idx];
        let bias = self.params[WINDOW_STEPS * f];
        let mut correction = bias;
        for s in 0..WINDOW_STEPS {
            for c in 0..f {
                let x = (raw[s * f + c] - self.norm.mean[c]) / self.norm.std[c];
                correction += self.effective_weight(s, c) * x;
            }
        }
        anchor + correction
    }

    fn backward(
        &self,
        raw: &[f64],
        upstream: f64,
        mut param_grad: Option<&mut [f64]>,
        mut input_grad: Option<&mut [f64]>,
    ) -> f64 {
        let f = self.channels.len();
        let anchor = raw[(WINDOW_STEPS - 1) * f + self.glucose_idx];
        let bias = self.params[WINDOW_STEPS * f];
        let mut correction = bias;
        for s in 0..WINDOW_STEPS {
            for c in 0..f {
                let idx = s * f + c;
                let x = (raw[idx] - self.norm.mean[c]) / self.norm.std[c];
                let theta = self.params[idx];
                let (w, dw) = match self.signs[c] {
                    Sign::Free => (theta, 1.0),
                    Sign::NonNegative => (softplus(theta), sigmoid(theta)),
                    Sign::NonPositive => (-softplus(theta), -sigmoid(theta)),
                };
                correction += w * x;
                if let Some(pg) = param_grad.as_deref_mut() {
                    pg[idx] += upstream * x * dw;
                }
                if let Some(ig) = input_grad.as_deref_mut() {
                    ig[idx] += upstream * w / self.norm.std[c];
                }
            }
        }
        if let Some(pg) = param_grad.as_deref_mut() {
            pg[WINDOW_STEPS * f] += upstream;
        }
        if let Some(ig) = input_grad {
            ig[(WINDOW_STEPS - 1) * f + self.glucose_idx] += upstream;
        }
        anchor + correction
    }
}
