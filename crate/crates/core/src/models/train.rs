//! Mini-batch training with adaptive per-parameter step sizes, early
//! stopping on validation loss, and a finite-difference gradient check.

use super::{gmse_single, gmse_single_grad, GmseConfig, Model, ModelError, TrainConfig};
use crate::features::WindowAccess;
use rand::seq::SliceRandom;
use rand::Rng;
use std::io::Write;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_gmse: f64,
    pub val_gmse: f64,
    pub is_best: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_gmse: f64,
}

impl TrainingLog {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        writeln!(w, "epoch,train_gmse,val_gmse")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{}", e.epoch, e.train_gmse, e.val_gmse)?;
        }
        Ok(())
    }
}

/// Mean gMSE of a model over a window collection.
pub fn dataset_gmse(model: &dyn Model, windows: &dyn WindowAccess, loss: &GmseConfig) -> f64 {
    debug_assert_eq!(windows.channels(), model.channels());
    let mut buf = vec![0.0; windows.matrix_len()];
    let mut total = 0.0;
    for i in 0..windows.len() {
        windows.materialize_into(i, &mut buf);
        total += gmse_single(windows.target(i), model.forward(&buf), loss);
    }
    total / windows.len().max(1) as f64
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Fit a model: Adam over mini-batch gMSE, early stop when validation fails
/// to improve for `patience` epochs, return the best-validation snapshot.
/// Fully deterministic for a fixed seed.
pub fn train<M: Model + Clone>(
    mut model: M,
    train_windows: &dyn WindowAccess,
    val_windows: &dyn WindowAccess,
    cfg: &TrainConfig,
    loss: &GmseConfig,
) -> Result<(M, TrainingLog), ModelError> {
    cfg.validate()?;
    loss.validate()?;
    if train_windows.is_empty() {
        return Err(ModelError::EmptySet("training"));
    }
    if val_windows.is_empty() {
        return Err(ModelError::EmptySet("validation"));
    }
    if train_windows.channels() != model.channels() || val_windows.channels() != model.channels()
    {
        return Err(ModelError::SchemaMismatch);
    }

    let n_params = model.n_params();
    let mut adam_m = vec![0.0; n_params];
    let mut adam_v = vec![0.0; n_params];
    let mut step = 0u64;

    let mut grad = vec![0.0; n_params];
    let mut window_grad = vec![0.0; n_params];
    let mut buf = vec![0.0; train_windows.matrix_len()];

    let mut best_params = model.params().to_vec();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut epochs_without_improvement = 0;
    let mut log = TrainingLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_gmse: f64::INFINITY,
    };

    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let mut rng = crate::seeds::rng(cfg.seed, &format!("train-epoch-{epoch}"));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            for &w in batch {
                train_windows.materialize_into(w, &mut buf);
                window_grad.iter_mut().for_each(|g| *g = 0.0);
                let pred = model.backward(&buf, 1.0, Some(&mut window_grad), None);
                let (l, dl_dy) = gmse_single_grad(train_windows.target(w), pred, loss);
                epoch_loss += l;
                let k = dl_dy * scale;
                for (g, wg) in grad.iter_mut().zip(&window_grad) {
                    *g += k * wg;
                }
            }
            step += 1;
            let bias1 = 1.0 - ADAM_BETA1.powi(step as i32);
            let bias2 = 1.0 - ADAM_BETA2.powi(step as i32);
            let params = model.params_mut();
            for i in 0..n_params {
                let g = grad[i];
                adam_m[i] = ADAM_BETA1 * adam_m[i] + (1.0 - ADAM_BETA1) * g;
                adam_v[i] = ADAM_BETA2 * adam_v[i] + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = adam_m[i] / bias1;
                let v_hat = adam_v[i] / bias2;
                params[i] -= cfg.step_size * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        let train_gmse = epoch_loss / train_windows.len() as f64;
        let val_gmse = dataset_gmse(&model, val_windows, loss);
        if !train_gmse.is_finite() || !val_gmse.is_finite() {
            return Err(ModelError::DivergenceDetected { epoch });
        }
        let is_best = val_gmse < best_val;
        if is_best {
            best_val = val_gmse;
            best_epoch = epoch;
            best_params.copy_from_slice(model.params());
            epochs_without_improvement = 0;
        } else {
            epochs_without_improvement += 1;
        }
        log.epochs.push(EpochLog {
            epoch,
            train_gmse,
            val_gmse,
            is_best,
        });
        if epochs_without_improvement >= cfg.patience {
            break;
        }
    }
    model.params_mut().copy_from_slice(&best_params);
    log.best_epoch = best_epoch;
    log.best_val_gmse = best_val;
    Ok((model, log))
}

/// Maximum relative error between reverse-mode parameter gradients of the
/// window loss and central finite differences. For large models a seeded
/// subsample of `max_checked` parameters is probed.
pub fn backprop_check<M: Model>(
    model: &mut M,
    raw: &[f64],
    target: f64,
    loss: &GmseConfig,
    max_checked: usize,
    seed: u64,
) -> f64 {
    let n = model.n_params();
    if n == 0 {
        return 0.0;
    }
    let mut analytic = vec![0.0; n];
    let pred = model.backward(raw, 1.0, Some(&mut analytic), None);
    let (_, dl_dy) = gmse_single_grad(target, pred, loss);
    for g in analytic.iter_mut() {
        *g *= dl_dy;
    }

    let indices: Vec<usize> = if n <= max_checked {
        (0..n).collect()
    } else {
        let mut rng = crate::seeds::rng(seed, "backprop-check");
        let mut picked = std::collections::BTreeSet::new();
        while picked.len() < max_checked {
            picked.insert(rng.gen_range(0..n));
        }
        picked.into_iter().collect()
    };

    let h = 1e-4;
    let mut worst = 0.0f64;
    for idx in indices {
        let original = model.params()[idx];
        model.params_mut()[idx] = original + h;
        let up = gmse_single(target, model.forward(raw), loss);
        model.params_mut()[idx] = original - h;
        let down = gmse_single(target, model.forward(raw), loss);
        model.params_mut()[idx] = original;
        let fd = (up - down) / (2.0 * h);
        let denom = analytic[idx].abs().max(fd.abs()).max(1e-3);
        worst = worst.max((analytic[idx] - fd).abs() / denom);
    }
    worst
}
