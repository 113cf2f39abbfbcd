//! Mini-batch training with Adam and validation-based early stopping, plus
//! test-set metrics.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Batch, VmdNetModel};
use crate::nn::{NnError, Tape};
use crate::rng::{stream_rng, stream_seed};
use crate::windowing::DecomposedDataset;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch} (op {op})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        op: String,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("dataset is empty")]
    EmptyDataset,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Number of consecutive non-improving validation epochs tolerated
    /// before stopping; 0 stops at the first non-improving epoch.
    pub patience: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            batch_size: 64,
            learning_rate: 1e-3,
            max_epochs: 50,
            patience: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// 1-based epoch whose parameters the model keeps.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Train in place. Minimizes batch MSE with Adam; after each epoch the
/// validation MSE decides early stopping, and the best-validation parameters
/// are restored at the end. Deterministic given the model seed.
pub fn train(
    model: &mut VmdNetModel,
    train_ds: &DecomposedDataset,
    val_ds: &DecomposedDataset,
    hyper: &TrainHyper,
) -> Result<TrainHistory, TrainError> {
    if train_ds.num_windows == 0 || val_ds.num_windows == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let seed = model.config.rng_seed;
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut best_val = f64::INFINITY;
    let mut best_params = model.store.snapshot();
    let mut since_best = 0usize;

    let mut indices: Vec<usize> = (0..train_ds.num_windows).collect();
    for epoch in 0..hyper.max_epochs {
        let mut rng = stream_rng(seed, "shuffle", epoch as u64);
        indices.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in indices.chunks(hyper.batch_size.max(1)).enumerate() {
            let batch = Batch::from_dataset(train_ds, chunk, &model.config)?;
            model.store.zero_grads();
            let dropout_seed = stream_seed(seed, "dropout", (epoch * 1_000_003 + bi) as u64);
            let mut tape = Tape::new(true, dropout_seed);
            let out = model.forward(&mut tape, &batch)?;
            let loss = tape.mse_loss(out, &batch.target)?;
            let loss_val = tape.value(loss).item();
            tape.backward(loss, &mut model.store).map_err(|e| match e {
                NnError::NonFinite { op } => TrainError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    op: op.to_string(),
                },
                other => TrainError::Nn(other),
            })?;
            if !loss_val.is_finite() || !model.store.grads_all_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    op: "loss/gradients".to_string(),
                });
            }
            model
                .store
                .adam_step(hyper.learning_rate, 0.9, 0.999, 1e-8);
            epoch_loss += loss_val;
            batches += 1;
        }
        history.train_loss.push(epoch_loss / batches as f64);

        let val = dataset_mse(model, val_ds, hyper.batch_size)?;
        history.val_loss.push(val);

        if val < best_val {
            best_val = val;
            history.best_epoch = epoch + 1;
            best_params = model.store.snapshot();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > hyper.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    model.store.restore(&best_params);
    Ok(history)
}

/// MSE and MAE over every window, in the normalized scale, with per-horizon
/// breakdowns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub per_horizon_mse: Vec<f64>,
    pub per_horizon_mae: Vec<f64>,
    pub num_windows: usize,
}

pub fn evaluate(model: &VmdNetModel, ds: &DecomposedDataset) -> Result<Metrics, TrainError> {
    if ds.num_windows == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let horizon = ds.horizon;
    let mut preds = Vec::with_capacity(ds.num_windows * horizon);
    let mut targets = Vec::with_capacity(ds.num_windows * horizon);
    let all: Vec<usize> = (0..ds.num_windows).collect();
    for chunk in all.chunks(256) {
        let batch = Batch::from_dataset(ds, chunk, &model.config)?;
        let mut tape = Tape::new(false, 0);
        let out = model.forward(&mut tape, &batch)?;
        preds.extend_from_slice(tape.value(out).data());
        targets.extend_from_slice(batch.target.data());
    }
    Ok(metrics_from_predictions(&preds, &targets, horizon))
}

/// Metric arithmetic, separated for direct testing: inputs are row-major
/// [windows x horizon].
pub fn metrics_from_predictions(preds: &[f64], targets: &[f64], horizon: usize) -> Metrics {
    assert_eq!(preds.len(), targets.len());
    let rows = preds.len() / horizon;
    let mut mse_h = vec![0.0; horizon];
    let mut mae_h = vec![0.0; horizon];
    for r in 0..rows {
        for h in 0..horizon {
            let e = preds[r * horizon + h] - targets[r * horizon + h];
            mse_h[h] += e * e;
            mae_h[h] += e.abs();
        }
    }
    for h in 0..horizon {
        mse_h[h] /= rows as f64;
        mae_h[h] /= rows as f64;
    }
    Metrics {
        mse: mse_h.iter().sum::<f64>() / horizon as f64,
        mae: mae_h.iter().sum::<f64>() / horizon as f64,
        per_horizon_mse: mse_h,
        per_horizon_mae: mae_h,
        num_windows: rows,
    }
}

fn dataset_mse(
    model: &VmdNetModel,
    ds: &DecomposedDataset,
    batch_size: usize,
) -> Result<f64, TrainError> {
    let all: Vec<usize> = (0..ds.num_windows).collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for chunk in all.chunks(batch_size.max(1)) {
        let batch = Batch::from_dataset(ds, chunk, &model.config)?;
        let mut tape = Tape::new(false, 0);
        let out = model.forward(&mut tape, &batch)?;
        let pred = tape.value(out);
        for (p, t) in pred.data().iter().zip(batch.target.data()) {
            sum += (p - t) * (p - t);
            count += 1;
        }
    }
    Ok(sum / count as f64)
}
