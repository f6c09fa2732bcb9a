//! Penalized-likelihood training: SGD with momentum, stepped learning-rate
//! schedule, per-epoch evaluation, and best-accuracy checkpointing.
//!
//! The optional ridge penalty enters as `lambda * w` added to the gradient
//! before the momentum update (coupled weight decay); the default `lambda = 0`
//! matches the plain recipe.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{batches, BatchPlan, Dataset};
use crate::error::{GodeError, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::{tape::Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub momentum: f64,
    /// Ridge penalty weight (lambda).
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_batch_size: usize,
    /// Crop padding for train batches; 0 disables augmentation.
    pub augment_pad: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 160,
            batch_size: 128,
            lr0: 0.1,
            lr_drop_epochs: vec![60, 100, 140],
            lr_drop_factor: 10.0,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            eval_batch_size: 1000,
            augment_pad: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(GodeError::Config("batch sizes must be at least 1".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(GodeError::Config("weight_decay must be >= 0".into()));
        }
        if self.lr_drop_factor.is_nan() || self.lr_drop_factor <= 0.0 {
            return Err(GodeError::Config("lr_drop_factor must be positive".into()));
        }
        for w in self.lr_drop_epochs.windows(2) {
            if w[1] <= w[0] {
                return Err(GodeError::Config(
                    "lr_drop_epochs must be strictly increasing".into(),
                ));
            }
        }
        if let (Some(&last), true) = (self.lr_drop_epochs.last(), self.epochs > 0) {
            if last >= self.epochs {
                return Err(GodeError::Config(format!(
                    "lr drop at epoch {last} is outside {} epochs",
                    self.epochs
                )));
            }
        }
        Ok(())
    }
}

/// Learning rate at a given epoch: `lr0 / factor^(drops at or before epoch)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let drops = cfg.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
    cfg.lr0 / cfg.lr_drop_factor.powi(drops as i32)
}

/// Mean negative log-likelihood of the labels under softmax logits.
pub fn cross_entropy<S: Scalar>(
    tape: &Tape<S>,
    logits: &Tensor<S>,
    labels: &[usize],
) -> Result<Tensor<S>> {
    tape.cross_entropy(logits, labels)
}

/// Momentum buffers, one per parameter, in parameter order.
pub struct SgdState<S: Scalar> {
    velocity: Vec<Vec<S>>,
}

impl<S: Scalar> SgdState<S> {
    pub fn new(params: &[(String, Tensor<S>)]) -> Self {
        SgdState {
            velocity: params
                .iter()
                .map(|(_, p)| vec![S::ZERO; p.numel()])
                .collect(),
        }
    }
}

/// One update: `v <- momentum*v + g + lambda*w; w <- w - lr*v`.
pub fn sgd_momentum_step<S: Scalar>(
    params: &[(String, Tensor<S>)],
    state: &mut SgdState<S>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let lr = S::from_f64(lr);
    let mu = S::from_f64(momentum);
    let wd = S::from_f64(weight_decay);
    for ((_, p), v) in params.iter().zip(state.velocity.iter_mut()) {
        let grad = p.grad().expect("optimizer runs on trainable parameters");
        p.update_data(|w| {
            for i in 0..w.len() {
                let g = grad[i] + wd * w[i];
                v[i] = mu * v[i] + g;
                w[i] -= lr * v[i];
            }
        });
    }
}

/// Correct predictions under argmax with lowest-index tie-breaking.
pub(crate) fn count_correct<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    let data = logits.data();
    labels
        .iter()
        .enumerate()
        .filter(|(r, &label)| {
            let row = &data[r * k..(r + 1) * k];
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best == label
        })
        .count()
}

/// Test error percent: `100 * (1 - correct/N)`. Accuracy is independent of
/// the batch size used here.
pub fn evaluate<S: Scalar>(model: &Model<S>, ds: &Dataset<S>, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(GodeError::Config(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    let mut correct = 0usize;
    for (images, labels) in batches(ds, &BatchPlan::eval(batch_size))? {
        let tape = Tape::inference();
        let logits = model.forward(&tape, &images)?;
        correct += count_correct(&logits, &labels);
    }
    Ok(100.0 * (1.0 - correct as f64 / ds.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_error_pct: f64,
    pub sec_per_iter: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<EpochRow>,
}

impl TrainReport {
    pub fn best_test_error(&self) -> Option<f64> {
        self.rows
            .iter()
            .map(|r| r.test_error_pct)
            .fold(None, |acc, e| Some(acc.map_or(e, |a: f64| a.min(e))))
    }

    /// Deterministic columns only; timing lives in the sidecar CSV so reruns
    /// are byte-identical.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,train_acc,test_error_pct\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.lr, r.train_loss, r.train_acc, r.test_error_pct
            ));
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        let mut out = String::from("epoch,sec_per_iter\n");
        for r in &self.rows {
            out.push_str(&format!("{},{}\n", r.epoch, r.sec_per_iter));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<TrainReport> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(GodeError::Config(format!(
                    "report line {i} has {} fields",
                    fields.len()
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| GodeError::Config(format!("report line {i}: {e}")))
            };
            rows.push(EpochRow {
                epoch: fields[0]
                    .parse()
                    .map_err(|e| GodeError::Config(format!("report line {i}: {e}")))?,
                lr: parse(fields[1])?,
                train_loss: parse(fields[2])?,
                train_acc: parse(fields[3])?,
                test_error_pct: parse(fields[4])?,
                sec_per_iter: 0.0,
            });
        }
        Ok(TrainReport { rows })
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

fn epoch_seed(base: u64, epoch: usize) -> u64 {
    base ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Full training loop. Deterministic given the config seed and single-worker
/// execution. When `ckpt_path` is set, the best-accuracy parameters are kept
/// on disk (a zero-epoch run leaves the initialization there).
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    train_ds: &Dataset<S>,
    test_ds: &Dataset<S>,
    cfg: &TrainConfig,
    ckpt_path: Option<&Path>,
) -> Result<TrainReport> {
    train_with_progress(model, train_ds, test_ds, cfg, ckpt_path, |_| {})
}

/// [`train`] with a per-epoch callback (the CLI streams rows as they finish).
pub fn train_with_progress<S: Scalar>(
    model: &mut Model<S>,
    train_ds: &Dataset<S>,
    test_ds: &Dataset<S>,
    cfg: &TrainConfig,
    ckpt_path: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<TrainReport> {
    cfg.validate()?;
    let params = model.parameters();
    let mut state = SgdState::new(&params);
    let mut report = TrainReport::default();
    let mut best_err = f64::INFINITY;
    if let Some(path) = ckpt_path {
        checkpoint::save(model, path)?;
    }
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let plan = BatchPlan {
            batch_size: cfg.batch_size,
            seed: Some(epoch_seed(cfg.seed, epoch)),
            drop_last: false,
            augment_pad: cfg.augment_pad,
        };
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;
        let mut iter_times = Vec::new();
        for (iteration, (images, labels)) in batches(train_ds, &plan)?.enumerate() {
            let t0 = Instant::now();
            let tape = Tape::new();
            let logits = model.forward(&tape, &images)?;
            let loss = tape.cross_entropy(&logits, &labels)?;
            let loss_value = loss.item().to_f64();
            if !loss_value.is_finite() {
                return Err(GodeError::TrainingDiverged {
                    epoch,
                    iteration,
                    msg: format!("loss = {loss_value}"),
                });
            }
            model.zero_grads();
            tape.backward(&loss)?;
            sgd_momentum_step(&params, &mut state, lr, cfg.momentum, cfg.weight_decay);
            iter_times.push(t0.elapsed().as_secs_f64());
            loss_sum += loss_value * labels.len() as f64;
            correct += count_correct(&logits, &labels);
            seen += labels.len();
        }
        let test_error_pct = evaluate(model, test_ds, cfg.eval_batch_size)?;
        if test_error_pct < best_err {
            best_err = test_error_pct;
            if let Some(path) = ckpt_path {
                checkpoint::save(model, path)?;
            }
        }
        let row = EpochRow {
            epoch,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            test_error_pct,
            sec_per_iter: median(iter_times),
        };
        on_epoch(&row);
        report.rows.push(row);
    }
    Ok(report)
}
