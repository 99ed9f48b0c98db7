//! SGD with momentum, a step learning-rate schedule, the epoch loop and
//! top-1 evaluation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::{backward, Var};
use crate::backbone::Model;
use crate::checkpoint;
use crate::data::{batches, BatchOptions, DatasetMeta, Example};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::ops::{self, Mode};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch indices (0-based) from which the rate is multiplied by
    /// `drop_factor` once more.
    pub milestones: Vec<usize>,
    pub drop_factor: f64,
    pub seed: u64,
    /// Apply weight decay to normalization and attention scale/shift too.
    pub decay_all: bool,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 164,
            batch_size: 128,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![81, 122],
            drop_factor: 0.1,
            seed: 0,
            decay_all: false,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be at least 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be finite and non-negative, got {}", self.weight_decay));
        }
        if !(self.drop_factor > 0.0 && self.drop_factor.is_finite()) {
            return bad(format!("drop factor must be positive, got {}", self.drop_factor));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones must be strictly increasing: {:?}", self.milestones));
        }
        if let Some(&m) = self.milestones.iter().find(|&&m| m >= self.epochs) {
            return bad(format!("milestone {m} is not below the epoch count {}", self.epochs));
        }
        Ok(())
    }

    /// Learning rate used throughout 0-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr * self.drop_factor.powi(drops as i32)
    }
}

/// Velocity buffers mirroring the parameter shapes.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Scalar = f32> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            velocity: store.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_all: bool,
}

/// Whether weight decay reaches this parameter.
pub fn decays(role: crate::nn::ParamRole, decay_all: bool) -> bool {
    decay_all || !role.is_affine()
}

/// `v ← m·v + g + wd·p; p ← p − lr·v`. A parameter without a gradient is
/// treated as having a zero gradient.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>, hp: SgdParams) -> Result<()> {
    if state.velocity.len() != store.len() {
        return Err(Error::Contract(format!(
            "optimizer tracks {} buffers for {} parameters",
            state.velocity.len(),
            store.len()
        )));
    }
    let lr = T::from_f64(hp.lr);
    let m = T::from_f64(hp.momentum);
    for (p, v) in store.iter_mut().zip(&mut state.velocity) {
        let wd = T::from_f64(if decays(p.role, hp.decay_all) { hp.weight_decay } else { 0.0 });
        if v.shape() != p.value.shape() || p.grad.as_ref().is_some_and(|g| g.shape() != p.value.shape()) {
            return Err(Error::Contract(format!("shape mismatch updating '{}'", p.name)));
        }
        let values = p.value.data_mut();
        let grad = p.grad.as_ref().map(|g| g.data());
        for (i, (vi, pi)) in v.data_mut().iter_mut().zip(values.iter_mut()).enumerate() {
            let g = grad.map_or(T::zero(), |g| g[i]);
            *vi = m * *vi + g + wd * *pi;
            *pi = *pi - lr * *vi;
        }
    }
    Ok(())
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Number of rows of `logits: [N, K]` whose argmax equals the label.
pub fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Top-1 accuracy in eval mode.
pub fn evaluate(model: &mut Model, data: &[Example], meta: &DatasetMeta, batch_size: usize) -> Result<f64> {
    let mut correct = 0;
    for batch in batches(data, meta, BatchOptions::eval(batch_size))? {
        let logits = model.predict(&batch.images, Mode::Eval)?;
        correct += count_correct(&logits, &batch.labels);
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean training cross-entropy over the epoch.
    pub loss: f64,
    /// Running train-mode top-1 accuracy over the epoch.
    pub accuracy: f64,
    pub eval_accuracy: Option<f64>,
    pub lr: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }
}

pub const HISTORY_FILE: &str = "history.jsonl";
pub const CHECKPOINT_FILE: &str = "final.ckpt";

/// Trains `model` in place. With `out_dir`, each epoch record is
/// appended to `history.jsonl` as it completes and the final weights are
/// written to `final.ckpt`.
///
/// A train-mode batch of one example cannot be normalized, so a trailing
/// batch of size 1 is skipped.
pub fn fit(
    model: &mut Model,
    train: &[Example],
    eval: Option<&[Example]>,
    meta: &DatasetMeta,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<History> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(HISTORY_FILE), "")?;
    }
    let mut state = OptimizerState::new(model.params());
    let mut history = History::default();
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let hp = SgdParams {
            lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            decay_all: cfg.decay_all,
        };
        let opts = BatchOptions {
            batch_size: cfg.batch_size,
            shuffle_seed: Some(cfg.seed),
            epoch,
            augment: cfg.augment,
        };
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for (bi, batch) in batches(train, meta, opts)?.enumerate() {
            let n = batch.labels.len();
            if n < 2 {
                continue;
            }
            let nan = || Error::NanLoss { epoch: epoch + 1, batch: bi, lr };
            let bindings = model.bind(true);
            let x = Var::constant(batch.images);
            let step = model
                .forward(&bindings, &x, Mode::Train)
                .and_then(|logits| Ok((ops::cross_entropy(&logits, &batch.labels)?, logits)));
            let (loss, logits) = match step {
                Ok(v) => v,
                Err(Error::NonFinite { .. }) => return Err(nan()),
                Err(e) => return Err(e),
            };
            let value = loss.value().item() as f64;
            if !value.is_finite() {
                return Err(nan());
            }
            let mut grads = match backward(&loss) {
                Ok(g) => g,
                Err(Error::NonFinite { .. }) => return Err(nan()),
                Err(e) => return Err(e),
            };
            let store = model.params_mut();
            store.accumulate_grads(&bindings, &mut grads);
            sgd_step(store, &mut state, hp)?;
            store.zero_grad();

            loss_sum += value * n as f64;
            correct += count_correct(logits.value(), &batch.labels);
            seen += n;
        }
        if seen == 0 {
            return Err(Error::config("no trainable batch: every batch had fewer than 2 examples"));
        }
        let eval_accuracy = match eval {
            Some(data) => Some(evaluate(model, data, meta, cfg.batch_size)?),
            None => None,
        };
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
            eval_accuracy,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        };
        if let Some(dir) = out_dir {
            let mut f = fs::OpenOptions::new().append(true).open(dir.join(HISTORY_FILE))?;
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        on_epoch(&record);
        history.records.push(record);
    }
    if let Some(dir) = out_dir {
        checkpoint::save(dir.join(CHECKPOINT_FILE), &model.state_tensors())?;
    }
    Ok(history)
}

/// Path of the final checkpoint written by [`fit`] into `dir`.
pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}

/// Moving average over full windows only (`len - window + 1` entries).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    values
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}
