//! Loss, AdamW, cosine schedule and the early-stopped training loop shared
//! by initial training and post-pruning fine-tuning.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::metrics::predict;
use crate::model::{fold_channels, ForecastModel, ParamKind};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Cosine schedule floor as a fraction of the peak learning rate.
    pub lr_floor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-6,
            weight_decay: 0.01,
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            grad_clip: 1.0,
            lr_floor: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.beta1, self.beta2, self.eps, self.grad_clip];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite()))
            || self.beta1 >= 1.0
            || self.beta2 >= 1.0
            || self.weight_decay < 0.0
            || !(0.0..=1.0).contains(&self.lr_floor)
        {
            return Err(Error::config("invalid optimizer hyperparameters"));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::config("batch_size and patience must be at least 1"));
        }
        Ok(())
    }

    /// Fine-tuning budget: the same settings with half the epochs.
    pub fn for_finetune(&self) -> Self {
        Self {
            max_epochs: self.max_epochs.div_ceil(2),
            ..self.clone()
        }
    }

    /// Cosine decay from `lr` to `lr * lr_floor` over `total` steps, no warmup.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let floor = self.lr * self.lr_floor;
        if total == 0 {
            return self.lr;
        }
        let progress = (step as f64 / total as f64).min(1.0);
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("mse_loss", pred.shape(), target.shape()));
    }
    let n = pred.len().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// Name and decay eligibility of each entry of a flattened parameter list.
#[derive(Clone, Debug)]
pub struct ParamMeta {
    pub name: String,
    pub decay: bool,
}

/// One decoupled-weight-decay Adam update. `step_index` counts from 1.
/// Pure in its arguments: replaying the same gradients reproduces the
/// same parameters bit for bit.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    meta: &[ParamMeta],
    state: &mut AdamState,
    cfg: &TrainConfig,
    lr: f64,
    step_index: u64,
) -> Result<()> {
    if step_index == 0 {
        return Err(Error::config("adam step index starts at 1"));
    }
    for (g, m) in grads.iter().zip(meta) {
        if !g.all_finite() {
            return Err(Error::numeric(format!("non-finite gradient for {}", m.name)));
        }
    }
    let bc1 = 1.0 - cfg.beta1.powi(step_index as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step_index as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let decay = if meta[i].decay { cfg.weight_decay } else { 0.0 };
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= lr * decay * *w + lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// One line of the training history (serialized as JSON lines).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Completed,
    EarlyStopped,
    Diverged,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation MSE seen (including the
    /// starting point).
    pub model: ForecastModel,
    pub history: Vec<EpochRecord>,
    pub best_val_mse: f64,
    pub stop: StopReason,
}

pub fn history_jsonl(history: &[EpochRecord]) -> String {
    let mut out = String::new();
    for rec in history {
        out.push_str(&serde_json::to_string(rec).expect("history serializes"));
        out.push('\n');
    }
    out
}

fn flatten(model: &ForecastModel) -> (Vec<Tensor>, Vec<ParamMeta>) {
    let mut params = Vec::new();
    let mut meta = Vec::new();
    model.weights.visit(&model.layer_ids, |name, kind, t| {
        params.push(t.clone());
        meta.push(ParamMeta {
            name: name.to_string(),
            decay: kind == ParamKind::Matrix,
        });
    });
    (params, meta)
}

fn unflatten(model: &mut ForecastModel, params: Vec<Tensor>) {
    let mut it = params.into_iter();
    let ids = model.layer_ids.clone();
    model.weights.visit_mut(&ids, |_, _, t| *t = it.next().expect("same order"));
}

/// Validation MSE on the standardized scale.
pub fn validation_mse(model: &ForecastModel, windows: &WindowSet, batch: usize) -> Result<f64> {
    let pred = predict(model, windows, batch)?;
    mse_loss(&pred, &windows.targets)
}

/// Mini-batch training with early stopping on validation MSE.
pub fn train(
    model: ForecastModel,
    train_windows: &WindowSet,
    val_windows: &WindowSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::config("training needs non-empty train and validation windows"));
    }
    let mc = &model.config;
    if train_windows.t_in() != mc.t_in || train_windows.t_out() != mc.t_out {
        return Err(Error::config(format!(
            "windows are {}->{} but the model expects {}->{}",
            train_windows.t_in(),
            train_windows.t_out(),
            mc.t_in,
            mc.t_out
        )));
    }
    if cfg.max_epochs == 0 {
        return Ok(TrainOutcome {
            best_val_mse: f64::NAN,
            model,
            history: Vec::new(),
            stop: StopReason::Completed,
        });
    }

    let mut model = model;
    let mut best_val = validation_mse(&model, val_windows, cfg.batch_size)?;
    let mut best_params = model.weights.clone();
    let (mut params, meta) = flatten(&model);
    let mut state = AdamState::zeros_like(&params);
    let mut rng = SeedStream::new(cfg.seed).rng("shuffle");

    let n = train_windows.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.max_epochs * steps_per_epoch;
    let mut step = 0usize;
    let mut history = Vec::new();
    let mut stale = 0;
    let mut stop = StopReason::Completed;
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train_windows.select(chunk);
            let mut tape = Tape::new();
            let vars = model.tape_params(&mut tape);
            let pred = model.forward_tape(&mut tape, &vars, &batch.inputs)?;
            let target = fold_channels(&batch.targets);
            let loss = tape.mse(pred, &target)?;
            let loss_value = tape.value(loss).data()[0];
            if !loss_value.is_finite() {
                stop = StopReason::Diverged;
                break;
            }
            let mut grads_all = tape.backward(loss)?;
            let mut var_list = Vec::with_capacity(params.len());
            vars.visit(&model.layer_ids, |_, _, v| var_list.push(*v));
            let mut grads: Vec<Tensor> = var_list.iter().map(|v| grads_all.take(*v)).collect();
            clip_global_norm(&mut grads, cfg.grad_clip);
            step += 1;
            lr = cfg.lr_at(step - 1, total_steps);
            adamw_step(&mut params, &grads, &meta, &mut state, cfg, lr, step as u64)?;
            unflatten(&mut model, params.clone());
            loss_sum += loss_value * chunk.len() as f64;
        }
        if stop == StopReason::Diverged {
            break;
        }
        let val = validation_mse(&model, val_windows, cfg.batch_size).unwrap_or(f64::NAN);
        let rec = EpochRecord {
            epoch,
            train_mse: loss_sum / n as f64,
            val_mse: val,
            lr,
        };
        log::debug!("epoch {epoch}: train {:.6} val {:.6}", rec.train_mse, rec.val_mse);
        history.push(rec);
        if !val.is_finite() {
            stop = StopReason::Diverged;
            break;
        }
        if val < best_val {
            best_val = val;
            best_params = model.weights.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stop = StopReason::EarlyStopped;
                break;
            }
        }
    }
    model.weights = best_params;
    Ok(TrainOutcome {
        model,
        history,
        best_val_mse: best_val,
        stop,
    })
}

/// Re-trains a (pruned) model with every retained parameter trainable,
/// using `cfg` with its epoch budget halved.
pub fn finetune(
    model: ForecastModel,
    train_windows: &WindowSet,
    val_windows: &WindowSet,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if model.num_blocks() < 2 && model.config.layers >= 2 {
        return Err(Error::config("fine-tuning expects at least the first and last layers"));
    }
    train(model, train_windows, val_windows, &cfg.for_finetune())
}
