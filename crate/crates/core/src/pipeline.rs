//! End-to-end steps shared by the command-line tool and the tests:
//! data preparation, training, analysis, prune-and-compare, projection
//! and trace export.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::analysis::{collect_trace, LayerMetrics};
use crate::config::{DataSource, RunConfig};
use crate::data::{load_csv, make_windows, split_chronological, synth_generate, Split, TimeSeriesDataset, WindowSet};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, predict, EvalResult};
use crate::model::{ForecastModel, LayerTrace};
use crate::pruning::{importance_scores, prune_model, random_plan, select_layers, ImportanceReport, PruningPlan};
use crate::tensor::Tensor;
use crate::training::{finetune, train, EpochRecord, TrainOutcome};

pub struct Prepared {
    pub dataset: TimeSeriesDataset,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

impl Prepared {
    pub fn windows(&self, split: Split) -> &WindowSet {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Loads or generates the series, splits it and cuts windows for every split.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let raw = match &cfg.data {
        DataSource::Synth(spec) => synth_generate(spec)?,
        DataSource::Csv { path, time_column } => {
            if !path.is_file() {
                return Err(Error::config(format!("dataset not found: {}", path.display())));
            }
            load_csv(path, *time_column)?
        }
    };
    let dataset = split_chronological(raw, cfg.split)?;
    for w in &dataset.warnings {
        log::warn!("{w}");
    }
    let (t_in, t_out) = (cfg.model.t_in, cfg.model.t_out);
    let cut = |s| make_windows(&dataset, s, t_in, t_out, cfg.window_stride);
    Ok(Prepared {
        train: cut(Split::Train)?,
        val: cut(Split::Val)?,
        test: cut(Split::Test)?,
        dataset,
    })
}

pub fn train_model(cfg: &RunConfig, data: &Prepared) -> Result<TrainOutcome> {
    let model = ForecastModel::new(cfg.model.clone())?;
    train(model, &data.train, &data.val, &cfg.train)
}

pub fn analyze_model(model: &ForecastModel, cfg: &RunConfig, val: &WindowSet) -> Result<ImportanceReport> {
    let metrics = collect_trace(model, val, cfg.analysis_batch_size, cfg.batch_limit)?;
    importance_scores(&metrics, &cfg.importance)
}

pub fn analyze_trace(trace: &LayerTrace, cfg: &RunConfig) -> Result<ImportanceReport> {
    importance_scores(&LayerMetrics::from_trace(trace)?, &cfg.importance)
}

/// The capture batches `collect_trace` would see, concatenated along the
/// sample axis.
pub fn capture_trace(model: &ForecastModel, cfg: &RunConfig, windows: &WindowSet) -> Result<LayerTrace> {
    if windows.is_empty() {
        return Err(Error::config("no windows to capture"));
    }
    let mut parts = Vec::new();
    for b in windows.batches(cfg.analysis_batch_size).iter().take(cfg.batch_limit) {
        parts.push(model.forward(&b.inputs, true)?.trace.expect("capture requested"));
    }
    let cat = |get: &dyn Fn(&LayerTrace) -> &Vec<Tensor>| -> Vec<Tensor> {
        (0..get(&parts[0]).len())
            .map(|k| {
                let mut shape = get(&parts[0])[k].shape().to_vec();
                shape[0] = parts.iter().map(|p| get(p)[k].shape()[0]).sum();
                let data = parts.iter().flat_map(|p| get(p)[k].data().iter().copied()).collect();
                Tensor::new(shape, data).expect("concatenated trace")
            })
            .collect()
    };
    Ok(LayerTrace {
        hidden: cat(&|t| &t.hidden),
        attn: cat(&|t| &t.attn),
        layer_ids: parts[0].layer_ids.clone(),
        stats: None,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PruneOptions {
    pub finetune: bool,
    pub random_baseline: bool,
    pub retain_all: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCounts {
    pub total: usize,
    pub retained: usize,
    pub interior_total: usize,
    pub interior_retained: usize,
    pub layer_ratio: f64,
    pub interior_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub original: usize,
    pub pruned: usize,
    pub ratio: f64,
}

/// Accuracy of the original and pruned models side by side, with the
/// size reductions. Timing lives in a separate sidecar file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub finetuned: bool,
    pub original: EvalResult,
    pub pruned: EvalResult,
    pub random: Option<EvalResult>,
    pub retained: Vec<usize>,
    pub random_retained: Option<Vec<usize>>,
    pub layers: LayerCounts,
    pub parameters: ParamCounts,
}

pub struct PruneRun {
    pub plan: PruningPlan,
    pub pruned: ForecastModel,
    pub history: Vec<EpochRecord>,
    pub random: Option<(PruningPlan, ForecastModel)>,
    pub comparison: Comparison,
}

fn counts(model: &ForecastModel, plan: &PruningPlan) -> LayerCounts {
    let total = model.num_blocks();
    let interior_total = total.saturating_sub(2);
    let interior_retained = plan.interior_retained();
    LayerCounts {
        total,
        retained: plan.retained.len(),
        interior_total,
        interior_retained,
        layer_ratio: plan.retained.len() as f64 / total as f64,
        interior_ratio: if interior_total == 0 {
            1.0
        } else {
            interior_retained as f64 / interior_total as f64
        },
    }
}

fn shrink(model: &ForecastModel, plan: &PruningPlan, cfg: &RunConfig, data: &Prepared, ft: bool) -> Result<(ForecastModel, Vec<EpochRecord>)> {
    let pruned = prune_model(model, plan)?;
    if !ft {
        return Ok((pruned, Vec::new()));
    }
    let out = finetune(pruned, &data.train, &data.val, &cfg.train)?;
    Ok((out.model, out.history))
}

/// Builds the plan (from `report`, or keep-all), prunes, optionally
/// fine-tunes, and evaluates everything on the test split.
pub fn prune_and_compare(
    model: &ForecastModel,
    report: &ImportanceReport,
    cfg: &RunConfig,
    data: &Prepared,
    opts: PruneOptions,
) -> Result<PruneRun> {
    let plan = if opts.retain_all {
        PruningPlan::retain_all(model)
    } else {
        select_layers(report, &cfg.importance)?
    };
    // Keeping every block leaves nothing to re-align.
    let ft = opts.finetune && !opts.retain_all;
    let (pruned, history) = shrink(model, &plan, cfg, data, ft)?;
    let random = if opts.random_baseline {
        let rp = random_plan(model, plan.interior_retained(), cfg.seed)?;
        let (rm, _) = shrink(model, &rp, cfg, data, ft)?;
        Some((rp, rm))
    } else {
        None
    };
    let test = &data.test;
    let original = evaluate(model, test, cfg.scale)?;
    let pruned_eval = evaluate(&pruned, test, cfg.scale)?;
    let random_eval = random.as_ref().map(|(_, m)| evaluate(m, test, cfg.scale)).transpose()?;
    let (po, pp) = (model.count_parameters(), pruned.count_parameters());
    let comparison = Comparison {
        finetuned: ft,
        original,
        pruned: pruned_eval,
        random: random_eval,
        retained: plan.retained.clone(),
        random_retained: random.as_ref().map(|(p, _)| p.retained.clone()),
        layers: counts(model, &plan),
        parameters: ParamCounts {
            original: po,
            pruned: pp,
            ratio: pp as f64 / po as f64,
        },
    };
    Ok(PruneRun {
        plan,
        pruned,
        history,
        random,
        comparison,
    })
}

/// Forecast CSV: one row per (window, step, channel) with the standardized
/// prediction and target.
pub fn forecast_csv(windows: &WindowSet, pred: &Tensor) -> String {
    let (to, v) = (windows.t_out(), windows.channels());
    let mut s = String::from("window,origin,step,channel,prediction,target\n");
    for (w, origin) in windows.origins.iter().enumerate() {
        for t in 0..to {
            for c in 0..v {
                let i = (w * to + t) * v + c;
                let _ = writeln!(s, "{w},{origin},{t},{c},{},{}", pred.data()[i], windows.targets.data()[i]);
            }
        }
    }
    s
}

pub fn predictions_csv(model: &ForecastModel, windows: &WindowSet) -> Result<String> {
    Ok(forecast_csv(windows, &predict(model, windows, 64)?))
}

/// For each requested hidden state, the forecasts obtained by feeding that
/// state straight into the final norm and prediction head.
pub fn project_states(model: &ForecastModel, windows: &WindowSet, states: &[usize]) -> Result<Vec<Tensor>> {
    let n_states = model.num_blocks() + 1;
    if let Some(bad) = states.iter().find(|s| **s >= n_states) {
        return Err(Error::config(format!(
            "layer {bad} out of range: the model has {n_states} hidden states (0..={})",
            n_states - 1
        )));
    }
    if windows.is_empty() {
        return Err(Error::config("no windows to project"));
    }
    let mut out: Vec<Vec<f64>> = vec![Vec::new(); states.len()];
    for b in windows.batches(64) {
        let trace = model.forward(&b.inputs, true)?.trace.expect("capture requested");
        for (slot, &s) in out.iter_mut().zip(states) {
            slot.extend(model.project_hidden_to_series(&trace, s)?.into_data());
        }
    }
    out.into_iter()
        .map(|d| Tensor::new(windows.targets.shape().to_vec(), d))
        .collect()
}
