//! Importance scoring, critical-layer selection, structural block removal
//! and the random baseline.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{ImportanceConfig, LayerMetrics};
use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::model::{Evaluator, ForecastModel};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

/// Upper clamp for scores; negative similarities can push I above 1.
pub const SCORE_CLAMP: f64 = 2.0;
/// Slack for percentage-of-count products such as 50% of 6.
const PCT_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer_id: usize,
    pub dist: f64,
    pub sim_prev: f64,
    pub head_sim: f64,
    pub redundancy: f64,
    pub entropy: f64,
    pub score: f64,
    pub gated: bool,
    /// First or last present block; never scored, always retained.
    pub exempt: bool,
    /// Some similarity entering the score was negative.
    pub negative_sim: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub config: ImportanceConfig,
    pub per_layer: Vec<LayerScore>,
    /// Gated layer ids, descending by score.
    pub ranking: Vec<usize>,
    pub tau_gate: Vec<usize>,
    pub samples: usize,
    pub batch_count: usize,
    pub num_patches: usize,
    pub heads: usize,
    pub entropy_log_base: String,
    /// `ln N_p`, the largest attainable entropy.
    pub entropy_max: f64,
    pub warnings: Vec<String>,
}

impl ImportanceReport {
    pub fn layer(&self, id: usize) -> Option<&LayerScore> {
        self.per_layer.iter().find(|l| l.layer_id == id)
    }

    pub fn interior_count(&self) -> usize {
        self.per_layer.iter().filter(|l| !l.exempt).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("report serializes")))
    }
}

fn pct_count(pct: f64, n: usize) -> usize {
    (pct / 100.0 * n as f64 + PCT_SLACK).floor() as usize
}

/// Orders by score descending, then distance descending, then id.
fn rank_cmp(a: &LayerScore, b: &LayerScore) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.dist.total_cmp(&a.dist))
        .then(a.layer_id.cmp(&b.layer_id))
}

/// `I = 1{top-τ% by Dist} · (1 − R)(1 − s̄)` for every interior block.
pub fn importance_scores(metrics: &LayerMetrics, cfg: &ImportanceConfig) -> Result<ImportanceReport> {
    cfg.validate()?;
    let n = metrics.num_blocks();
    if n == 0 {
        return Err(Error::config("metrics cover no layers"));
    }
    let mut warnings = Vec::new();
    if metrics.zero_norm_pairs > 0 {
        warnings.push(format!(
            "{} zero-norm hidden states; their similarities were taken as 0",
            metrics.zero_norm_pairs
        ));
    }
    if metrics.heads < 2 {
        warnings.push("single attention head: head similarity defined as 0".into());
    }
    let mut per_layer: Vec<LayerScore> = (0..n)
        .map(|k| {
            let sim_prev = metrics.sim_prev(k);
            let redundancy = metrics.redundancy(k, cfg);
            let head_sim = metrics.head_sim[k];
            let sims_used = &metrics.state_sim[k + 1][(k + 1).saturating_sub(cfg.preceding_layers)..];
            LayerScore {
                layer_id: metrics.layer_ids[k],
                dist: metrics.dist[k],
                sim_prev,
                head_sim,
                redundancy,
                entropy: metrics.entropy[k],
                score: 0.0,
                gated: false,
                exempt: k == 0 || k + 1 == n,
                negative_sim: head_sim < 0.0 || sims_used.iter().any(|s| *s < 0.0),
            }
        })
        .collect();

    let mut interior: Vec<usize> = (0..n).filter(|&k| !per_layer[k].exempt).collect();
    let mut tau_gate = Vec::new();
    if interior.is_empty() {
        warnings.push("nothing to prune: no interior layers".into());
    } else {
        interior.sort_by(|&a, &b| per_layer[b].dist.total_cmp(&per_layer[a].dist).then(a.cmp(&b)));
        let gate = pct_count(cfg.tau_pct, interior.len());
        if gate == 0 {
            return Err(Error::config(format!(
                "tau_pct {} gates out all {} interior layers",
                cfg.tau_pct,
                interior.len()
            )));
        }
        for &k in &interior[..gate] {
            let l = &mut per_layer[k];
            l.gated = true;
            l.score = ((1.0 - l.redundancy) * (1.0 - l.head_sim)).clamp(0.0, SCORE_CLAMP);
            tau_gate.push(l.layer_id);
        }
        tau_gate.sort_unstable();
    }
    for l in per_layer.iter().filter(|l| l.negative_sim && !l.exempt) {
        warnings.push(format!("layer {}: negative similarity", l.layer_id));
    }
    let mut gated: Vec<&LayerScore> = per_layer.iter().filter(|l| l.gated).collect();
    gated.sort_by(|a, b| rank_cmp(a, b));
    let ranking = gated.iter().map(|l| l.layer_id).collect();

    Ok(ImportanceReport {
        config: cfg.clone(),
        per_layer,
        ranking,
        tau_gate,
        samples: metrics.samples,
        batch_count: metrics.batches,
        num_patches: metrics.num_patches,
        heads: metrics.heads,
        entropy_log_base: "e".into(),
        entropy_max: (metrics.num_patches as f64).ln(),
        warnings,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Exempt,
    /// Admitted by the cumulative walk, which stopped within the cap.
    CumPct,
    /// Admitted by the cumulative walk and kept after truncation to the cap.
    TopPct,
    Random,
    RetainAll,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub retained: Vec<usize>,
    pub exempt: Vec<usize>,
    pub criteria: BTreeMap<usize, Rule>,
    pub config: Option<ImportanceConfig>,
    pub report_digest: Option<String>,
    /// Total number of blocks in the model the plan was made for.
    pub total_layers: usize,
}

impl PruningPlan {
    pub fn interior_retained(&self) -> usize {
        self.retained.len() - self.exempt.len()
    }

    /// Retained share of all blocks.
    pub fn layer_ratio(&self) -> f64 {
        self.retained.len() as f64 / self.total_layers as f64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    /// Keeps every block of `model`.
    pub fn retain_all(model: &ForecastModel) -> Self {
        let ids = &model.layer_ids;
        let exempt = exempt_ids(ids);
        let criteria = ids
            .iter()
            .map(|&id| (id, if exempt.contains(&id) { Rule::Exempt } else { Rule::RetainAll }))
            .collect();
        Self {
            retained: ids.clone(),
            exempt,
            criteria,
            config: None,
            report_digest: None,
            total_layers: ids.len(),
        }
    }
}

fn exempt_ids(ids: &[usize]) -> Vec<usize> {
    let mut e = vec![ids[0], ids[ids.len() - 1]];
    e.dedup();
    e
}

/// Keeps the exempt ends plus the interior layers admitted by the
/// cumulative-β walk over the ranking, truncated to `top_pct`% of the
/// interior.
pub fn select_layers(report: &ImportanceReport, cfg: &ImportanceConfig) -> Result<PruningPlan> {
    cfg.validate()?;
    let ids: Vec<usize> = report.per_layer.iter().map(|l| l.layer_id).collect();
    if ids.is_empty() {
        return Err(Error::config("report has no layers"));
    }
    let exempt = exempt_ids(&ids);
    let n_interior = report.interior_count();
    if n_interior > 0 && report.ranking.is_empty() {
        return Err(Error::config("report ranking is empty"));
    }
    let mut ranked: Vec<&LayerScore> = report
        .ranking
        .iter()
        .map(|id| {
            report
                .layer(*id)
                .filter(|l| l.gated && !l.exempt)
                .ok_or_else(|| Error::config(format!("ranked layer {id} is not a gated interior layer")))
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| rank_cmp(a, b));

    let total: f64 = ranked.iter().map(|l| l.score).sum();
    let mut admitted = Vec::new();
    if total > 0.0 {
        let target = cfg.cum_pct / 100.0;
        let mut cum = 0.0;
        for l in &ranked {
            admitted.push(l.layer_id);
            cum += l.score;
            if cum / total >= target - PCT_SLACK {
                break;
            }
        }
    }
    let cap = pct_count(cfg.top_pct, n_interior);
    let rule = if admitted.len() > cap {
        admitted.truncate(cap);
        Rule::TopPct
    } else {
        Rule::CumPct
    };

    let mut criteria: BTreeMap<usize, Rule> = exempt.iter().map(|&id| (id, Rule::Exempt)).collect();
    for &id in &admitted {
        criteria.insert(id, rule);
    }
    Ok(PruningPlan {
        retained: criteria.keys().copied().collect(),
        exempt,
        criteria,
        config: Some(cfg.clone()),
        report_digest: Some(report.digest()),
        total_layers: ids.len(),
    })
}

/// Exempt ends plus `n_interior` interior layers drawn uniformly without
/// replacement from the `"random-plan"` stream of `seed`.
pub fn random_plan(model: &ForecastModel, n_interior: usize, seed: u64) -> Result<PruningPlan> {
    let ids = &model.layer_ids;
    let interior: &[usize] = if ids.len() > 2 { &ids[1..ids.len() - 1] } else { &[] };
    if n_interior > interior.len() {
        return Err(Error::config(format!(
            "cannot keep {n_interior} of {} interior layers",
            interior.len()
        )));
    }
    let mut rng = SeedStream::new(seed).rng("random-plan");
    let exempt = exempt_ids(ids);
    let mut criteria: BTreeMap<usize, Rule> = exempt.iter().map(|&id| (id, Rule::Exempt)).collect();
    for i in sample(&mut rng, interior.len(), n_interior) {
        criteria.insert(interior[i], Rule::Random);
    }
    Ok(PruningPlan {
        retained: criteria.keys().copied().collect(),
        exempt,
        criteria,
        config: None,
        report_digest: None,
        total_layers: ids.len(),
    })
}

/// Copies of the retained blocks in their original order, with every
/// non-block parameter carried over unchanged.
pub fn prune_model(model: &ForecastModel, plan: &PruningPlan) -> Result<ForecastModel> {
    if plan.retained.is_empty() || plan.retained.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("plan must retain a strictly increasing, non-empty set of layers"));
    }
    let mut blocks = Vec::with_capacity(plan.retained.len());
    for id in &plan.retained {
        let pos = model
            .layer_ids
            .iter()
            .position(|x| x == id)
            .ok_or_else(|| Error::config(format!("plan keeps layer {id}, which the model does not have")))?;
        blocks.push(model.weights.blocks[pos].clone());
    }
    let mut pruned = model.clone();
    pruned.layer_ids = plan.retained.clone();
    pruned.weights.blocks = blocks;
    pruned.validate()?;
    Ok(pruned)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Speedup {
    /// Median wall-clock milliseconds per full pass over the windows.
    pub t_orig_ms: f64,
    pub t_pruned_ms: f64,
    pub ratio: f64,
    pub runs: usize,
    pub warmup: usize,
}

pub const MIN_TIMED_RUNS: usize = 30;
pub const MIN_WARMUP_RUNS: usize = 5;

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2
    }
}

/// Median single-threaded 32-bit inference time over `runs` full passes
/// across `windows`, original and pruned runs interleaved.
pub fn measure_speedup(
    original: &ForecastModel,
    pruned: &ForecastModel,
    windows: &WindowSet,
    runs: usize,
    warmup: usize,
) -> Result<Speedup> {
    if runs < MIN_TIMED_RUNS || warmup < MIN_WARMUP_RUNS {
        return Err(Error::config(format!(
            "speedup needs at least {MIN_TIMED_RUNS} timed and {MIN_WARMUP_RUNS} warmup runs"
        )));
    }
    if windows.is_empty() {
        return Err(Error::config("no windows to time"));
    }
    let batches: Vec<Tensor<f32>> = windows.batches(64).iter().map(|b| b.inputs.cast()).collect();
    let w_orig = original.weights_f32();
    let w_pruned = pruned.weights_f32();
    let e_orig = Evaluator::new(&original.config, &original.layer_ids, &w_orig);
    let e_pruned = Evaluator::new(&pruned.config, &pruned.layer_ids, &w_pruned);
    let pass = |e: &Evaluator<f32>| -> Result<Duration> {
        let start = Instant::now();
        for b in &batches {
            std::hint::black_box(e.forward(b, false)?);
        }
        Ok(start.elapsed())
    };
    for _ in 0..warmup {
        pass(&e_orig)?;
        pass(&e_pruned)?;
    }
    let mut t_orig = Vec::with_capacity(runs);
    let mut t_pruned = Vec::with_capacity(runs);
    for _ in 0..runs {
        t_orig.push(pass(&e_orig)?);
        t_pruned.push(pass(&e_pruned)?);
    }
    let (mo, mp) = (median(t_orig), median(t_pruned));
    if mo < Duration::from_millis(1) || mp < Duration::from_millis(1) {
        return Err(Error::config(
            "median pass under 1 ms is below timer resolution; increase the workload",
        ));
    }
    let (o, p) = (mo.as_secs_f64() * 1e3, mp.as_secs_f64() * 1e3);
    Ok(Speedup {
        t_orig_ms: o,
        t_pruned_ms: p,
        ratio: o / p,
        runs,
        warmup,
    })
}
