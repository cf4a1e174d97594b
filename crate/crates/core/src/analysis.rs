//! Layer diagnostics over captured traces: inter-layer distance and
//! cosine similarity, pairwise head similarity, decayed redundancy and
//! attention entropy.
//!
//! State indexing: `trace.hidden[0]` is the embedding and
//! `trace.hidden[s]` the output of the s-th present block, so block `k`
//! (0-based position) maps `hidden[k]` to `hidden[k + 1]`.

use serde::{Deserialize, Serialize};

use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::model::{ForecastModel, LayerTrace};

/// Row-sum tolerance for attention maps fed to the entropy.
pub const ROW_SUM_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceConfig {
    /// Geometric decay α of the redundancy weights.
    pub decay_factor: f64,
    /// Number K of preceding states compared against.
    pub preceding_layers: usize,
    /// τ: percentage of interior layers (by distance) eligible for a score.
    pub tau_pct: f64,
    /// Hard cap on the share of interior layers retained.
    pub top_pct: f64,
    /// β: cumulative score share the retained layers must reach.
    pub cum_pct: f64,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self::family()
    }
}

impl ImportanceConfig {
    /// 80 / 50 / 85.
    pub fn family() -> Self {
        Self {
            decay_factor: 0.5,
            preceding_layers: 3,
            tau_pct: 80.0,
            top_pct: 50.0,
            cum_pct: 85.0,
        }
    }

    /// 80 / 50 / 90.
    pub fn external() -> Self {
        Self {
            cum_pct: 90.0,
            ..Self::family()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "family" => Ok(Self::family()),
            "external" => Ok(Self::external()),
            other => Err(Error::config(format!("unknown preset '{other}' (family|external)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::config("decay_factor must lie in (0, 1)"));
        }
        if self.preceding_layers == 0 {
            return Err(Error::config("preceding_layers must be at least 1"));
        }
        for (name, v) in [("tau_pct", self.tau_pct), ("top_pct", self.top_pct), ("cum_pct", self.cum_pct)] {
            if !(v > 0.0 && v <= 100.0) {
                return Err(Error::config(format!("{name} must lie in (0, 100], got {v}")));
            }
        }
        Ok(())
    }
}

/// Normalized geometric weights `α^k / Σ_{i=1..n} α^i` for `k = 1..=n`.
pub fn decay_weights(alpha: f64, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (1..=n).map(|k| alpha.powi(k as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity, or `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn sample(t: &crate::Tensor, i: usize) -> &[f64] {
    let n = t.len() / t.shape()[0];
    &t.data()[i * n..(i + 1) * n]
}

fn check_states(trace: &LayerTrace, need: usize) -> Result<()> {
    if trace.hidden.len() < need {
        return Err(Error::config(format!(
            "trace has {} hidden states, need at least {need}",
            trace.hidden.len()
        )));
    }
    if trace.instances() == 0 {
        return Err(Error::config("trace has no samples"));
    }
    Ok(())
}

/// Batch-mean cosine of states `s` and `t`; second value counts samples
/// where a zero-norm state made the similarity undefined (taken as 0).
fn state_similarity(trace: &LayerTrace, s: usize, t: usize) -> (f64, usize) {
    let n = trace.instances();
    let mut sum = 0.0;
    let mut undefined = 0;
    for i in 0..n {
        match cosine(sample(&trace.hidden[s], i), sample(&trace.hidden[t], i)) {
            Some(c) => sum += c,
            None => undefined += 1,
        }
    }
    (sum / n as f64, undefined)
}

/// Per-block `(dist, sim_prev)`: batch means of `‖H^l − H^{l−1}‖₂` and
/// of their cosine, each computed per sample over the flattened state.
pub fn inter_layer_metrics(trace: &LayerTrace) -> Result<Vec<(f64, f64)>> {
    check_states(trace, 2)?;
    let n = trace.instances();
    let mut out = Vec::with_capacity(trace.hidden.len() - 1);
    for s in 1..trace.hidden.len() {
        let mut dist = 0.0;
        for i in 0..n {
            let (a, b) = (sample(&trace.hidden[s], i), sample(&trace.hidden[s - 1], i));
            dist += a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        }
        let (sim, _) = state_similarity(trace, s, s - 1);
        out.push((dist / n as f64, sim));
    }
    Ok(out)
}

/// Mean pairwise cosine similarity between the flattened attention maps of
/// block `k`'s heads, averaged over the batch. A single head has no pairs
/// and yields 0.
pub fn head_similarity(trace: &LayerTrace, k: usize) -> Result<f64> {
    let a = trace
        .attn
        .get(k)
        .ok_or_else(|| Error::config(format!("block {k} out of range")))?;
    let (n, h) = (a.shape()[0], a.shape()[1]);
    if h < 2 || n == 0 {
        return Ok(0.0);
    }
    let m = a.shape()[2] * a.shape()[3];
    let pairs = (h * (h - 1) / 2) as f64;
    let mut total = 0.0;
    for i in 0..n {
        let maps = sample(a, i);
        let mut acc = 0.0;
        for p in 0..h {
            for q in p + 1..h {
                acc += cosine(&maps[p * m..(p + 1) * m], &maps[q * m..(q + 1) * m]).unwrap_or(0.0);
            }
        }
        total += acc / pairs;
    }
    Ok(total / n as f64)
}

/// Decay-weighted similarity of state `l` (1-based: `l` is the output of
/// block `l − 1`) to its `min(K, l)` predecessors.
pub fn redundancy(trace: &LayerTrace, l: usize, cfg: &ImportanceConfig) -> Result<f64> {
    if l == 0 || l >= trace.hidden.len() {
        return Err(Error::config(format!(
            "redundancy needs 1 <= l < {}, got {l}",
            trace.hidden.len()
        )));
    }
    let w = decay_weights(cfg.decay_factor, cfg.preceding_layers.min(l));
    Ok(w
        .iter()
        .enumerate()
        .map(|(j, wk)| wk * state_similarity(trace, l, l - j - 1).0)
        .sum())
}

/// Mean Shannon entropy (natural log) of block `k`'s attention rows.
pub fn attention_entropy(trace: &LayerTrace, k: usize) -> Result<f64> {
    let a = trace
        .attn
        .get(k)
        .ok_or_else(|| Error::config(format!("block {k} out of range")))?;
    let np = a.shape()[3];
    let rows = a.len() / np.max(1);
    if rows == 0 {
        return Err(Error::config("attention map is empty"));
    }
    let mut total = 0.0;
    for (r, row) in a.data().chunks(np).enumerate() {
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::Integrity(format!(
                "attention row {r} of block {k} is not a distribution (sum {sum})"
            )));
        }
        total -= row.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    }
    Ok(total / rows as f64)
}

/// Batch-averaged inputs to the importance score, accumulated with equal
/// weight per sample across any number of traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer_ids: Vec<usize>,
    pub num_patches: usize,
    pub heads: usize,
    pub samples: usize,
    pub batches: usize,
    /// Per block: mean `‖H^l − H^{l−1}‖₂`.
    pub dist: Vec<f64>,
    /// `state_sim[s][j]` = mean cosine of states `s` and `j`, for `j < s`.
    pub state_sim: Vec<Vec<f64>>,
    pub head_sim: Vec<f64>,
    pub entropy: Vec<f64>,
    /// Sample-state pairs whose cosine was undefined (zero norm).
    pub zero_norm_pairs: usize,
}

impl LayerMetrics {
    pub fn from_trace(trace: &LayerTrace) -> Result<Self> {
        let mut acc = MetricAccumulator::default();
        acc.add(trace)?;
        acc.finish()
    }

    pub fn num_blocks(&self) -> usize {
        self.dist.len()
    }

    /// `Sim(H^l, H^{l−1})` of block `k`.
    pub fn sim_prev(&self, k: usize) -> f64 {
        self.state_sim[k + 1][k]
    }

    /// Redundancy of block `k` (state `k + 1`).
    pub fn redundancy(&self, k: usize, cfg: &ImportanceConfig) -> f64 {
        let l = k + 1;
        decay_weights(cfg.decay_factor, cfg.preceding_layers.min(l))
            .iter()
            .enumerate()
            .map(|(j, w)| w * self.state_sim[l][l - j - 1])
            .sum()
    }
}

/// Sums per-sample metric contributions; `finish` divides by the sample
/// count so splitting the same samples into batches changes nothing but
/// rounding.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    shape: Option<(Vec<usize>, usize, usize)>,
    samples: usize,
    batches: usize,
    dist: Vec<f64>,
    state_sim: Vec<Vec<f64>>,
    head_sim: Vec<f64>,
    entropy: Vec<f64>,
    zero_norm_pairs: usize,
}

impl MetricAccumulator {
    pub fn add(&mut self, trace: &LayerTrace) -> Result<()> {
        check_states(trace, 2)?;
        let blocks = trace.num_blocks();
        let key = (trace.layer_ids.clone(), trace.num_patches(), trace.heads());
        match &self.shape {
            None => {
                self.dist = vec![0.0; blocks];
                self.state_sim = (0..=blocks).map(|s| vec![0.0; s]).collect();
                self.head_sim = vec![0.0; blocks];
                self.entropy = vec![0.0; blocks];
                self.shape = Some(key);
            }
            Some(k) if *k != key => {
                return Err(Error::config("traces disagree on layers, patches or heads"));
            }
            Some(_) => {}
        }
        let n = trace.instances() as f64;
        for (k, (d, _)) in inter_layer_metrics(trace)?.into_iter().enumerate() {
            self.dist[k] += d * n;
        }
        for s in 1..=blocks {
            for j in 0..s {
                let (sim, undefined) = state_similarity(trace, s, j);
                self.state_sim[s][j] += sim * n;
                self.zero_norm_pairs += undefined;
            }
        }
        for k in 0..blocks {
            self.head_sim[k] += head_similarity(trace, k)? * n;
            self.entropy[k] += attention_entropy(trace, k)? * n;
        }
        self.samples += trace.instances();
        self.batches += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<LayerMetrics> {
        let (layer_ids, num_patches, heads) = self
            .shape
            .ok_or_else(|| Error::config("no traces were collected"))?;
        let n = self.samples as f64;
        let div = |v: Vec<f64>| v.into_iter().map(|x| x / n).collect::<Vec<_>>();
        Ok(LayerMetrics {
            layer_ids,
            num_patches,
            heads,
            samples: self.samples,
            batches: self.batches,
            dist: div(self.dist),
            state_sim: self.state_sim.into_iter().map(div).collect(),
            head_sim: div(self.head_sim),
            entropy: div(self.entropy),
            zero_norm_pairs: self.zero_norm_pairs,
        })
    }
}

/// Runs capture-mode forwards over up to `batch_limit` batches of
/// `windows` and averages the metrics over every sample seen.
pub fn collect_trace(
    model: &ForecastModel,
    windows: &WindowSet,
    batch_size: usize,
    batch_limit: usize,
) -> Result<LayerMetrics> {
    if windows.is_empty() {
        return Err(Error::config("no validation windows to analyze"));
    }
    if batch_limit == 0 {
        return Err(Error::config("batch_limit must be at least 1"));
    }
    let mut acc = MetricAccumulator::default();
    for batch in windows.batches(batch_size).iter().take(batch_limit) {
        let out = model.forward(&batch.inputs, true)?;
        let trace = out.trace.expect("capture requested");
        acc.add(&trace)?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn trace(hidden: Vec<Vec<f64>>, np: usize, d: usize) -> LayerTrace {
        let blocks = hidden.len() - 1;
        let mut attn = Vec::new();
        for _ in 0..blocks {
            let mut a = vec![0.0; np * np];
            for q in 0..np {
                for k in 0..=q {
                    a[q * np + k] = 1.0 / (q + 1) as f64;
                }
            }
            attn.push(Tensor::new(vec![1, 1, np, np], a).unwrap());
        }
        LayerTrace {
            hidden: hidden
                .into_iter()
                .map(|h| Tensor::new(vec![1, np, d], h).unwrap())
                .collect(),
            attn,
            layer_ids: (0..blocks).collect(),
            stats: None,
        }
    }

    #[test]
    fn identical_and_antipodal_states() {
        let t = trace(vec![vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 2.0, 3.0, 4.0]], 2, 2);
        assert_eq!(inter_layer_metrics(&t).unwrap(), vec![(0.0, 1.0)]);
        let t = trace(vec![vec![1.0, 2.0, 3.0, 4.0], vec![-1.0, -2.0, -3.0, -4.0]], 2, 2);
        let (d, s) = inter_layer_metrics(&t).unwrap()[0];
        assert!((s + 1.0).abs() < 1e-15);
        assert!((d - 2.0 * 30f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_2x2_states() {
        // H0 = [[1,0],[0,1]], H1 = [[1,1],[0,2]]
        let t = trace(vec![vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 1.0, 0.0, 2.0]], 2, 2);
        let (d, s) = inter_layer_metrics(&t).unwrap()[0];
        assert!((d - 2f64.sqrt()).abs() < 1e-15);
        assert!((s - 3.0 / (2f64.sqrt() * 6f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn zero_state_counts_as_undefined() {
        let t = trace(vec![vec![0.0; 4], vec![1.0; 4]], 2, 2);
        assert_eq!(inter_layer_metrics(&t).unwrap()[0].1, 0.0);
        let m = LayerMetrics::from_trace(&t).unwrap();
        assert_eq!(m.zero_norm_pairs, 1);
    }

    #[test]
    fn decay_weights_examples() {
        let w = decay_weights(0.5, 2);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
        for n in 1..6 {
            assert!((decay_weights(0.3, n).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn redundancy_reductions() {
        let h = vec![1.0, 2.0, 3.0, 4.0];
        let t = trace(vec![h.clone(), h.clone(), h.clone()], 2, 2);
        let cfg = ImportanceConfig::family();
        assert!((redundancy(&t, 2, &cfg).unwrap() - 1.0).abs() < 1e-15);

        let t = trace(vec![vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 1.0, 0.0, 2.0], vec![3.0, -1.0, 2.0, 0.5]], 2, 2);
        let k1 = ImportanceConfig {
            preceding_layers: 1,
            ..cfg.clone()
        };
        let sims = inter_layer_metrics(&t).unwrap();
        assert_eq!(redundancy(&t, 2, &k1).unwrap(), sims[1].1);
        assert!(redundancy(&t, 0, &cfg).is_err());
        let m = LayerMetrics::from_trace(&t).unwrap();
        assert!((m.redundancy(1, &cfg) - redundancy(&t, 2, &cfg).unwrap()).abs() < 1e-15);
    }

    fn attn(maps: Vec<Vec<f64>>, np: usize) -> LayerTrace {
        let h = maps.len();
        let mut t = trace(vec![vec![1.0; np], vec![2.0; np]], np, 1);
        t.attn = vec![Tensor::new(vec![1, h, np, np], maps.concat()).unwrap()];
        t
    }

    #[test]
    fn head_similarity_examples() {
        let uniform = vec![1.0, 0.0, 0.5, 0.5];
        let diag = vec![1.0, 0.0, 0.0, 1.0];
        assert!((head_similarity(&attn(vec![uniform.clone(), uniform.clone()], 2), 0).unwrap() - 1.0).abs() < 1e-15);
        // dot = 1 + 0.5 = 1.5; norms sqrt(1.5) and sqrt(2)
        let expect = 1.5 / (1.5f64.sqrt() * 2f64.sqrt());
        let s = head_similarity(&attn(vec![uniform.clone(), diag.clone()], 2), 0).unwrap();
        assert!((s - expect).abs() < 1e-15);
        let s2 = head_similarity(&attn(vec![diag, uniform.clone()], 2), 0).unwrap();
        assert_eq!(s, s2);
        assert_eq!(head_similarity(&attn(vec![uniform], 2), 0).unwrap(), 0.0);
    }

    #[test]
    fn entropy_examples() {
        // causal uniform rows: 0, ln 2, ln 3 averaged
        let u = vec![1.0, 0.0, 0.0, 0.5, 0.5, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        let e = attention_entropy(&attn(vec![u], 3), 0).unwrap();
        assert!((e - (2f64.ln() + 3f64.ln()) / 3.0).abs() < 1e-12);
        let one_hot = vec![1.0, 0.0, 1.0, 0.0];
        assert_eq!(attention_entropy(&attn(vec![one_hot], 2), 0).unwrap(), 0.0);
        let skew = vec![1.0, 0.0, 0.25, 0.75];
        let expect = (0.25 * 4f64.ln() + 0.75 * (4.0f64 / 3.0).ln()) / 2.0;
        assert!((attention_entropy(&attn(vec![skew], 2), 0).unwrap() - expect).abs() < 1e-15);
        let bad = vec![1.0, 0.0, 0.5, 0.4];
        assert!(matches!(attention_entropy(&attn(vec![bad], 2), 0), Err(Error::Integrity(_))));
    }

    #[test]
    fn config_validation_and_presets() {
        assert_eq!(ImportanceConfig::preset("external").unwrap().cum_pct, 90.0);
        assert!(ImportanceConfig::preset("x").is_err());
        let bad = ImportanceConfig {
            decay_factor: 1.0,
            ..ImportanceConfig::family()
        };
        assert!(bad.validate().is_err());
        let bad = ImportanceConfig {
            tau_pct: 0.0,
            ..ImportanceConfig::family()
        };
        assert!(bad.validate().is_err());
    }
}
