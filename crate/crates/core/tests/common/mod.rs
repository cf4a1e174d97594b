//! Independent oracles shared by the integration and acceptance tests.
//! Nothing here calls the library code it is used to check.
#![allow(dead_code, clippy::needless_range_loop)]

use dscope::autograd::{relative_error, Tape};
use dscope::model::{fold_channels, instance_normalize, unfold_channels, Evaluator, ForecastModel, LayerTrace, ModelConfig};
use dscope::Tensor;
use proptest::prelude::*;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

// ---------------------------------------------------------------------------
// Scalar-loop metric oracles. States are indexed hidden[s][i][p][c].

#[derive(Debug, Clone)]
pub struct RawTrace {
    /// [state][sample][patch][channel]
    pub hidden: Vec<Vec<Vec<Vec<f64>>>>,
    /// [block][sample][head][query][key]
    pub attn: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
}

impl RawTrace {
    pub fn to_trace(&self) -> LayerTrace {
        let n = self.hidden[0].len();
        let np = self.hidden[0][0].len();
        let d = self.hidden[0][0][0].len();
        let h = self.attn.first().map_or(1, |a| a[0].len());
        let mut hidden = Vec::new();
        for s in &self.hidden {
            let mut flat = Vec::new();
            for i in 0..n {
                for p in 0..np {
                    for c in 0..d {
                        flat.push(s[i][p][c]);
                    }
                }
            }
            hidden.push(Tensor::new(vec![n, np, d], flat).unwrap());
        }
        let mut attn = Vec::new();
        for a in &self.attn {
            let mut flat = Vec::new();
            for i in 0..n {
                for hh in 0..h {
                    for q in 0..np {
                        for k in 0..np {
                            flat.push(a[i][hh][q][k]);
                        }
                    }
                }
            }
            attn.push(Tensor::new(vec![n, h, np, np], flat).unwrap());
        }
        LayerTrace {
            hidden,
            attn,
            layer_ids: (0..self.attn.len()).collect(),
            stats: None,
        }
    }
}

fn oracle_cos(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for p in 0..a.len() {
        for c in 0..a[p].len() {
            ab += a[p][c] * b[p][c];
            aa += a[p][c] * a[p][c];
            bb += b[p][c] * b[p][c];
        }
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

/// Mean over samples of ‖H^s − H^{s−1}‖ and cos(H^s, H^{s−1}), for s = 1..
pub fn oracle_inter(t: &RawTrace) -> Vec<(f64, f64)> {
    let n = t.hidden[0].len();
    let mut out = Vec::new();
    for s in 1..t.hidden.len() {
        let mut dist = 0.0;
        let mut sim = 0.0;
        for i in 0..n {
            let mut sq = 0.0;
            for p in 0..t.hidden[s][i].len() {
                for c in 0..t.hidden[s][i][p].len() {
                    let e = t.hidden[s][i][p][c] - t.hidden[s - 1][i][p][c];
                    sq += e * e;
                }
            }
            dist += sq.sqrt();
            sim += oracle_cos(&t.hidden[s][i], &t.hidden[s - 1][i]);
        }
        out.push((dist / n as f64, sim / n as f64));
    }
    out
}

pub fn oracle_head_sim(t: &RawTrace, block: usize) -> f64 {
    let a = &t.attn[block];
    let n = a.len();
    let h = a[0].len();
    if h < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut acc = 0.0;
        let mut pairs = 0.0;
        for x in 0..h {
            for y in 0..h {
                if x < y {
                    acc += oracle_cos(&a[i][x], &a[i][y]);
                    pairs += 1.0;
                }
            }
        }
        total += acc / pairs;
    }
    total / n as f64
}

/// R for state `l` with decay `alpha` over `min(k, l)` predecessors.
pub fn oracle_redundancy(t: &RawTrace, l: usize, alpha: f64, k: usize) -> f64 {
    let keff = k.min(l);
    let mut norm = 0.0;
    for j in 1..=keff {
        norm += alpha.powi(j as i32);
    }
    let n = t.hidden[0].len();
    let mut r = 0.0;
    for j in 1..=keff {
        let mut sim = 0.0;
        for i in 0..n {
            sim += oracle_cos(&t.hidden[l][i], &t.hidden[l - j][i]);
        }
        r += alpha.powi(j as i32) / norm * sim / n as f64;
    }
    r
}

pub fn oracle_entropy(t: &RawTrace, block: usize) -> f64 {
    let mut total = 0.0;
    let mut rows = 0.0;
    for sample in &t.attn[block] {
        for head in sample {
            for row in head {
                let mut e = 0.0;
                for &p in row {
                    if p > 0.0 {
                        e -= p * p.ln();
                    }
                }
                total += e;
                rows += 1.0;
            }
        }
    }
    total / rows
}

/// Tiny random traces: ≤ 3 blocks, ≤ 2 heads, ≤ 3 patches, causal
/// softmax attention rows, states with mixed signs and scales.
pub fn tiny_trace() -> impl Strategy<Value = RawTrace> {
    (1usize..=3, 1usize..=2, 1usize..=3, 1usize..=3, 1usize..=3, any::<u64>()).prop_map(
        |(blocks, heads, np, d, n, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hidden = (0..=blocks)
                .map(|_| {
                    let scale = rng.random_range(0.1..10.0);
                    (0..n)
                        .map(|_| {
                            (0..np)
                                .map(|_| (0..d).map(|_| scale * rng.random_range(-1.0..1.0)).collect())
                                .collect()
                        })
                        .collect()
                })
                .collect();
            let attn = (0..blocks)
                .map(|_| {
                    (0..n)
                        .map(|_| {
                            (0..heads)
                                .map(|_| {
                                    (0..np)
                                        .map(|q| {
                                            let logits: Vec<f64> =
                                                (0..=q).map(|_| rng.random_range(-3.0..3.0)).collect();
                                            let z: f64 = logits.iter().map(|v| v.exp()).sum();
                                            (0..np)
                                                .map(|k| if k <= q { logits[k].exp() / z } else { 0.0 })
                                                .collect()
                                        })
                                        .collect()
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect();
            RawTrace { hidden, attn }
        },
    )
}

// ---------------------------------------------------------------------------
// Model helpers.

pub fn small_config(layers: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        layers,
        d_model: 16,
        heads: 2,
        patch_size: 8,
        stride: 4,
        t_in: 32,
        t_out: 8,
        mlp_ratio: 2.0,
        seed,
    }
}

/// Replaces every parameter with random values of a scale that makes
/// attention clearly non-uniform and exercises norm gains and biases.
pub fn randomize(model: &mut ForecastModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let ids = model.layer_ids.clone();
    model.weights.visit_mut(&ids, |name, _, t| {
        let (base, std) = if name.ends_with("gain") {
            (1.0, 0.1)
        } else if name.contains(".b") || name.ends_with("bias") {
            (0.0, 0.1)
        } else {
            let fan_in = t.shape()[0] as f64;
            (0.0, 1.0 / fan_in.sqrt())
        };
        for v in t.data_mut() {
            *v = base + std * normal.sample(&mut rng);
        }
    });
}

pub fn random_input(batch: usize, t: usize, v: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..batch * t * v)
        .map(|i| (i as f64 * 0.37).sin() * 2.0 + rng.random_range(-0.5..0.5))
        .collect();
    Tensor::new(vec![batch, t, v], data).unwrap()
}

/// Copy of `model` where the blocks absent from `keep` have all their
/// parameters zeroed, which turns a pre-norm residual block into the
/// identity.
pub fn zero_blocks(model: &ForecastModel, keep: &[usize]) -> ForecastModel {
    let mut m = model.clone();
    for (pos, id) in model.layer_ids.iter().enumerate() {
        if keep.contains(id) {
            continue;
        }
        let b = &mut m.weights.blocks[pos];
        for t in [
            &mut b.ln1_gain, &mut b.ln1_bias, &mut b.wq, &mut b.bq, &mut b.wk, &mut b.bk, &mut b.wv, &mut b.bv,
            &mut b.wo, &mut b.bo, &mut b.ln2_gain, &mut b.ln2_bias, &mut b.w1, &mut b.b1, &mut b.w2, &mut b.b2,
        ] {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    m
}

// ---------------------------------------------------------------------------
// Finite-difference gradient oracle for the whole model.

pub struct FdReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
    pub tensors: usize,
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    s / a.len() as f64
}

/// Plain-evaluation loss, restarting from the cached input of block
/// `from` (`blocks.len()` = head only).
struct Suffix<'a> {
    model: &'a ForecastModel,
    x: &'a Tensor,
    target: &'a Tensor,
    /// prefix[k] = hidden rows entering block k; prefix[0] = embedding.
    prefix: Vec<Vec<f64>>,
}

impl<'a> Suffix<'a> {
    fn new(model: &'a ForecastModel, x: &'a Tensor, target: &'a Tensor) -> Self {
        let mut s = Suffix {
            model,
            x,
            target,
            prefix: Vec::new(),
        };
        s.prefix = s.states(model);
        s
    }

    fn states(&self, m: &ForecastModel) -> Vec<Vec<f64>> {
        let (normed, _) = instance_normalize(self.x).unwrap();
        let folded = fold_channels(&normed);
        let inst = folded.shape()[0];
        let e = Evaluator::new(&m.config, &m.layer_ids, &m.weights);
        let mut h = e.embed(&folded).unwrap();
        let mut out = vec![h.clone()];
        for k in 0..m.weights.blocks.len() {
            e.block(k, &mut h, inst).unwrap();
            out.push(h.clone());
        }
        out
    }

    /// Loss of `m`, which differs from the cached model only at or after
    /// position `from` (None = embedding, recompute everything).
    fn loss(&self, m: &ForecastModel, from: Option<usize>) -> f64 {
        let (normed, stats) = instance_normalize(self.x).unwrap();
        let folded = fold_channels(&normed);
        let inst = folded.shape()[0];
        let e = Evaluator::new(&m.config, &m.layer_ids, &m.weights);
        let (mut h, start) = match from {
            None => (e.embed(&folded).unwrap(), 0),
            Some(k) => (self.prefix[k].clone(), k),
        };
        for k in start..m.weights.blocks.len() {
            e.block(k, &mut h, inst).unwrap();
        }
        let y = e.head(&h, inst);
        let mut f = unfold_channels(&y, self.x.shape()[2]);
        stats.denormalize(&mut f);
        mse(&f, self.target)
    }
}

/// Compares tape gradients of the forecast MSE with central differences
/// over up to `per_tensor` random coordinates of every parameter tensor
/// (all coordinates of smaller tensors).
pub fn fd_check_model(model: &ForecastModel, x: &Tensor, target: &Tensor, per_tensor: usize, h: f64, seed: u64) -> FdReport {
    let mut tape = Tape::new();
    let vars = model.tape_params(&mut tape);
    let pred = model.forward_tape(&mut tape, &vars, x).unwrap();
    let loss = tape.mse(pred, &fold_channels(target)).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut analytic = Vec::new();
    vars.visit(&model.layer_ids, |name, _, v| analytic.push((name.to_string(), grads.get(*v))));

    let suffix = Suffix::new(model, x, target);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = model.clone();
    let ids = model.layer_ids.clone();
    let nblocks = ids.len();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        tensors: analytic.len(),
    };
    for (ti, (name, grad)) in analytic.iter().enumerate() {
        let from = if name.starts_with("embed.") {
            None
        } else if let Some(rest) = name.strip_prefix("layer.") {
            let id: usize = rest.split('.').next().unwrap().parse().unwrap();
            Some(ids.iter().position(|x| *x == id).unwrap())
        } else {
            Some(nblocks)
        };
        let n = grad.len();
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_tensor).into_vec()
        };
        for idx in coords {
            let orig = set_coord(&mut work, &ids, ti, idx, |v| v + h);
            let up = suffix.loss(&work, from);
            set_coord(&mut work, &ids, ti, idx, |_| orig - h);
            let down = suffix.loss(&work, from);
            set_coord(&mut work, &ids, ti, idx, |_| orig);
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(grad.data()[idx], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = format!("{name}[{idx}]: tape {} fd {numeric}", grad.data()[idx]);
            }
            report.checked += 1;
        }
    }
    report
}

/// Sets one coordinate of the ti-th visited tensor, returning its old value.
fn set_coord(model: &mut ForecastModel, ids: &[usize], ti: usize, idx: usize, f: impl Fn(f64) -> f64) -> f64 {
    let mut old = 0.0;
    let mut i = 0;
    model.weights.visit_mut(ids, |_, _, t| {
        if i == ti {
            old = t.data()[idx];
            t.data_mut()[idx] = f(old);
        }
        i += 1;
    });
    old
}
