//! Decoder-only patch forecaster with per-layer instrumentation.
//!
//! Layout of one forward pass:
//!
//! ```text
//! x [B, T_in, V] -> instance norm -> fold channels [B*V, T_in]
//!   -> patches [B*V*N_p, P] -> linear + learned positions  (H^0)
//!   -> L x { h += attn(LN(h)); h += mlp(LN(h)) }            (H^1..H^L)
//!   -> LN -> flatten [B*V, N_p*d] -> linear [B*V, T_out] -> de-normalize
//! ```
//!
//! Blocks are pre-norm residual, so a block whose projections are all zero
//! is exactly the identity; pruning a block and zeroing it agree bitwise.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tensor::{causal_mask, gelu, layer_norm_rows, matmul_into, softmax_rows_inplace, Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;
/// Floor for a per-instance standard deviation.
pub const INSTANCE_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub mlp_ratio: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale configuration for synthetic series.
    pub fn reference_synthetic() -> Self {
        Self {
            layers: 8,
            d_model: 64,
            heads: 4,
            patch_size: 16,
            stride: 8,
            t_in: 128,
            t_out: 32,
            mlp_ratio: 4.0,
            seed: 0,
        }
    }

    /// Desk-scale configuration for real CSV datasets (336 → 96).
    pub fn reference_csv() -> Self {
        Self {
            t_in: 336,
            t_out: 96,
            ..Self::reference_synthetic()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.patch_size == 0 || self.stride == 0 || self.t_out == 0 {
            return Err(Error::config("patch size, stride and t_out must be positive"));
        }
        if self.t_in < self.patch_size {
            return Err(Error::config(format!(
                "t_in {} is shorter than the patch size {}",
                self.t_in, self.patch_size
            )));
        }
        if self.num_patches() < 2 {
            return Err(Error::config(format!(
                "t_in {}, patch {}, stride {} gives {} patch; at least 2 are required",
                self.t_in,
                self.patch_size,
                self.stride,
                self.num_patches()
            )));
        }
        if !(self.mlp_ratio > 0.0 && self.mlp_ratio.is_finite()) || self.mlp_hidden() == 0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        if self.t_in < self.patch_size || self.stride == 0 {
            return 0;
        }
        (self.t_in - self.patch_size) / self.stride + 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.d_model as f64).round() as usize
    }

    /// Parameters in one transformer block.
    pub fn block_param_count(&self) -> usize {
        let d = self.d_model;
        let h = self.mlp_hidden();
        // two norms, four attention projections, two MLP projections
        2 * 2 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d)
    }

    /// Total parameters of a model with `blocks` retained blocks.
    pub fn param_count(&self, blocks: usize) -> usize {
        let (d, p, np) = (self.d_model, self.patch_size, self.num_patches());
        let embed = p * d + d + np * d;
        let head = 2 * d + np * d * self.t_out + self.t_out;
        embed + blocks * self.block_param_count() + head
    }
}

/// Role of a parameter; only `Matrix` parameters receive weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Matrix,
    Bias,
    NormGain,
    Position,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub ln1_gain: T,
    pub ln1_bias: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_gain: T,
    pub ln2_bias: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// Parameter set. `T` is a tensor for stored weights or a tape handle
/// while training.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub embed_w: T,
    pub embed_b: T,
    pub pos: T,
    pub blocks: Vec<Block<T>>,
    pub final_gain: T,
    pub final_bias: T,
    pub head_w: T,
    pub head_b: T,
}

macro_rules! block_fields {
    ($m:ident) => {
        $m!(ln1_gain, "ln1.gain", NormGain);
        $m!(ln1_bias, "ln1.bias", Bias);
        $m!(wq, "attn.wq", Matrix);
        $m!(bq, "attn.bq", Bias);
        $m!(wk, "attn.wk", Matrix);
        $m!(bk, "attn.bk", Bias);
        $m!(wv, "attn.wv", Matrix);
        $m!(bv, "attn.bv", Bias);
        $m!(wo, "attn.wo", Matrix);
        $m!(bo, "attn.bo", Bias);
        $m!(ln2_gain, "ln2.gain", NormGain);
        $m!(ln2_bias, "ln2.bias", Bias);
        $m!(w1, "mlp.w1", Matrix);
        $m!(b1, "mlp.b1", Bias);
        $m!(w2, "mlp.w2", Matrix);
        $m!(b2, "mlp.b2", Bias);
    };
}

impl<T> Block<T> {
    fn try_from_fn<E>(mut f: impl FnMut(&'static str, ParamKind) -> std::result::Result<T, E>) -> std::result::Result<Self, E> {
        macro_rules! make {
            ($($field:ident, $name:expr, $kind:ident);*) => {
                Ok(Block { $($field: f($name, ParamKind::$kind)?),* })
            };
        }
        make!(
            ln1_gain, "ln1.gain", NormGain;
            ln1_bias, "ln1.bias", Bias;
            wq, "attn.wq", Matrix;
            bq, "attn.bq", Bias;
            wk, "attn.wk", Matrix;
            bk, "attn.bk", Bias;
            wv, "attn.wv", Matrix;
            bv, "attn.bv", Bias;
            wo, "attn.wo", Matrix;
            bo, "attn.bo", Bias;
            ln2_gain, "ln2.gain", NormGain;
            ln2_bias, "ln2.bias", Bias;
            w1, "mlp.w1", Matrix;
            b1, "mlp.b1", Bias;
            w2, "mlp.w2", Matrix;
            b2, "mlp.b2", Bias
        )
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'static str, ParamKind, &'a T)) {
        macro_rules! v {
            ($field:ident, $name:expr, $kind:ident) => {
                f($name, ParamKind::$kind, &self.$field)
            };
        }
        block_fields!(v);
    }

    fn visit_mut(&mut self, f: &mut impl FnMut(&'static str, ParamKind, &mut T)) {
        macro_rules! v {
            ($field:ident, $name:expr, $kind:ident) => {
                f($name, ParamKind::$kind, &mut self.$field)
            };
        }
        block_fields!(v);
    }
}

impl<T> Weights<T> {
    /// Builds a parameter set by name. Block names are prefixed with
    /// `layer.{id}.` using the original layer index.
    pub fn try_build<E>(
        layer_ids: &[usize],
        mut f: impl FnMut(&str, ParamKind) -> std::result::Result<T, E>,
    ) -> std::result::Result<Self, E> {
        let embed_w = f("embed.weight", ParamKind::Matrix)?;
        let embed_b = f("embed.bias", ParamKind::Bias)?;
        let pos = f("embed.pos", ParamKind::Position)?;
        let mut blocks = Vec::with_capacity(layer_ids.len());
        for id in layer_ids {
            blocks.push(Block::try_from_fn(|n, k| f(&format!("layer.{id}.{n}"), k))?);
        }
        Ok(Weights {
            embed_w,
            embed_b,
            pos,
            blocks,
            final_gain: f("final_norm.gain", ParamKind::NormGain)?,
            final_bias: f("final_norm.bias", ParamKind::Bias)?,
            head_w: f("head.weight", ParamKind::Matrix)?,
            head_b: f("head.bias", ParamKind::Bias)?,
        })
    }

    /// Visits every parameter in canonical order with its full name.
    pub fn visit<'a>(&'a self, layer_ids: &[usize], mut f: impl FnMut(&str, ParamKind, &'a T)) {
        f("embed.weight", ParamKind::Matrix, &self.embed_w);
        f("embed.bias", ParamKind::Bias, &self.embed_b);
        f("embed.pos", ParamKind::Position, &self.pos);
        for (block, id) in self.blocks.iter().zip(layer_ids) {
            block.visit(&mut |n, k, t| f(&format!("layer.{id}.{n}"), k, t));
        }
        f("final_norm.gain", ParamKind::NormGain, &self.final_gain);
        f("final_norm.bias", ParamKind::Bias, &self.final_bias);
        f("head.weight", ParamKind::Matrix, &self.head_w);
        f("head.bias", ParamKind::Bias, &self.head_b);
    }

    pub fn visit_mut(&mut self, layer_ids: &[usize], mut f: impl FnMut(&str, ParamKind, &mut T)) {
        f("embed.weight", ParamKind::Matrix, &mut self.embed_w);
        f("embed.bias", ParamKind::Bias, &mut self.embed_b);
        f("embed.pos", ParamKind::Position, &mut self.pos);
        for (block, id) in self.blocks.iter_mut().zip(layer_ids) {
            block.visit_mut(&mut |n, k, t| f(&format!("layer.{id}.{n}"), k, t));
        }
        f("final_norm.gain", ParamKind::NormGain, &mut self.final_gain);
        f("final_norm.bias", ParamKind::Bias, &mut self.final_bias);
        f("head.weight", ParamKind::Matrix, &mut self.head_w);
        f("head.bias", ParamKind::Bias, &mut self.head_b);
    }

    pub fn map<U>(&self, layer_ids: &[usize], mut f: impl FnMut(&str, ParamKind, &T) -> U) -> Weights<U> {
        let mut flat = Vec::new();
        self.visit(layer_ids, |n, k, t| flat.push(f(n, k, t)));
        let mut it = flat.into_iter();
        Weights::try_build::<()>(layer_ids, |_, _| Ok(it.next().expect("same order"))).expect("infallible")
    }
}

impl<F: Scalar> Weights<Tensor<F>> {
    /// Expected shape of every parameter for `cfg`.
    pub fn shapes(cfg: &ModelConfig, layer_ids: &[usize]) -> Weights<Vec<usize>> {
        let (d, p, np, h, to) = (
            cfg.d_model,
            cfg.patch_size,
            cfg.num_patches(),
            cfg.mlp_hidden(),
            cfg.t_out,
        );
        Weights::try_build::<()>(layer_ids, |name, _| {
            let leaf = name.rsplit_once("layer.").map_or(name, |(_, rest)| {
                rest.split_once('.').map_or(rest, |(_, r)| r)
            });
            Ok(match leaf {
                "embed.weight" => vec![p, d],
                "embed.pos" => vec![np, d],
                "head.weight" => vec![np * d, to],
                "head.bias" => vec![to],
                "attn.wq" | "attn.wk" | "attn.wv" | "attn.wo" => vec![d, d],
                "mlp.w1" => vec![d, h],
                "mlp.b1" => vec![h],
                "mlp.w2" => vec![h, d],
                _ => vec![d],
            })
        })
        .expect("infallible")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastModel {
    pub config: ModelConfig,
    /// Original indices of the blocks that are present, strictly increasing.
    pub layer_ids: Vec<usize>,
    pub weights: Weights<Tensor>,
}

/// Per-instance statistics from instance normalization; instance `i`
/// is window `i / V`, channel `i % V`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Instances whose standard deviation was clamped.
    pub clamped: Vec<usize>,
    pub batch: usize,
    pub channels: usize,
}

impl InstanceStats {
    /// De-normalizes a `[B, T, V]` tensor in place.
    pub fn denormalize<F: Scalar>(&self, x: &mut Tensor<F>) {
        let v = self.channels;
        let t = x.shape()[1];
        for (b, block) in x.data_mut().chunks_mut(t * v).enumerate() {
            for row in block.chunks_mut(v) {
                for (c, val) in row.iter_mut().enumerate() {
                    let i = b * v + c;
                    *val = *val * F::from_f64(self.std[i]) + F::from_f64(self.mean[i]);
                }
            }
        }
    }
}

/// Per-window, per-channel standardization over the time axis.
pub fn instance_normalize<F: Scalar>(x: &Tensor<F>) -> Result<(Tensor<F>, InstanceStats)> {
    if x.rank() != 3 {
        return Err(Error::dim("instance_normalize", x.shape(), &[0, 0, 0]));
    }
    let (b, t, v) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if t < 2 {
        return Err(Error::config("instance normalization needs at least 2 time steps"));
    }
    let data = x.data();
    let mut stats = InstanceStats {
        mean: vec![0.0; b * v],
        std: vec![0.0; b * v],
        clamped: Vec::new(),
        batch: b,
        channels: v,
    };
    let mut out = vec![F::ZERO; data.len()];
    for bi in 0..b {
        for c in 0..v {
            let i = bi * v + c;
            let mut mean = 0.0;
            for s in 0..t {
                mean += data[(bi * t + s) * v + c].to_f64();
            }
            mean /= t as f64;
            let mut var = 0.0;
            for s in 0..t {
                let d = data[(bi * t + s) * v + c].to_f64() - mean;
                var += d * d;
            }
            let mut std = (var / t as f64).sqrt();
            if std < INSTANCE_EPS {
                std = INSTANCE_EPS;
                stats.clamped.push(i);
            }
            stats.mean[i] = mean;
            stats.std[i] = std;
            for s in 0..t {
                let k = (bi * t + s) * v + c;
                out[k] = F::from_f64((data[k].to_f64() - mean) / std);
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, stats))
}

/// `[B, T, V]` → `[B*V, T]`, one row per channel instance.
pub fn fold_channels<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (b, t, v) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let src = x.data();
    let mut out = vec![F::ZERO; src.len()];
    for bi in 0..b {
        for s in 0..t {
            for c in 0..v {
                out[(bi * v + c) * t + s] = src[(bi * t + s) * v + c];
            }
        }
    }
    Tensor::new(vec![b * v, t], out).expect("fold shape")
}

/// `[B*V, T]` → `[B, T, V]`.
pub fn unfold_channels<F: Scalar>(x: &Tensor<F>, channels: usize) -> Tensor<F> {
    let (rows, t) = (x.shape()[0], x.shape()[1]);
    let b = rows / channels;
    let src = x.data();
    let mut out = vec![F::ZERO; src.len()];
    for bi in 0..b {
        for s in 0..t {
            for c in 0..channels {
                out[(bi * t + s) * channels + c] = src[(bi * channels + c) * t + s];
            }
        }
    }
    Tensor::new(vec![b, t, channels], out).expect("unfold shape")
}

/// Cuts `[I, T_in]` rows into `[I * N_p, P]` patches.
pub fn extract_patches<F: Scalar>(x: &Tensor<F>, cfg: &ModelConfig) -> Result<Tensor<F>> {
    let (rows, t) = (x.shape()[0], x.shape()[1]);
    if t != cfg.t_in {
        return Err(Error::dim("patches", x.shape(), &[rows, cfg.t_in]));
    }
    let (p, s, np) = (cfg.patch_size, cfg.stride, cfg.num_patches());
    let mut out = Vec::with_capacity(rows * np * p);
    for row in x.data().chunks(t) {
        for k in 0..np {
            out.extend_from_slice(&row[k * s..k * s + p]);
        }
    }
    Tensor::new(vec![rows * np, p], out)
}

/// Captured per-layer representations for a batch of instances.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// `hidden[0]` is the embedding with positions; `hidden[k]` the output
    /// of the k-th present block. Each is `[I, N_p, d_model]`.
    pub hidden: Vec<Tensor>,
    /// `attn[k]` is `[I, H, N_p, N_p]` for the k-th present block.
    pub attn: Vec<Tensor>,
    /// Original layer index of each present block.
    pub layer_ids: Vec<usize>,
    /// Present when the trace came from a model forward pass.
    pub stats: Option<InstanceStats>,
}

impl LayerTrace {
    pub fn instances(&self) -> usize {
        self.hidden.first().map_or(0, |h| h.shape()[0])
    }

    pub fn num_blocks(&self) -> usize {
        self.attn.len()
    }

    pub fn heads(&self) -> usize {
        self.attn.first().map_or(0, |a| a.shape()[1])
    }

    pub fn num_patches(&self) -> usize {
        self.hidden.first().map_or(0, |h| h.shape()[1])
    }

    pub fn d_model(&self) -> usize {
        self.hidden.first().map_or(0, |h| h.shape()[2])
    }

    /// Checks shapes and that every attention row is a causal distribution.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.hidden.len() != self.attn.len() + 1 || self.layer_ids.len() != self.attn.len() {
            return Err(Error::format("trace needs one more hidden state than attention maps"));
        }
        let (i, np, d, h) = (self.instances(), self.num_patches(), self.d_model(), self.heads());
        for t in &self.hidden {
            if t.shape() != [i, np, d] {
                return Err(Error::dim("trace hidden", t.shape(), &[i, np, d]));
            }
        }
        for a in &self.attn {
            if a.shape() != [i, h, np, np] {
                return Err(Error::dim("trace attn", a.shape(), &[i, h, np, np]));
            }
            for (r, row) in a.data().chunks(np).enumerate() {
                let q = r % np;
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > tol || row[q + 1..].iter().any(|&v| v != 0.0) || row.iter().any(|&v| v < 0.0) {
                    return Err(Error::Integrity(format!("attention row {r} is not a causal distribution")));
                }
            }
        }
        Ok(())
    }
}

pub struct ForwardOutput<F: Scalar> {
    /// `[B, T_out, V]` on the input's scale.
    pub forecast: Tensor<F>,
    pub trace: Option<LayerTrace>,
}

fn add_rows<F: Scalar>(x: &mut [F], bias: &[F]) {
    let n = bias.len();
    for row in x.chunks_mut(n) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += *b;
        }
    }
}

fn linear<F: Scalar>(x: &[F], rows: usize, w: &Tensor<F>, b: &Tensor<F>) -> Vec<F> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![F::ZERO; rows * n];
    matmul_into(x, w.data(), &mut out, rows, k, n, false, false, false);
    add_rows(&mut out, b.data());
    out
}

/// Plain (tape-free) evaluation, generic over precision.
pub struct Evaluator<'a, F: Scalar> {
    cfg: &'a ModelConfig,
    layer_ids: &'a [usize],
    w: &'a Weights<Tensor<F>>,
    mask: Tensor<F>,
}

impl<'a, F: Scalar> Evaluator<'a, F> {
    pub fn new(cfg: &'a ModelConfig, layer_ids: &'a [usize], w: &'a Weights<Tensor<F>>) -> Self {
        Self {
            cfg,
            layer_ids,
            w,
            mask: causal_mask(cfg.num_patches()),
        }
    }

    /// Patch embedding plus positions, `[I*N_p, d]`, from folded `[I, T_in]` rows.
    pub fn embed(&self, folded: &Tensor<F>) -> Result<Vec<F>> {
        let patches = extract_patches(folded, self.cfg)?;
        let rows = patches.shape()[0];
        let mut h = linear(patches.data(), rows, &self.w.embed_w, &self.w.embed_b);
        for block in h.chunks_mut(self.w.pos.len()) {
            for (o, p) in block.iter_mut().zip(self.w.pos.data()) {
                *o += *p;
            }
        }
        Ok(h)
    }

    /// Applies block `k` in place; returns the attention maps `[I*H*N_p*N_p]`.
    pub fn block(&self, k: usize, h: &mut [F], instances: usize) -> Result<Vec<F>> {
        let cfg = self.cfg;
        let b = &self.w.blocks[k];
        let (d, np, heads, dh) = (cfg.d_model, cfg.num_patches(), cfg.heads, cfg.head_dim());
        let rows = instances * np;
        let eps = F::from_f64(LN_EPS);

        let mut ln = vec![F::ZERO; h.len()];
        layer_norm_rows(h, d, b.ln1_gain.data(), b.ln1_bias.data(), eps, &mut ln, None);
        let q = crate::autograd::split_heads_data(&linear(&ln, rows, &b.wq, &b.bq), instances, np, heads, dh);
        let kk = crate::autograd::split_heads_data(&linear(&ln, rows, &b.wk, &b.bk), instances, np, heads, dh);
        let v = crate::autograd::split_heads_data(&linear(&ln, rows, &b.wv, &b.bv), instances, np, heads, dh);

        let groups = instances * heads;
        let mut att = vec![F::ZERO; groups * np * np];
        let mut ctx = vec![F::ZERO; groups * np * dh];
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        for g in 0..groups {
            let qs = &q[g * np * dh..(g + 1) * np * dh];
            let ks = &kk[g * np * dh..(g + 1) * np * dh];
            let a = &mut att[g * np * np..(g + 1) * np * np];
            matmul_into(qs, ks, a, np, dh, np, false, true, false);
            for x in a.iter_mut() {
                *x *= scale;
            }
        }
        softmax_rows_inplace(&mut att, np, Some(self.mask.data()))?;
        for g in 0..groups {
            matmul_into(
                &att[g * np * np..(g + 1) * np * np],
                &v[g * np * dh..(g + 1) * np * dh],
                &mut ctx[g * np * dh..(g + 1) * np * dh],
                np,
                np,
                dh,
                false,
                false,
                false,
            );
        }
        let merged = crate::autograd::merge_heads_data(&ctx, instances, np, heads, dh);
        let o = linear(&merged, rows, &b.wo, &b.bo);
        for (x, y) in h.iter_mut().zip(&o) {
            *x += *y;
        }

        layer_norm_rows(h, d, b.ln2_gain.data(), b.ln2_bias.data(), eps, &mut ln, None);
        let mut m = linear(&ln, rows, &b.w1, &b.b1);
        for x in m.iter_mut() {
            *x = gelu(*x);
        }
        let m2 = linear(&m, rows, &b.w2, &b.b2);
        for (x, y) in h.iter_mut().zip(&m2) {
            *x += *y;
        }
        if h.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite activation in layer {}",
                self.layer_ids[k]
            )));
        }
        Ok(att)
    }

    /// Final norm and prediction head: `[I*N_p, d]` → normalized-scale `[I, T_out]`.
    pub fn head(&self, h: &[F], instances: usize) -> Tensor<F> {
        let d = self.cfg.d_model;
        let mut ln = vec![F::ZERO; h.len()];
        layer_norm_rows(
            h,
            d,
            self.w.final_gain.data(),
            self.w.final_bias.data(),
            F::from_f64(LN_EPS),
            &mut ln,
            None,
        );
        let out = linear(&ln, instances, &self.w.head_w, &self.w.head_b);
        Tensor::new(vec![instances, self.cfg.t_out], out).expect("head shape")
    }

    pub fn forward(&self, x: &Tensor<F>, capture: bool) -> Result<ForwardOutput<F>> {
        let cfg = self.cfg;
        if x.rank() != 3 || x.shape()[1] != cfg.t_in {
            return Err(Error::dim("forward", x.shape(), &[0, cfg.t_in, 0]));
        }
        if !x.all_finite() {
            return Err(Error::numeric("input contains non-finite values"));
        }
        let channels = x.shape()[2];
        let (normed, stats) = instance_normalize(x)?;
        let folded = fold_channels(&normed);
        let instances = folded.shape()[0];
        let (np, d, heads) = (cfg.num_patches(), cfg.d_model, cfg.heads);

        let mut h = self.embed(&folded)?;
        let mut hidden = Vec::new();
        let mut attn = Vec::new();
        let snap = |h: &[F]| -> Tensor {
            Tensor::new(vec![instances, np, d], h.iter().map(|v| v.to_f64()).collect()).expect("trace shape")
        };
        if capture {
            hidden.push(snap(&h));
        }
        for k in 0..self.w.blocks.len() {
            let att = self.block(k, &mut h, instances)?;
            if capture {
                hidden.push(snap(&h));
                attn.push(
                    Tensor::new(
                        vec![instances, heads, np, np],
                        att.iter().map(|v| v.to_f64()).collect(),
                    )
                    .expect("trace shape"),
                );
            }
        }
        let y = self.head(&h, instances);
        let mut forecast = unfold_channels(&y, channels);
        stats.denormalize(&mut forecast);
        let trace = capture.then(|| LayerTrace {
            hidden,
            attn,
            layer_ids: self.layer_ids.to_vec(),
            stats: Some(stats),
        });
        Ok(ForwardOutput { forecast, trace })
    }
}

impl ForecastModel {
    /// Fresh model: Gaussian(0, 0.02) projections and positions, zero
    /// biases, unit norm gains. Seeded from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layer_ids: Vec<usize> = (0..config.layers).collect();
        let mut rng = SeedStream::new(config.seed).rng("init");
        let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
        let shapes = Weights::<Tensor>::shapes(&config, &layer_ids);
        let weights = shapes.map(&layer_ids, |_, kind, shape| match kind {
            ParamKind::Matrix | ParamKind::Position => {
                let n = shape.iter().product();
                let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
                Tensor::new(shape.clone(), data).expect("init shape")
            }
            ParamKind::NormGain => Tensor::full(shape, 1.0),
            ParamKind::Bias => Tensor::zeros(shape),
        });
        Ok(Self {
            config,
            layer_ids,
            weights,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.layer_ids.len()
    }

    pub fn evaluator(&self) -> Evaluator<'_, f64> {
        Evaluator::new(&self.config, &self.layer_ids, &self.weights)
    }

    /// 64-bit forward pass. `x` is `[B, T_in, V]`.
    pub fn forward(&self, x: &Tensor, capture: bool) -> Result<ForwardOutput<f64>> {
        self.evaluator().forward(x, capture)
    }

    /// Weights converted for 32-bit inference.
    pub fn weights_f32(&self) -> Weights<Tensor<f32>> {
        self.weights.map(&self.layer_ids, |_, _, t| t.cast())
    }

    /// Applies the final norm and prediction head to `trace.hidden[state]`,
    /// as if that state were the output of the last block.
    pub fn project_hidden_to_series(&self, trace: &LayerTrace, state: usize) -> Result<Tensor> {
        let h = trace.hidden.get(state).ok_or_else(|| {
            Error::config(format!(
                "layer {state} out of range: trace has {} states",
                trace.hidden.len()
            ))
        })?;
        let stats = trace
            .stats
            .as_ref()
            .ok_or_else(|| Error::config("trace carries no normalization statistics"))?;
        if h.shape()[1..] != [self.config.num_patches(), self.config.d_model] {
            return Err(Error::dim("project", h.shape(), &[self.config.num_patches(), self.config.d_model]));
        }
        let instances = h.shape()[0];
        let y = self.evaluator().head(h.data(), instances);
        let mut out = unfold_channels(&y, stats.channels);
        stats.denormalize(&mut out);
        Ok(out)
    }

    pub fn count_parameters(&self) -> usize {
        let mut n = 0;
        self.weights.visit(&self.layer_ids, |_, _, t| n += t.len());
        n
    }

    /// Forward pass recorded on `tape`, returning the folded forecast
    /// `[B*V, T_out]` on the input's scale. `params` must come from
    /// [`ForecastModel::tape_params`] on the same tape.
    pub fn forward_tape(&self, tape: &mut Tape, params: &Weights<Var>, x: &Tensor) -> Result<Var> {
        let cfg = &self.config;
        let (normed, stats) = instance_normalize(x)?;
        let folded = fold_channels(&normed);
        let instances = folded.shape()[0];
        let (np, d, heads, dh) = (cfg.num_patches(), cfg.d_model, cfg.heads, cfg.head_dim());
        let mask = causal_mask::<f64>(np);

        let patches = tape.constant(extract_patches(&folded, cfg)?);
        let e = tape.matmul(patches, params.embed_w)?;
        let e = tape.add_bias(e, params.embed_b)?;
        let mut h = tape.add_tiled(e, params.pos)?;
        let scale = 1.0 / (dh as f64).sqrt();
        for b in &params.blocks {
            let ln = tape.layer_norm(h, b.ln1_gain, b.ln1_bias, LN_EPS)?;
            let proj = |tape: &mut Tape, w: Var, bias: Var| -> Result<Var> {
                let y = tape.matmul(ln, w)?;
                let y = tape.add_bias(y, bias)?;
                tape.split_heads(y, instances, np, heads)
            };
            let q = proj(tape, b.wq, b.bq)?;
            let k = proj(tape, b.wk, b.bk)?;
            let v = proj(tape, b.wv, b.bv)?;
            let s = tape.bmm(q, k, true)?;
            let s = tape.scale(s, scale);
            let a = tape.softmax_rows(s, Some(&mask))?;
            let ctx = tape.bmm(a, v, false)?;
            let ctx = tape.merge_heads(ctx, instances, np, heads)?;
            let o = tape.matmul(ctx, b.wo)?;
            let o = tape.add_bias(o, b.bo)?;
            h = tape.add(h, o)?;

            let ln2 = tape.layer_norm(h, b.ln2_gain, b.ln2_bias, LN_EPS)?;
            let m = tape.matmul(ln2, b.w1)?;
            let m = tape.add_bias(m, b.b1)?;
            let m = tape.gelu(m);
            let m = tape.matmul(m, b.w2)?;
            let m = tape.add_bias(m, b.b2)?;
            h = tape.add(h, m)?;
        }
        let ln = tape.layer_norm(h, params.final_gain, params.final_bias, LN_EPS)?;
        let flat = tape.reshape(ln, &[instances, np * d])?;
        let y = tape.matmul(flat, params.head_w)?;
        let y = tape.add_bias(y, params.head_b)?;
        tape.row_affine(y, &stats.std, &stats.mean)
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn tape_params(&self, tape: &mut Tape) -> Weights<Var> {
        self.weights.map(&self.layer_ids, |_, _, t| tape.param(t.clone()))
    }

    /// Checks `layer_ids` and parameter shapes against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layer_ids.windows(2).any(|w| w[0] >= w[1])
            || self.layer_ids.iter().any(|&id| id >= self.config.layers)
        {
            return Err(Error::config(format!(
                "layer ids {:?} must be strictly increasing and below {}",
                self.layer_ids, self.config.layers
            )));
        }
        if self.weights.blocks.len() != self.layer_ids.len() {
            return Err(Error::config("block count does not match layer ids"));
        }
        let shapes = Weights::<Tensor>::shapes(&self.config, &self.layer_ids);
        let mut expected = Vec::new();
        shapes.visit(&self.layer_ids, |n, _, s| expected.push((n.to_string(), s.clone())));
        let mut i = 0;
        let mut bad = None;
        self.weights.visit(&self.layer_ids, |n, _, t| {
            if bad.is_none() && t.shape() != expected[i].1.as_slice() {
                bad = Some(format!("{n}: {:?} != {:?}", t.shape(), expected[i].1));
            }
            i += 1;
        });
        match bad {
            Some(msg) => Err(Error::config(format!("parameter shape mismatch {msg}"))),
            None => Ok(()),
        }
    }
}
