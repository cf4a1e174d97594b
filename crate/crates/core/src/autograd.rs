//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, which is already a topological
//! order; `backward` walks them once in reverse. A tape belongs to one
//! training step on one thread and is dropped afterwards.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{gelu, gelu_grad, layer_norm_rows, matmul_into, softmax_rows_inplace, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    AddTiled(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    Reshape(Var),
    RowAffine {
        x: Var,
        scale: Vec<f64>,
    },
    Sum(Var),
    Mse {
        pred: Var,
        target: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; exactly zero when `v` does not reach the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn rows_of(t: &Tensor) -> usize {
    t.len() / t.last_dim().max(1)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// `a · b` where `a` is `[..., k]` (leading axes flattened) and `b` is `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.rank() < 1 || av.last_dim() != bv.shape()[0] {
            return Err(Error::dim("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (rows_of(av), bv.shape()[0], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n, false, false, false);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// Adds a `[n]` bias to every row of `[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.last_dim();
        if bv.shape() != [n] {
            return Err(Error::dim("add_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    /// Adds `t` to every consecutive block of `t.len()` elements of `x`.
    pub fn add_tiled(&mut self, x: Var, t: Var) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(t));
        if tv.is_empty() || xv.len() % tv.len() != 0 || xv.last_dim() != tv.last_dim() {
            return Err(Error::dim("add_tiled", xv.shape(), tv.shape()));
        }
        let mut data = xv.data().to_vec();
        for block in data.chunks_mut(tv.len()) {
            for (o, p) in block.iter_mut().zip(tv.data()) {
                *o += p;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddTiled(x, t), &[x, t]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let d = xv.last_dim();
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::dim("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = rows_of(xv);
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        layer_norm_rows(
            xv.data(),
            d,
            gv.data(),
            bv.data(),
            eps,
            &mut out,
            Some((&mut mean, &mut rstd)),
        );
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Masked row softmax; the mask is a constant broadcast over leading axes.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if !xv.all_finite() {
            return Err(Error::numeric("softmax input contains non-finite values"));
        }
        if let Some(m) = mask {
            if m.is_empty() || !xv.len().is_multiple_of(m.len()) || m.last_dim() != n {
                return Err(Error::dim("softmax_rows mask", xv.shape(), m.shape()));
            }
        }
        let mut data = xv.data().to_vec();
        softmax_rows_inplace(&mut data, n, mask.map(Tensor::data))?;
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Batched product of `[g, m, k]` and `[g, k, n]` (or `[g, n, k]` when `trans_b`).
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(Error::dim("bmm", av.shape(), bv.shape()));
        }
        let (g, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (kb, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if kb != k {
            return Err(Error::dim("bmm", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            matmul_into(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
                false,
                trans_b,
                false,
            );
        }
        let value = Tensor::new(vec![g, m, n], out)?;
        Ok(self.push(value, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    /// `[batch*seq, heads*dh]` → `[batch*heads, seq, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let width = xv.last_dim();
        if xv.len() != batch * seq * width || !width.is_multiple_of(heads) {
            return Err(Error::dim("split_heads", xv.shape(), &[batch, seq, heads]));
        }
        let data = split_heads_data(xv.data(), batch, seq, heads, width / heads);
        let value = Tensor::new(vec![batch * heads, seq, width / heads], data)?;
        Ok(self.push(
            value,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
            &[x],
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 || xv.shape()[0] != batch * heads || xv.shape()[1] != seq {
            return Err(Error::dim("merge_heads", xv.shape(), &[batch, seq, heads]));
        }
        let dh = xv.shape()[2];
        let data = merge_heads_data(xv.data(), batch, seq, heads, dh);
        let value = Tensor::new(vec![batch * seq, heads * dh], data)?;
        Ok(self.push(
            value,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `x[r, :] * scale[r] + shift[r]` with constant per-row coefficients.
    pub fn row_affine(&mut self, x: Var, scale: &[f64], shift: &[f64]) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if rows_of(xv) != scale.len() || scale.len() != shift.len() {
            return Err(Error::dim("row_affine", xv.shape(), &[scale.len()]));
        }
        let mut data = xv.data().to_vec();
        for (r, row) in data.chunks_mut(n).enumerate() {
            for v in row.iter_mut() {
                *v = *v * scale[r] + shift[r];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(
            value,
            Op::RowAffine {
                x,
                scale: scale.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::dim("mse", pv.shape(), target.shape()));
        }
        let n = pv.len().max(1) as f64;
        let s: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(s),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            &[pred],
        ))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::dim("backward", lv.shape(), &[]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (rows_of(av), bv.shape()[0], bv.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_into(gd, bv.data(), &mut da, m, n, k, false, true, false);
                    accumulate(grads, *a, av.shape(), &da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_into(av.data(), gd, &mut db, k, m, n, true, false, false);
                    accumulate(grads, *b, bv.shape(), &db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g.shape(), gd);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.shape(), gd);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d: Vec<f64> = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, av.shape(), &d);
                }
                if self.wants(*b) {
                    let d: Vec<f64> = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, bv.shape(), &d);
                }
            }
            Op::Scale(x, c) => {
                let d: Vec<f64> = gd.iter().map(|v| v * c).collect();
                accumulate(grads, *x, g.shape(), &d);
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.shape(), gd);
                }
                if self.wants(*b) {
                    let n = g.last_dim();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (o, v) in db.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *b, &[n], &db);
                }
            }
            Op::AddTiled(x, t) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.shape(), gd);
                }
                if self.wants(*t) {
                    let tv = self.value(*t);
                    let mut dt = vec![0.0; tv.len()];
                    for block in gd.chunks(tv.len()) {
                        for (o, v) in dt.iter_mut().zip(block) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *t, tv.shape(), &dt);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d: Vec<f64> = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(g, &v)| g * gelu_grad(v))
                    .collect();
                accumulate(grads, *x, xv.shape(), &d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let gainv = self.value(*gain).data();
                let d = xv.last_dim();
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, (xrow, grow)) in xv.data().chunks(d).zip(gd.chunks(d)).enumerate() {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        xhat[j] = (xrow[j] - mu) * rs;
                        dxhat[j] = grow[j] * gainv[j];
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                    }
                    let inv_d = 1.0 / d as f64;
                    for j in 0..d {
                        dx[r * d + j] =
                            rs * (dxhat[j] - inv_d * sum_dxhat - xhat[j] * inv_d * sum_dxhat_xhat);
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, xv.shape(), &dx);
                }
                if self.wants(*gain) {
                    accumulate(grads, *gain, &[d], &dgain);
                }
                if self.wants(*bias) {
                    accumulate(grads, *bias, &[d], &dbias);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for ((yrow, grow), drow) in y.chunks(n).zip(gd.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                accumulate(grads, *x, node.value.shape(), &dx);
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (gn, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = g.shape()[2];
                if self.wants(*a) {
                    let mut da = vec![0.0; av.len()];
                    for i in 0..gn {
                        // dA = G · op(B)^T
                        matmul_into(
                            &gd[i * m * n..(i + 1) * m * n],
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                            false,
                            !*trans_b,
                            false,
                        );
                    }
                    accumulate(grads, *a, av.shape(), &da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for i in 0..gn {
                        let ga = &gd[i * m * n..(i + 1) * m * n];
                        let ad = &av.data()[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // B is [n, k]: dB = G^T · A
                            matmul_into(ga, ad, out, n, m, k, true, false, false);
                        } else {
                            // B is [k, n]: dB = A^T · G
                            matmul_into(ad, ga, out, k, m, n, true, false, false);
                        }
                    }
                    accumulate(grads, *b, bv.shape(), &db);
                }
            }
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let dh = g.shape()[2];
                let d = merge_heads_data(gd, *batch, *seq, *heads, dh);
                accumulate(grads, *x, self.value(*x).shape(), &d);
            }
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            } => {
                let dh = g.last_dim() / heads;
                let d = split_heads_data(gd, *batch, *seq, *heads, dh);
                accumulate(grads, *x, self.value(*x).shape(), &d);
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, self.value(*x).shape(), gd);
            }
            Op::RowAffine { x, scale } => {
                let n = g.last_dim();
                let mut d = gd.to_vec();
                for (r, row) in d.chunks_mut(n).enumerate() {
                    for v in row.iter_mut() {
                        *v *= scale[r];
                    }
                }
                accumulate(grads, *x, g.shape(), &d);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                let d = vec![gd[0]; xv.len()];
                accumulate(grads, *x, xv.shape(), &d);
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred);
                let c = 2.0 * gd[0] / pv.len().max(1) as f64;
                let d: Vec<f64> = pv
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(p, t)| c * (p - t))
                    .collect();
                accumulate(grads, *pred, pv.shape(), &d);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], delta: &[f64]) {
    match &mut grads[v.0] {
        Some(t) => {
            for (o, d) in t.data_mut().iter_mut().zip(delta) {
                *o += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta.to_vec()).expect("gradient shape"));
        }
    }
}

pub(crate) fn split_heads_data<T: Copy + Default>(
    x: &[T],
    batch: usize,
    seq: usize,
    heads: usize,
    dh: usize,
) -> Vec<T> {
    let width = heads * dh;
    let mut out = vec![T::default(); x.len()];
    for b in 0..batch {
        for t in 0..seq {
            let src = &x[(b * seq + t) * width..(b * seq + t + 1) * width];
            for h in 0..heads {
                let dst = ((b * heads + h) * seq + t) * dh;
                out[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
            }
        }
    }
    out
}

pub(crate) fn merge_heads_data<T: Copy + Default>(
    x: &[T],
    batch: usize,
    seq: usize,
    heads: usize,
    dh: usize,
) -> Vec<T> {
    let width = heads * dh;
    let mut out = vec![T::default(); x.len()];
    for b in 0..batch {
        for t in 0..seq {
            let dst = &mut out[(b * seq + t) * width..(b * seq + t + 1) * width];
            for h in 0..heads {
                let src = ((b * heads + h) * seq + t) * dh;
                dst[h * dh..(h + 1) * dh].copy_from_slice(&x[src..src + dh]);
            }
        }
    }
    out
}

/// Outcome of comparing tape gradients with central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub passed: bool,
}

/// Denominator floor for relative errors, so coordinates whose true
/// gradient is zero compare on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks tape gradients of the scalar `f` against central differences
/// with step `h`, over up to `samples` random coordinates per parameter
/// tensor (all coordinates when a tensor is smaller).
pub fn grad_check<F>(
    f: F,
    params: &[Tensor],
    h: f64,
    tol: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::numeric("objective is not finite"));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).data()[0].is_finite() {
        return Err(Error::numeric("objective is not finite"));
    }
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        passed: true,
    };
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let n = params[pi].len();
        let coords: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            sample(&mut rng, n, samples).into_vec()
        };
        for idx in coords {
            let orig = params[pi].data()[idx];
            work[pi].data_mut()[idx] = orig + h;
            let fp = eval(&work)?;
            work[pi].data_mut()[idx] = orig - h;
            let fm = eval(&work)?;
            work[pi].data_mut()[idx] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic.data()[idx], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, idx));
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
