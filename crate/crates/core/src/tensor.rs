//! Dense row-major tensors and the numeric kernels shared by the inference
//! path and the gradient tape.
//!
//! Tensors are immutable values once built. Every kernel accumulates in a
//! fixed order, so identical inputs give bit-identical outputs on a given
//! platform.

use std::fmt::Debug;

use crate::error::{Error, Result};

/// Additive mask value marking a position as excluded.
pub const MASKED: f64 = -1e30;

/// Mask entries at or below this value are treated as excluded.
const MASK_THRESHOLD: f64 = -1e29;

/// Floating-point element type: `f64` for training and gradient checks,
/// `f32` for dumps and latency measurements.
pub trait Scalar:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;

    /// `c = alpha * op(a) * op(b) + beta * c` for strided row-major operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        beta: Self,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                c: &mut [Self],
                beta: Self,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(c.len() >= m * n);
                if k == 0 {
                    for v in c[..m * n].iter_mut() {
                        *v *= beta;
                    }
                    return;
                }
                // Bounds: the largest addressed element must lie inside each slice.
                let a_last = (m as isize - 1) * a_strides.0 + (k as isize - 1) * a_strides.1;
                let b_last = (k as isize - 1) * b_strides.0 + (n as isize - 1) * b_strides.1;
                assert!(a_strides.0 >= 0 && a_strides.1 >= 0 && (a_last as usize) < a.len());
                assert!(b_strides.0 >= 0 && b_strides.1 >= 0 && (b_last as usize) < b.len());
                // SAFETY: strides are non-negative and the furthest element of
                // each operand was checked against its slice length above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f64, matrixmultiply::dgemm);
impl_scalar!(f32, matrixmultiply::sgemm);

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![F::ZERO; n],
        }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::format("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis; 1 for scalars.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn at(&self, index: &[usize]) -> F {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range on axis {i}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![F::ZERO; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n, false, false, false);
        Self::new(vec![m, n], out)
    }

    /// Row-wise softmax over the last axis with an optional additive mask.
    ///
    /// The mask must have the shape of a single `[rows, n]` matrix and is
    /// broadcast over any leading axes of `self`.
    pub fn softmax_rows(&self, mask: Option<&Tensor<F>>) -> Result<Self> {
        if self.rank() < 1 {
            return Err(Error::dim("softmax_rows", &self.shape, &[]));
        }
        if !self.all_finite() {
            return Err(Error::numeric("softmax input contains non-finite values"));
        }
        let n = self.last_dim();
        let mut out = self.data.clone();
        let mask_data = match mask {
            Some(m) => {
                if m.is_empty() || !self.data.len().is_multiple_of(m.len()) || m.last_dim() != n {
                    return Err(Error::dim("softmax_rows mask", &self.shape, &m.shape));
                }
                Some(m.data())
            }
            None => None,
        };
        softmax_rows_inplace(&mut out, n, mask_data)?;
        Self::new(self.shape.clone(), out)
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Self, bias: &Self, eps: F) -> Result<Self> {
        let d = self.last_dim();
        if gain.shape != [d] || bias.shape != [d] {
            return Err(Error::dim("layer_norm", &self.shape, &gain.shape));
        }
        let mut out = vec![F::ZERO; self.data.len()];
        layer_norm_rows(&self.data, d, &gain.data, &bias.data, eps, &mut out, None);
        Self::new(self.shape.clone(), out)
    }
}

impl Tensor<f64> {
    /// Largest absolute elementwise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `c (+)= op(a) · op(b)` with `a` logically `[m, k]` and `b` logically `[k, n]`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_into<F: Scalar>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    accumulate: bool,
) {
    let a_strides = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::ONE } else { F::ZERO };
    F::gemm(m, k, n, a, a_strides, b, b_strides, c, beta);
}

/// In-place masked softmax over consecutive rows of length `n`.
pub fn softmax_rows_inplace<F: Scalar>(x: &mut [F], n: usize, mask: Option<&[F]>) -> Result<()> {
    let threshold = F::from_f64(MASK_THRESHOLD);
    for (r, row) in x.chunks_mut(n).enumerate() {
        let mrow = mask.map(|m| {
            let start = (r * n) % m.len();
            &m[start..start + n]
        });
        let mut max = None::<F>;
        for (j, v) in row.iter_mut().enumerate() {
            if let Some(mr) = mrow {
                if mr[j] <= threshold {
                    continue;
                }
                *v += mr[j];
            }
            max = Some(match max {
                Some(m) if m >= *v => m,
                _ => *v,
            });
        }
        let Some(max) = max else {
            return Err(Error::numeric("fully masked attention row"));
        };
        let mut sum = F::ZERO;
        for (j, v) in row.iter_mut().enumerate() {
            if mrow.is_some_and(|mr| mr[j] <= threshold) {
                *v = F::ZERO;
            } else {
                *v = (*v - max).exp();
                sum += *v;
            }
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(())
}

/// Row-wise layer norm. When `cache` is given, the per-row mean and inverse
/// standard deviation are written into it for the backward pass.
pub fn layer_norm_rows<F: Scalar>(
    x: &[F],
    d: usize,
    gain: &[F],
    bias: &[F],
    eps: F,
    out: &mut [F],
    mut cache: Option<(&mut [F], &mut [F])>,
) {
    let inv_d = F::ONE / F::from_f64(d as f64);
    for (r, (row, orow)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
        let mut mean = F::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = F::ZERO;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let rstd = F::ONE / (var + eps).sqrt();
        for j in 0..d {
            orow[j] = (row[j] - mean) * rstd * gain[j] + bias[j];
        }
        if let Some((means, rstds)) = cache.as_mut() {
            means[r] = mean;
            rstds[r] = rstd;
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64(GELU_C);
    let k = F::from_f64(GELU_K);
    let half = F::from_f64(0.5);
    half * x * (F::ONE + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Causal additive mask `[n, n]`: zero on and below the diagonal.
pub fn causal_mask<F: Scalar>(n: usize) -> Tensor<F> {
    let mut data = vec![F::ZERO; n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = F::from_f64(MASKED);
        }
    }
    Tensor { shape: vec![n, n], data }
}
