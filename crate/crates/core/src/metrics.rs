//! MAE / MSE / MAPE over forecast windows.

use serde::{Deserialize, Serialize};

use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::model::ForecastModel;
use crate::tensor::Tensor;

/// Targets with `|y|` at or below this are skipped by MAPE.
pub const MAPE_ZERO: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    #[default]
    Standardized,
    Raw,
}

impl Scale {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standardized" => Ok(Scale::Standardized),
            "raw" => Ok(Scale::Raw),
            other => Err(Error::config(format!("unknown scale '{other}' (standardized|raw)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mae: f64,
    pub mse: f64,
    /// Percent; `None` when every target was zero.
    pub mape: Option<f64>,
    pub mape_skipped: usize,
    pub scale: Scale,
    pub n_windows: usize,
}

/// Model forecasts for every window, `[N, T_out, V]`, on the windows'
/// standardized scale.
pub fn predict(model: &ForecastModel, windows: &WindowSet, batch: usize) -> Result<Tensor> {
    if windows.is_empty() {
        return Err(Error::config("no windows to predict"));
    }
    let mut out = Vec::with_capacity(windows.targets.len());
    for b in windows.batches(batch) {
        let y = model.forward(&b.inputs, false)?.forecast;
        if !y.all_finite() {
            return Err(Error::numeric("forecast contains non-finite values"));
        }
        out.extend(y.into_data());
    }
    Tensor::new(windows.targets.shape().to_vec(), out)
}

/// Metrics for precomputed predictions (both `[N, T_out, V]`).
pub fn score(pred: &Tensor, target: &Tensor, scale: Scale) -> Result<EvalResult> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("score", pred.shape(), target.shape()));
    }
    if target.rank() != 3 || target.shape()[0] == 0 {
        return Err(Error::config("metrics need at least one [T_out, V] window"));
    }
    let n = target.shape()[0];
    let per = target.len() / n;
    let (mut mae, mut mse) = (0.0, 0.0);
    let (mut ape, mut counted, mut skipped) = (0.0, 0usize, 0usize);
    for (pw, tw) in pred.data().chunks(per).zip(target.data().chunks(per)) {
        let (mut a, mut s) = (0.0, 0.0);
        for (&p, &y) in pw.iter().zip(tw) {
            let e = p - y;
            a += e.abs();
            s += e * e;
            if y.abs() <= MAPE_ZERO {
                skipped += 1;
            } else {
                ape += (e / y).abs();
                counted += 1;
            }
        }
        mae += a / per as f64;
        mse += s / per as f64;
    }
    Ok(EvalResult {
        mae: mae / n as f64,
        mse: mse / n as f64,
        mape: (counted > 0).then(|| 100.0 * ape / counted as f64),
        mape_skipped: skipped,
        scale,
        n_windows: n,
    })
}

pub fn evaluate(model: &ForecastModel, windows: &WindowSet, scale: Scale) -> Result<EvalResult> {
    let mut pred = predict(model, windows, 64)?;
    let mut target = windows.targets.clone();
    if scale == Scale::Raw {
        windows.norm.destandardize(pred.data_mut());
        windows.norm.destandardize(target.data_mut());
    }
    score(&pred, &target, scale)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let y = t(&[2, 2, 1], vec![1.0, -2.0, 3.0, 0.5]);
        let r = score(&y, &y, Scale::Standardized).unwrap();
        assert_eq!((r.mae, r.mse, r.mape), (0.0, 0.0, Some(0.0)));
    }

    #[test]
    fn constant_offset() {
        let y = t(&[2, 3, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = y.map(|v| v - 0.5);
        let r = score(&p, &y, Scale::Standardized).unwrap();
        assert!((r.mae - 0.5).abs() < 1e-15);
        assert!((r.mse - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_targets_skipped_by_mape() {
        let y = t(&[1, 2, 1], vec![0.0, 2.0]);
        let p = t(&[1, 2, 1], vec![1.0, 1.0]);
        let r = score(&p, &y, Scale::Raw).unwrap();
        assert_eq!(r.mape_skipped, 1);
        assert_eq!(r.mape, Some(50.0));
        let r = score(&p, &Tensor::zeros(&[1, 2, 1]), Scale::Raw).unwrap();
        assert_eq!(r.mape, None);
    }

    #[test]
    fn shape_mismatch() {
        assert!(score(&Tensor::zeros(&[1, 2, 1]), &Tensor::zeros(&[1, 3, 1]), Scale::Raw).is_err());
    }
}
