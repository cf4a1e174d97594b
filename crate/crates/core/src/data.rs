//! Dataset ingestion, chronological splits, standardization and windowing.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::tensor::Tensor;

/// Per-channel standardization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Standardizes a `[..., V]` buffer in place.
    pub fn standardize(&self, data: &mut [f64]) {
        let v = self.channels();
        for row in data.chunks_mut(v) {
            for (c, x) in row.iter_mut().enumerate() {
                *x = (*x - self.mean[c]) / self.std[c];
            }
        }
    }

    pub fn destandardize(&self, data: &mut [f64]) {
        let v = self.channels();
        for row in data.chunks_mut(v) {
            for (c, x) in row.iter_mut().enumerate() {
                *x = *x * self.std[c] + self.mean[c];
            }
        }
    }
}

/// Chronological split boundaries: train `[0, train_end)`, validation
/// `[train_end, val_end)`, test `[val_end, test_end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitBoundaries {
    pub train_end: usize,
    pub val_end: usize,
    pub test_end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitScheme {
    /// 70% / 10% / 20% by sequence length.
    Ratio712,
    /// 8 / 4 / 4 months of 30 days each, as used by the common ETT loaders.
    EttMonths { steps_per_hour: usize },
    Custom { train_frac: f64, val_frac: f64 },
}

/// Days per month in the ETT month-wise convention.
pub const ETT_DAYS_PER_MONTH: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug)]
pub struct TimeSeriesDataset {
    pub name: String,
    /// `[T_total, V]` raw values.
    pub values: Tensor,
    pub splits: Option<SplitBoundaries>,
    pub norm_stats: Option<NormStats>,
    pub warnings: Vec<String>,
}

impl TimeSeriesDataset {
    pub fn new(name: impl Into<String>, values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::dim("dataset", values.shape(), &[0, 0]));
        }
        Ok(Self {
            name: name.into(),
            values,
            splits: None,
            norm_stats: None,
            warnings: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn split_range(&self, split: Split) -> Result<std::ops::Range<usize>> {
        let b = self
            .splits
            .ok_or_else(|| Error::config(format!("dataset {} has not been split", self.name)))?;
        Ok(match split {
            Split::Train => 0..b.train_end,
            Split::Val => b.train_end..b.val_end,
            Split::Test => b.val_end..b.test_end,
        })
    }
}

/// Reads a comma-separated file. A first row with any non-numeric cell is
/// treated as a header; with `has_time_column` the first column is skipped.
pub fn load_csv(path: impl AsRef<Path>, has_time_column: bool) -> Result<TimeSeriesDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let skip = usize::from(has_time_column);

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(format!("csv: {e}")))?;
        let line = i + 1;
        let cells: Vec<&str> = rec.iter().skip(skip).collect();
        if i == 0 && cells.iter().any(|c| c.parse::<f64>().is_err()) {
            width = Some(cells.len());
            continue;
        }
        match width {
            Some(w) if w != cells.len() => {
                return Err(Error::format(format!(
                    "row {line} has {} value columns, expected {w}",
                    cells.len()
                )))
            }
            _ => width = Some(cells.len()),
        }
        let mut row = Vec::with_capacity(cells.len());
        for (j, c) in cells.iter().enumerate() {
            let v = c.parse::<f64>().map_err(|_| Error::Parse {
                row: line,
                column: j + 1 + skip,
                message: format!("not a number: {c:?}"),
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    if rows.len() < 2 {
        return Err(Error::format(format!(
            "{} has {} data rows; at least 2 are required",
            path.display(),
            rows.len()
        )));
    }
    if rows[0].is_empty() {
        return Err(Error::format("no value columns"));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    TimeSeriesDataset::new(name, Tensor::from_rows(&rows)?)
}

/// Assigns split boundaries and computes train-only standardization stats.
pub fn split_chronological(mut ds: TimeSeriesDataset, scheme: SplitScheme) -> Result<TimeSeriesDataset> {
    let total = ds.len();
    let b = match scheme {
        SplitScheme::Ratio712 => SplitBoundaries {
            train_end: (total as f64 * 0.7).floor() as usize,
            val_end: (total as f64 * 0.8).floor() as usize,
            test_end: total,
        },
        SplitScheme::Custom {
            train_frac,
            val_frac,
        } => {
            if !(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0) {
                return Err(Error::config(format!(
                    "split fractions ({train_frac}, {val_frac}) must be positive and sum below 1"
                )));
            }
            SplitBoundaries {
                train_end: (total as f64 * train_frac).floor() as usize,
                val_end: (total as f64 * (train_frac + val_frac)).floor() as usize,
                test_end: total,
            }
        }
        SplitScheme::EttMonths { steps_per_hour } => {
            if steps_per_hour == 0 {
                return Err(Error::config("ETT split needs a sampling interval"));
            }
            let month = ETT_DAYS_PER_MONTH * 24 * steps_per_hour;
            let b = SplitBoundaries {
                train_end: 8 * month,
                val_end: 12 * month,
                test_end: 16 * month,
            };
            if b.test_end > total {
                return Err(Error::config(format!(
                    "month-wise split needs {} rows, dataset has {total}",
                    b.test_end
                )));
            }
            b
        }
    };
    if b.train_end == 0 {
        return Err(Error::config("train split is empty"));
    }
    if b.val_end <= b.train_end {
        return Err(Error::config("validation split is empty"));
    }
    if b.test_end <= b.val_end {
        return Err(Error::config("test split is empty"));
    }

    let v = ds.channels();
    let data = ds.values.data();
    let n = b.train_end as f64;
    let mut mean = vec![0.0; v];
    for row in data[..b.train_end * v].chunks(v) {
        for (c, x) in row.iter().enumerate() {
            mean[c] += x;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; v];
    for row in data[..b.train_end * v].chunks(v) {
        for (c, x) in row.iter().enumerate() {
            var[c] += (x - mean[c]) * (x - mean[c]);
        }
    }
    let mut std = Vec::with_capacity(v);
    for (c, s) in var.iter().enumerate() {
        let sd = (s / n).sqrt();
        if sd > 1e-12 && sd.is_finite() {
            std.push(sd);
        } else {
            ds.warnings
                .push(format!("channel {c} is constant on the train split; std clamped to 1"));
            std.push(1.0);
        }
    }
    ds.splits = Some(b);
    ds.norm_stats = Some(NormStats { mean, std });
    Ok(ds)
}

/// Standardized sliding windows cut from one split.
#[derive(Clone, Debug)]
pub struct WindowSet {
    /// `[N, T_in, V]`
    pub inputs: Tensor,
    /// `[N, T_out, V]`
    pub targets: Tensor,
    /// Dataset row where each window's input starts.
    pub origins: Vec<usize>,
    pub norm: NormStats,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn t_in(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn t_out(&self) -> usize {
        self.targets.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.inputs.shape()[2]
    }

    /// Windows at the given positions, in the given order.
    pub fn select(&self, idx: &[usize]) -> WindowSet {
        let (ti, to, v) = (self.t_in(), self.t_out(), self.channels());
        let mut xin = Vec::with_capacity(idx.len() * ti * v);
        let mut xout = Vec::with_capacity(idx.len() * to * v);
        for &i in idx {
            xin.extend_from_slice(&self.inputs.data()[i * ti * v..(i + 1) * ti * v]);
            xout.extend_from_slice(&self.targets.data()[i * to * v..(i + 1) * to * v]);
        }
        WindowSet {
            inputs: Tensor::new(vec![idx.len(), ti, v], xin).expect("window shape"),
            targets: Tensor::new(vec![idx.len(), to, v], xout).expect("window shape"),
            origins: idx.iter().map(|&i| self.origins[i]).collect(),
            norm: self.norm.clone(),
        }
    }

    /// Consecutive batches of at most `batch` windows.
    pub fn batches(&self, batch: usize) -> Vec<WindowSet> {
        let batch = batch.max(1);
        (0..self.len())
            .step_by(batch)
            .map(|s| self.select(&(s..(s + batch).min(self.len())).collect::<Vec<_>>()))
            .collect()
    }
}

pub fn make_windows(
    ds: &TimeSeriesDataset,
    split: Split,
    t_in: usize,
    t_out: usize,
    window_stride: usize,
) -> Result<WindowSet> {
    if t_in == 0 || t_out == 0 || window_stride == 0 {
        return Err(Error::config("t_in, t_out and window stride must be positive"));
    }
    let range = ds.split_range(split)?;
    let norm = ds
        .norm_stats
        .clone()
        .ok_or_else(|| Error::config("dataset has no normalization statistics"))?;
    let span = t_in + t_out;
    let len = range.end - range.start;
    if span > len {
        return Err(Error::config(format!(
            "{split:?} split has {len} rows but a window needs t_in + t_out = {span}"
        )));
    }
    let count = (len - span) / window_stride + 1;
    let v = ds.channels();
    let data = ds.values.data();
    let mut xin = Vec::with_capacity(count * t_in * v);
    let mut xout = Vec::with_capacity(count * t_out * v);
    let mut origins = Vec::with_capacity(count);
    for i in 0..count {
        let s = range.start + i * window_stride;
        origins.push(s);
        xin.extend_from_slice(&data[s * v..(s + t_in) * v]);
        xout.extend_from_slice(&data[(s + t_in) * v..(s + span) * v]);
    }
    norm.standardize(&mut xin);
    norm.standardize(&mut xout);
    Ok(WindowSet {
        inputs: Tensor::new(vec![count, t_in, v], xin)?,
        targets: Tensor::new(vec![count, t_out, v], xout)?,
        origins,
        norm,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    SineMixture,
    TrendPlusSeason,
    ArNoise,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::SineMixture => "sine_mixture",
            SynthKind::TrendPlusSeason => "trend_plus_season",
            SynthKind::ArNoise => "ar_noise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sine_mixture" => Ok(SynthKind::SineMixture),
            "trend_plus_season" => Ok(SynthKind::TrendPlusSeason),
            "ar_noise" => Ok(SynthKind::ArNoise),
            other => Err(Error::config(format!("unknown synthetic kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub channels: usize,
    pub length: usize,
    pub seed: u64,
    /// Standard deviation of the additive Gaussian noise (the innovation
    /// scale for `ar_noise`).
    pub noise_std: f64,
}

pub const MIN_SYNTH_LENGTH: usize = 512;

/// Deterministic synthetic series for a given seed.
pub fn synth_generate(spec: &SynthSpec) -> Result<TimeSeriesDataset> {
    if spec.length < MIN_SYNTH_LENGTH {
        return Err(Error::config(format!(
            "synthetic length must be at least {MIN_SYNTH_LENGTH}"
        )));
    }
    if spec.channels == 0 {
        return Err(Error::config("synthetic series needs at least one channel"));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::config("noise std must be finite and non-negative"));
    }
    let streams = SeedStream::new(spec.seed);
    let mut shape_rng = streams.rng("synth-shape");
    let mut noise_rng = streams.rng("synth-noise");
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid normal");
    let (t, v) = (spec.length, spec.channels);
    let mut data = vec![0.0; t * v];

    for c in 0..v {
        match spec.kind {
            SynthKind::SineMixture => {
                let comps = shape_rng.random_range(2..=4);
                let mut terms = Vec::with_capacity(comps);
                for _ in 0..comps {
                    // Periods drawn from a continuous range are incommensurate
                    // with probability one.
                    let period: f64 = shape_rng.random_range(6.0..60.0);
                    let amp: f64 = shape_rng.random_range(0.5..1.5);
                    let phase: f64 = shape_rng.random_range(0.0..2.0 * PI);
                    terms.push((period, amp, phase));
                }
                for i in 0..t {
                    let x: f64 = terms
                        .iter()
                        .map(|(p, a, ph)| a * (2.0 * PI * i as f64 / p + ph).sin())
                        .sum();
                    data[i * v + c] = x;
                }
            }
            SynthKind::TrendPlusSeason => {
                let slope: f64 = shape_rng.random_range(-2.0..2.0);
                let period: f64 = shape_rng.random_range(12.0..48.0);
                let amp: f64 = shape_rng.random_range(0.5..2.0);
                let phase: f64 = shape_rng.random_range(0.0..2.0 * PI);
                for i in 0..t {
                    let tt = i as f64;
                    data[i * v + c] =
                        slope * tt / t as f64 + amp * (2.0 * PI * tt / period + phase).sin();
                }
            }
            SynthKind::ArNoise => {
                let phi1: f64 = shape_rng.random_range(0.3..0.7);
                let phi2: f64 = shape_rng.random_range(-0.3..0.1);
                let (mut x1, mut x2) = (0.0, 0.0);
                for i in 0..t {
                    let e = if spec.noise_std > 0.0 {
                        noise.sample(&mut noise_rng)
                    } else {
                        0.0
                    };
                    let x = phi1 * x1 + phi2 * x2 + e;
                    data[i * v + c] = x;
                    x2 = x1;
                    x1 = x;
                }
                continue;
            }
        }
        if spec.noise_std > 0.0 {
            for i in 0..t {
                data[i * v + c] += noise.sample(&mut noise_rng);
            }
        }
    }
    TimeSeriesDataset::new(
        format!("synth-{}", spec.kind.name()),
        Tensor::new(vec![t, v], data)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn ramp(t: usize, v: usize) -> TimeSeriesDataset {
        let data = (0..t * v).map(|i| (i / v) as f64 + (i % v) as f64 * 100.0).collect();
        TimeSeriesDataset::new("ramp", Tensor::new(vec![t, v], data).unwrap()).unwrap()
    }

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn csv_read_back() {
        let f = write_tmp("a,b\n1,2\n3,4\n5,6\n");
        let ds = load_csv(f.path(), false).unwrap();
        assert_eq!(ds.values.shape(), &[3, 2]);
        assert_eq!(ds.values.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn csv_time_column_and_no_header() {
        let f = write_tmp("2016-07-01 00:00:00,1,2\n2016-07-01 01:00:00,3,4\n");
        let ds = load_csv(f.path(), true).unwrap();
        assert_eq!(ds.values.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn csv_errors() {
        let f = write_tmp("a,b\n");
        assert!(matches!(load_csv(f.path(), false), Err(Error::Format { .. })));

        let f = write_tmp("1,2\n3,x\n");
        match load_csv(f.path(), false) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (2, 2)),
            other => panic!("{other:?}"),
        }

        let f = write_tmp("1,2\n3\n");
        assert!(matches!(load_csv(f.path(), false), Err(Error::Format { .. })));
    }

    #[test]
    fn ratio_split_boundaries() {
        let ds = split_chronological(ramp(100, 1), SplitScheme::Ratio712).unwrap();
        let b = ds.splits.unwrap();
        assert_eq!((b.train_end, b.val_end, b.test_end), (70, 80, 100));
    }

    #[test]
    fn degenerate_custom_split() {
        let err = split_chronological(
            ramp(10, 1),
            SplitScheme::Custom {
                train_frac: 0.9,
                val_frac: 0.09,
            },
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn ett_month_split_hourly() {
        // Reference loaders: 30-day months, hourly rows.
        let ds = split_chronological(ramp(17_420, 1), SplitScheme::EttMonths { steps_per_hour: 1 }).unwrap();
        let b = ds.splits.unwrap();
        assert_eq!(b.train_end, 8 * 30 * 24);
        assert_eq!(b.train_end, 5_760);
        assert_eq!(b.val_end, 12 * 30 * 24);
        assert_eq!(b.test_end, 16 * 30 * 24);

        let ds = split_chronological(ramp(69_680, 1), SplitScheme::EttMonths { steps_per_hour: 4 }).unwrap();
        assert_eq!(ds.splits.unwrap().train_end, 23_040);

        assert!(split_chronological(ramp(1000, 1), SplitScheme::EttMonths { steps_per_hour: 1 }).is_err());
    }

    #[test]
    fn constant_channel_clamped() {
        let data = vec![3.0; 200];
        let ds = TimeSeriesDataset::new("c", Tensor::new(vec![100, 2], data).unwrap()).unwrap();
        let ds = split_chronological(ds, SplitScheme::Ratio712).unwrap();
        assert_eq!(ds.norm_stats.as_ref().unwrap().std, vec![1.0, 1.0]);
        assert_eq!(ds.warnings.len(), 2);
    }

    #[test]
    fn window_counts() {
        let ds = split_chronological(
            ramp(50, 1),
            SplitScheme::Custom {
                train_frac: 0.2,
                val_frac: 0.4,
            },
        )
        .unwrap();
        // train split has 10 rows
        let w = make_windows(&ds, Split::Train, 4, 2, 1).unwrap();
        assert_eq!(w.len(), 5);
        assert_eq!(w.origins, vec![0, 1, 2, 3, 4]);

        let w = make_windows(&ds, Split::Train, 4, 2, 10).unwrap();
        assert_eq!(w.len(), 1);
        let w = make_windows(&ds, Split::Train, 4, 6, 10).unwrap();
        assert_eq!(w.len(), 1);
        assert!(make_windows(&ds, Split::Train, 5, 6, 10).is_err());
    }

    #[test]
    fn long_window_on_short_split() {
        let ds = split_chronological(
            ramp(1000, 1),
            SplitScheme::Custom {
                train_frac: 0.4,
                val_frac: 0.3,
            },
        )
        .unwrap();
        let err = make_windows(&ds, Split::Train, 336, 96, 1).unwrap_err();
        assert!(err.to_string().contains("432"));
    }

    #[test]
    fn windows_never_cross_boundaries() {
        let ds = split_chronological(ramp(120, 2), SplitScheme::Ratio712).unwrap();
        for split in [Split::Train, Split::Val, Split::Test] {
            let r = ds.split_range(split).unwrap();
            let w = make_windows(&ds, split, 6, 3, 1).unwrap();
            for &o in &w.origins {
                assert!(o >= r.start && o + 9 <= r.end);
            }
            assert_eq!(w.len(), (r.end - r.start - 9) + 1);
        }
    }

    #[test]
    fn stats_ignore_val_and_test_rows() {
        let a = split_chronological(ramp(100, 2), SplitScheme::Ratio712).unwrap();
        let mut vals = ramp(100, 2).values;
        for x in &mut vals.data_mut()[150..] {
            *x = -1e6;
        }
        let b = split_chronological(TimeSeriesDataset::new("m", vals).unwrap(), SplitScheme::Ratio712).unwrap();
        assert_eq!(a.norm_stats, b.norm_stats);
    }

    #[test]
    fn window_roundtrip_destandardizes() {
        let ds = split_chronological(ramp(100, 3), SplitScheme::Ratio712).unwrap();
        let w = make_windows(&ds, Split::Val, 4, 2, 1).unwrap();
        let mut x = w.inputs.data().to_vec();
        w.norm.destandardize(&mut x);
        let raw = ds.values.data();
        let s = w.origins[2];
        for (k, v) in x[2 * 12..3 * 12].iter().enumerate() {
            assert!((v - raw[s * 3 + k]).abs() < 1e-9);
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let spec = SynthSpec {
            kind: SynthKind::SineMixture,
            channels: 3,
            length: 600,
            seed: 11,
            noise_std: 0.1,
        };
        let a = synth_generate(&spec).unwrap();
        let b = synth_generate(&spec).unwrap();
        assert_eq!(a.values, b.values);
        assert_eq!(a.channels(), 3);
        let c = synth_generate(&SynthSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(a.values, c.values);
        for kind in [SynthKind::TrendPlusSeason, SynthKind::ArNoise] {
            let d = synth_generate(&SynthSpec { kind, ..spec }).unwrap();
            assert!(d.values.all_finite());
        }
        assert!(synth_generate(&SynthSpec { length: 100, ..spec }).is_err());
    }
}
