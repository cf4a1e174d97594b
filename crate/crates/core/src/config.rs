//! Run configuration as flat `dotted.key = value` text.
//!
//! ```text
//! # comments start with '#'
//! seed = 7
//! [model]          # optional section header; prefixes following keys
//! layers = 8
//! train.lr = 1e-4  # a dotted key inside a section is taken as written
//! ```
//!
//! Every key can also be set from the command line as `--key value`.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::Serialize;

use crate::analysis::ImportanceConfig;
use crate::data::{SplitScheme, SynthKind, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::Scale;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum DataSource {
    Synth(SynthSpec),
    Csv { path: PathBuf, time_column: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSource,
    pub split: SplitScheme,
    pub window_stride: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub importance: ImportanceConfig,
    /// Samples per capture batch during analysis.
    pub analysis_batch_size: usize,
    pub batch_limit: usize,
    pub scale: Scale,
    pub speed_runs: usize,
    pub speed_warmup: usize,
}

impl Default for RunConfig {
    /// Reference synthetic setup.
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataSource::Synth(SynthSpec {
                kind: SynthKind::SineMixture,
                channels: 1,
                length: 2000,
                seed: 0,
                noise_std: 0.1,
            }),
            split: SplitScheme::Custom {
                train_frac: 0.6,
                val_frac: 0.2,
            },
            window_stride: 1,
            model: ModelConfig::reference_synthetic(),
            train: TrainConfig::default(),
            importance: ImportanceConfig::family(),
            analysis_batch_size: 32,
            batch_limit: 8,
            scale: Scale::Standardized,
            speed_runs: 30,
            speed_warmup: 5,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    fn synth_mut(&mut self, key: &str) -> Result<&mut SynthSpec> {
        match &mut self.data {
            DataSource::Synth(s) => Ok(s),
            DataSource::Csv { .. } => Err(Error::config(format!("{key} needs data.source = synth"))),
        }
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => {
                let s: u64 = parse(key, v)?;
                self.seed = s;
                self.model.seed = s;
                self.train.seed = s;
                if let DataSource::Synth(spec) = &mut self.data {
                    spec.seed = s;
                }
            }
            "out_dir" => self.out_dir = PathBuf::from(v),
            "data.source" => match v {
                "synth" => {
                    if !matches!(self.data, DataSource::Synth(_)) {
                        self.data = RunConfig::default().data;
                        self.set("seed", &self.seed.to_string())?;
                    }
                }
                "csv" => {
                    if !matches!(self.data, DataSource::Csv { .. }) {
                        self.data = DataSource::Csv {
                            path: PathBuf::new(),
                            time_column: true,
                        };
                    }
                }
                _ => return Err(Error::config(format!("data.source must be synth or csv, got {v:?}"))),
            },
            "data.path" => match &mut self.data {
                DataSource::Csv { path, .. } => *path = PathBuf::from(v),
                DataSource::Synth(_) => return Err(Error::config("data.path needs data.source = csv")),
            },
            "data.time_column" => match &mut self.data {
                DataSource::Csv { time_column, .. } => *time_column = parse_bool(key, v)?,
                DataSource::Synth(_) => return Err(Error::config("data.time_column needs data.source = csv")),
            },
            "data.split" => {
                self.split = match v {
                    "ratio_7_1_2" => SplitScheme::Ratio712,
                    "ett_8_4_4_months" => SplitScheme::EttMonths { steps_per_hour: 1 },
                    "custom" => SplitScheme::Custom {
                        train_frac: 0.6,
                        val_frac: 0.2,
                    },
                    _ => {
                        return Err(Error::config(format!(
                            "data.split must be ratio_7_1_2, ett_8_4_4_months or custom, got {v:?}"
                        )))
                    }
                }
            }
            "data.steps_per_hour" => match &mut self.split {
                SplitScheme::EttMonths { steps_per_hour } => *steps_per_hour = parse(key, v)?,
                _ => return Err(Error::config("data.steps_per_hour needs data.split = ett_8_4_4_months")),
            },
            "data.train_frac" | "data.val_frac" => match &mut self.split {
                SplitScheme::Custom { train_frac, val_frac } => {
                    let f = parse(key, v)?;
                    if key == "data.train_frac" {
                        *train_frac = f;
                    } else {
                        *val_frac = f;
                    }
                }
                _ => return Err(Error::config(format!("{key} needs data.split = custom"))),
            },
            "data.window_stride" => self.window_stride = parse(key, v)?,
            "synth.kind" => self.synth_mut(key)?.kind = SynthKind::parse(v)?,
            "synth.channels" => self.synth_mut(key)?.channels = parse(key, v)?,
            "synth.length" => self.synth_mut(key)?.length = parse(key, v)?,
            "synth.noise_std" => self.synth_mut(key)?.noise_std = parse(key, v)?,
            "model.layers" => self.model.layers = parse(key, v)?,
            "model.d_model" => self.model.d_model = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.patch_size" => self.model.patch_size = parse(key, v)?,
            "model.stride" => self.model.stride = parse(key, v)?,
            "model.t_in" => self.model.t_in = parse(key, v)?,
            "model.t_out" => self.model.t_out = parse(key, v)?,
            "model.mlp_ratio" => self.model.mlp_ratio = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.eps" => self.train.eps = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.max_epochs" => self.train.max_epochs = parse(key, v)?,
            "train.patience" => self.train.patience = parse(key, v)?,
            "train.grad_clip" => self.train.grad_clip = parse(key, v)?,
            "train.lr_floor" => self.train.lr_floor = parse(key, v)?,
            "importance.preset" => self.importance = ImportanceConfig::preset(v)?,
            "importance.decay_factor" => self.importance.decay_factor = parse(key, v)?,
            "importance.preceding_layers" => self.importance.preceding_layers = parse(key, v)?,
            "importance.tau_pct" => self.importance.tau_pct = parse(key, v)?,
            "importance.top_pct" => self.importance.top_pct = parse(key, v)?,
            "importance.cum_pct" => self.importance.cum_pct = parse(key, v)?,
            "importance.batch_size" => self.analysis_batch_size = parse(key, v)?,
            "importance.batch_limit" => self.batch_limit = parse(key, v)?,
            "eval.scale" => self.scale = Scale::parse(v)?,
            "speed.runs" => self.speed_runs = parse(key, v)?,
            "speed.warmup" => self.speed_warmup = parse(key, v)?,
            _ => return Err(Error::config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `(key, value)` pairs. Selector keys (`data.source`,
    /// `data.split`, `importance.preset`, `seed`) go first so the keys they
    /// enable can follow in any order.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        const FIRST: [&str; 4] = ["data.source", "data.split", "importance.preset", "seed"];
        let pairs: Vec<_> = pairs.into_iter().collect();
        for stage in 0..2 {
            for (k, v) in &pairs {
                if FIRST.contains(k) == (stage == 0) {
                    self.set(k, v)?;
                }
            }
        }
        Ok(())
    }

    /// Parses config text into `(key, value)` pairs.
    pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
        let mut section = String::new();
        let mut out = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            let key = if section.is_empty() || k.contains('.') {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            out.push((key, v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let pairs = Self::parse_text(text)?;
        cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.importance.validate()?;
        if self.window_stride == 0 || self.analysis_batch_size == 0 || self.batch_limit == 0 {
            return Err(Error::config("window stride and analysis batch settings must be positive"));
        }
        if let DataSource::Csv { path, .. } = &self.data {
            if path.as_os_str().is_empty() {
                return Err(Error::config("data.path is required for csv data"));
            }
        }
        Ok(())
    }

    /// Fully resolved configuration in the text format; parsing it back
    /// yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("out_dir", self.out_dir.display().to_string());
        match &self.data {
            DataSource::Synth(spec) => {
                kv("data.source", "synth".into());
                kv("synth.kind", spec.kind.name().into());
                kv("synth.channels", spec.channels.to_string());
                kv("synth.length", spec.length.to_string());
                kv("synth.noise_std", spec.noise_std.to_string());
            }
            DataSource::Csv { path, time_column } => {
                kv("data.source", "csv".into());
                kv("data.path", path.display().to_string());
                kv("data.time_column", time_column.to_string());
            }
        }
        match self.split {
            SplitScheme::Ratio712 => kv("data.split", "ratio_7_1_2".into()),
            SplitScheme::EttMonths { steps_per_hour } => {
                kv("data.split", "ett_8_4_4_months".into());
                kv("data.steps_per_hour", steps_per_hour.to_string());
            }
            SplitScheme::Custom { train_frac, val_frac } => {
                kv("data.split", "custom".into());
                kv("data.train_frac", train_frac.to_string());
                kv("data.val_frac", val_frac.to_string());
            }
        }
        kv("data.window_stride", self.window_stride.to_string());
        let m = &self.model;
        kv("model.layers", m.layers.to_string());
        kv("model.d_model", m.d_model.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.patch_size", m.patch_size.to_string());
        kv("model.stride", m.stride.to_string());
        kv("model.t_in", m.t_in.to_string());
        kv("model.t_out", m.t_out.to_string());
        kv("model.mlp_ratio", m.mlp_ratio.to_string());
        let t = &self.train;
        kv("train.lr", t.lr.to_string());
        kv("train.beta1", t.beta1.to_string());
        kv("train.beta2", t.beta2.to_string());
        kv("train.eps", t.eps.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.max_epochs", t.max_epochs.to_string());
        kv("train.patience", t.patience.to_string());
        kv("train.grad_clip", t.grad_clip.to_string());
        kv("train.lr_floor", t.lr_floor.to_string());
        let i = &self.importance;
        kv("importance.decay_factor", i.decay_factor.to_string());
        kv("importance.preceding_layers", i.preceding_layers.to_string());
        kv("importance.tau_pct", i.tau_pct.to_string());
        kv("importance.top_pct", i.top_pct.to_string());
        kv("importance.cum_pct", i.cum_pct.to_string());
        kv("importance.batch_size", self.analysis_batch_size.to_string());
        kv("importance.batch_limit", self.batch_limit.to_string());
        kv(
            "eval.scale",
            match self.scale {
                Scale::Standardized => "standardized".into(),
                Scale::Raw => "raw".into(),
            },
        );
        kv("speed.runs", self.speed_runs.to_string());
        kv("speed.warmup", self.speed_warmup.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_overrides() {
        let cfg = RunConfig::from_text(
            "seed = 3\n[model]\nlayers = 4 # shallow\n[train]\nlr = 0.001\nimportance.preset = external\n",
        )
        .unwrap();
        assert_eq!(cfg.model.layers, 4);
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.importance.cum_pct, 90.0);
        assert_eq!((cfg.model.seed, cfg.train.seed), (3, 3));
    }

    #[test]
    fn preset_applies_before_explicit_values() {
        let mut cfg = RunConfig::default();
        cfg.apply([("importance.cum_pct", "70"), ("importance.preset", "external")])
            .unwrap();
        assert_eq!(cfg.importance.cum_pct, 70.0);
    }

    #[test]
    fn unknown_key_and_bad_value() {
        assert!(RunConfig::from_text("model.depth = 3").is_err());
        assert!(RunConfig::from_text("model.layers = three").is_err());
        assert!(RunConfig::from_text("just text").is_err());
    }

    #[test]
    fn text_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.apply([("data.source", "csv"), ("data.path", "x.csv"), ("data.split", "ett_8_4_4_months"), ("seed", "9")])
            .unwrap();
        assert_eq!(RunConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_text(&d.to_text()).unwrap(), d);
    }
}
