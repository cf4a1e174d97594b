use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use dscope::checkpoint;
use dscope::config::RunConfig;
use dscope::dump::TraceDump;
use dscope::metrics::evaluate;
use dscope::model::ForecastModel;
use dscope::pipeline::{self, PruneOptions};
use dscope::pruning::{measure_speedup, ImportanceReport};
use dscope::training::history_jsonl;

const THREADS_VAR: &str = "DSCOPE_THREADS";

/// `(dotted.key, value)` pairs taken from the command line.
type Overrides = Vec<(String, String)>;

/// Critical-layer analysis and depth pruning for patch forecasters.
///
/// Any configuration key can be overridden as `--section.key value`
/// (or `--seed N`, `--out_dir DIR`) anywhere on the command line.
#[derive(Parser, Debug)]
#[command(name = "dscope", version)]
struct Cli {
    /// Configuration file with `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a fresh model; writes model.ckpt and history.jsonl.
    Train,
    /// Score layers of a checkpoint (or an external trace dump).
    Analyze {
        #[arg(long, conflicts_with = "dump")]
        checkpoint: Option<PathBuf>,
        /// Analyze an LTRC trace dump instead of running a model.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Prune to the critical layers, fine-tune and compare.
    Prune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Importance report to plan from; computed when absent.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        no_finetune: bool,
        /// Also build and evaluate a random plan of the same size.
        #[arg(long)]
        random_baseline: bool,
        /// Keep every layer (sanity baseline).
        #[arg(long)]
        retain_all: bool,
        /// Skip the inference timing sidecar.
        #[arg(long)]
        no_timing: bool,
    },
    /// Test-split metrics and predictions.csv.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Forecasts obtained by sending hidden states straight to the head.
    Project {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated hidden-state indices (0 = embedding) or "all".
        #[arg(long, default_value = "all")]
        layers: String,
    },
    /// Export validation activations as an LTRC trace dump.
    Dump {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Error wrapper that fixes the exit status.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn is_override(name: &str) -> bool {
    name.contains('.') || name == "seed" || name == "out_dir"
}

/// Splits `--a.b value` / `--a.b=value` pairs out of the raw arguments.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::new();
    let mut pairs = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !is_override(&name) {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| Usage(format!("--{name} needs a value")))?,
        };
        pairs.push((name, value));
    }
    Ok((rest, pairs))
}

fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut pairs = Vec::new();
    if let Some(p) = path {
        let text = fs::read_to_string(p).map_err(|e| Usage(format!("cannot read config {}: {e}", p.display())))?;
        pairs = RunConfig::parse_text(&text)?;
    }
    pairs.extend(overrides.iter().cloned());
    cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Usage(format!("{THREADS_VAR} must be a positive integer, got {v:?}")).into()),
        },
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Timestamps and timings go here so the main outputs stay reproducible.
fn write_meta(cfg: &RunConfig, name: &str, started: Instant, extra: serde_json::Value) -> Result<()> {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = json!({
        "command": name,
        "finished_unix": now,
        "elapsed_s": started.elapsed().as_secs_f64(),
        "details": extra,
    });
    write(
        &cfg.out_dir.join(format!("{name}.meta.json")),
        serde_json::to_string_pretty(&meta)? + "\n",
    )
}

fn load_model(cfg: &RunConfig, path: Option<&PathBuf>) -> Result<ForecastModel> {
    let path = path.cloned().unwrap_or_else(|| cfg.out_dir.join("model.ckpt"));
    if !path.is_file() {
        return Err(Usage(format!("checkpoint not found: {}", path.display())).into());
    }
    let model = checkpoint::load(&path)?;
    if model.config.t_in != cfg.model.t_in || model.config.t_out != cfg.model.t_out {
        return Err(Usage(format!(
            "checkpoint is {}->{} but the config windows are {}->{}",
            model.config.t_in, model.config.t_out, cfg.model.t_in, cfg.model.t_out
        ))
        .into());
    }
    Ok(model)
}

fn report_csv(report: &ImportanceReport) -> String {
    let mut s = String::from("layer_id,dist,sim_prev,head_sim,redundancy,entropy,score,gated,exempt\n");
    for l in &report.per_layer {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            l.layer_id, l.dist, l.sim_prev, l.head_sim, l.redundancy, l.entropy, l.score, l.gated, l.exempt
        ));
    }
    s
}

fn parse_layers(spec: &str, states: usize) -> Result<Vec<usize>> {
    if spec == "all" {
        return Ok((0..states).collect());
    }
    let mut out = Vec::new();
    for part in spec.split(',') {
        let v: usize = part
            .trim()
            .parse()
            .map_err(|_| Usage(format!("invalid layer index {part:?}")))?;
        if v >= states {
            return Err(Usage(format!("layer {v} out of range: the model has states 0..={}", states - 1)).into());
        }
        out.push(v);
    }
    Ok(out)
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), overrides)?;
    if let Some(n) = thread_cap()? {
        log::info!("{THREADS_VAR}={n}; all stages run on the calling thread");
    }
    let started = Instant::now();
    let out = &cfg.out_dir;
    match cli.command {
        Command::Train => {
            let data = pipeline::prepare(&cfg)?;
            let outcome = pipeline::train_model(&cfg, &data)?;
            write(&out.join("history.jsonl"), history_jsonl(&outcome.history))?;
            write(&out.join("config.txt"), cfg.to_text())?;
            checkpoint::save(&outcome.model, out.join("model.ckpt"))?;
            write_meta(&cfg, "train", started, json!({ "stop": outcome.stop, "best_val_mse": outcome.best_val_mse }))?;
            if outcome.stop == dscope::training::StopReason::Diverged {
                bail!(dscope::Error::numeric("training diverged; best parameters were saved"));
            }
            println!("trained {} epochs, best val mse {:.6}", outcome.history.len(), outcome.best_val_mse);
        }
        Command::Analyze { checkpoint, dump } => {
            let report = match dump {
                Some(path) => {
                    let d = TraceDump::load(&path)?;
                    pipeline::analyze_trace(&d.to_trace(), &cfg)?
                }
                None => {
                    let model = load_model(&cfg, checkpoint.as_ref())?;
                    let data = pipeline::prepare(&cfg)?;
                    pipeline::analyze_model(&model, &cfg, &data.val)?
                }
            };
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            write(&out.join("importance.json"), report.to_json() + "\n")?;
            write(&out.join("importance.csv"), report_csv(&report))?;
            println!("ranking {:?}", report.ranking);
        }
        Command::Prune {
            checkpoint,
            report,
            no_finetune,
            random_baseline,
            retain_all,
            no_timing,
        } => {
            let model = load_model(&cfg, checkpoint.as_ref())?;
            let data = pipeline::prepare(&cfg)?;
            let report: ImportanceReport = match report {
                Some(p) => serde_json::from_str(
                    &fs::read_to_string(&p).map_err(|e| Usage(format!("cannot read report {}: {e}", p.display())))?,
                )
                .map_err(|e| Usage(format!("invalid report {}: {e}", p.display())))?,
                None => pipeline::analyze_model(&model, &cfg, &data.val)?,
            };
            let opts = PruneOptions {
                finetune: !no_finetune,
                random_baseline,
                retain_all,
            };
            let run = pipeline::prune_and_compare(&model, &report, &cfg, &data, opts)?;
            checkpoint::save(&run.pruned, out.join("pruned.ckpt"))?;
            write(&out.join("plan.json"), run.plan.to_json() + "\n")?;
            write(&out.join("finetune_history.jsonl"), history_jsonl(&run.history))?;
            write(
                &out.join("comparison.json"),
                serde_json::to_string_pretty(&run.comparison)? + "\n",
            )?;
            let timing = if no_timing {
                serde_json::Value::Null
            } else {
                match measure_speedup(&model, &run.pruned, &data.val, cfg.speed_runs, cfg.speed_warmup) {
                    Ok(s) => {
                        println!("efficiency ratio {:.2}", s.ratio);
                        serde_json::to_value(s)?
                    }
                    // too small to time reliably; the pruning itself still stands
                    Err(e) => {
                        eprintln!("warning: timing skipped: {e}");
                        json!({ "error": e.to_string() })
                    }
                }
            };
            write_meta(&cfg, "prune", started, json!({ "speedup": timing }))?;
            let c = &run.comparison;
            println!(
                "retained {:?}: mse {:.6} -> {:.6}, parameters {:.1}%",
                c.retained,
                c.original.mse,
                c.pruned.mse,
                100.0 * c.parameters.ratio
            );
        }
        Command::Eval { checkpoint } => {
            let model = load_model(&cfg, checkpoint.as_ref())?;
            let data = pipeline::prepare(&cfg)?;
            let result = evaluate(&model, &data.test, cfg.scale)?;
            write(&out.join("eval.json"), serde_json::to_string_pretty(&result)? + "\n")?;
            write(&out.join("predictions.csv"), pipeline::predictions_csv(&model, &data.test)?)?;
            println!("mae {:.6} mse {:.6}", result.mae, result.mse);
        }
        Command::Project { checkpoint, layers } => {
            let model = load_model(&cfg, checkpoint.as_ref())?;
            let states = parse_layers(&layers, model.num_blocks() + 1)?;
            let data = pipeline::prepare(&cfg)?;
            let preds = pipeline::project_states(&model, &data.test, &states)?;
            for (s, p) in states.iter().zip(&preds) {
                write(
                    &out.join("project").join(format!("state_{s}.csv")),
                    pipeline::forecast_csv(&data.test, p),
                )?;
            }
            println!("wrote {} projections", states.len());
        }
        Command::Dump { checkpoint, output } => {
            let model = load_model(&cfg, checkpoint.as_ref())?;
            let data = pipeline::prepare(&cfg)?;
            let trace = pipeline::capture_trace(&model, &cfg, &data.val)?;
            let path = output.unwrap_or_else(|| out.join("trace.ltrc"));
            let dump = TraceDump::from_trace(&trace)?;
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir)?;
            }
            dump.save(&path)?;
            println!("wrote {} samples to {}", dump.header.batch, path.display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match err.downcast_ref::<dscope::Error>() {
        Some(e) if e.is_usage() => 2,
        Some(_) => 1,
        // io failures while writing outputs
        None => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().collect();
    let (rest, overrides) = match split_overrides(args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(rest) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
