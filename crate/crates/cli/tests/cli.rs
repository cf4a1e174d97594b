use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
seed = 5
[synth]
length = 600
channels = 2
[model]
layers = 4
d_model = 16
heads = 2
patch_size = 8
stride = 4
t_in = 32
t_out = 8
[train]
max_epochs = 2
lr = 1e-3
[importance]
batch_size = 16
batch_limit = 2
";

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.cfg"), format!("{SMALL}{extra}")).unwrap();
        Run { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn cmd(&self, args: &[&str]) -> Output {
        self.cmd_env(args, None)
    }

    fn cmd_env(&self, args: &[&str], threads: Option<&str>) -> Output {
        let mut c = Command::new(env!("CARGO_BIN_EXE_dscope"));
        c.arg("--config")
            .arg(self.dir.path().join("run.cfg"))
            .arg("--out_dir")
            .arg(self.out())
            .args(args);
        match threads {
            Some(t) => c.env("DSCOPE_THREADS", t),
            None => c.env_remove("DSCOPE_THREADS"),
        };
        c.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let o = self.cmd(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    }

    fn read(&self, name: &str) -> String {
        fs::read_to_string(self.out().join(name)).unwrap()
    }
}

fn bytes(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn pipeline_outputs_are_reproducible() {
    let (a, b) = (Run::new(""), Run::new(""));
    for r in [&a, &b] {
        r.ok(&["train"]);
        r.ok(&["analyze"]);
        r.ok(&["prune", "--random-baseline", "--no-timing"]);
        r.ok(&["eval"]);
    }
    for name in [
        "model.ckpt",
        "history.jsonl",
        "importance.json",
        "importance.csv",
        "pruned.ckpt",
        "plan.json",
        "finetune_history.jsonl",
        "comparison.json",
        "eval.json",
        "predictions.csv",
    ] {
        assert!(bytes(&a.out(), name) == bytes(&b.out(), name), "{name} differs");
    }
    let strip = |r: &Run| r.read("config.txt").lines().filter(|l| !l.starts_with("out_dir")).collect::<Vec<_>>().join("\n");
    assert_eq!(strip(&a), strip(&b));
    let history = a.read("history.jsonl");
    assert_eq!(history.lines().count(), 2);
    let report: serde_json::Value = serde_json::from_str(&a.read("importance.json")).unwrap();
    assert_eq!(report["per_layer"].as_array().unwrap().len(), 4);
    let meta: serde_json::Value = serde_json::from_str(&a.read("train.meta.json")).unwrap();
    assert!(meta["elapsed_s"].is_number());
}

#[test]
fn missing_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_dscope"))
        .args(["train", "--data.source", "csv", "--data.path", "/nonexistent/ett.csv", "--out_dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset not found"));
}

#[test]
fn bad_flags_and_env_are_usage_errors() {
    let r = Run::new("");
    assert_eq!(r.cmd(&["train", "--model.nonsense", "3"]).status.code(), Some(2));
    assert_eq!(r.cmd(&["train", "--train.lr=abc"]).status.code(), Some(2));
    assert_eq!(r.cmd(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(r.cmd(&["eval"]).status.code(), Some(2), "no checkpoint yet");
    assert_eq!(r.cmd_env(&["train"], Some("zero")).status.code(), Some(2));
}

#[test]
fn two_layer_model_has_nothing_to_prune() {
    let r = Run::new("model.layers = 2\n");
    r.ok(&["train", "--train.max_epochs", "1"]);
    let o = r.ok(&["analyze"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nothing to prune"));
}

#[test]
fn retain_all_keeps_the_model() {
    let r = Run::new("");
    r.ok(&["train", "--train.max_epochs", "1"]);
    r.ok(&["prune", "--retain-all", "--no-timing"]);
    let plan: serde_json::Value = serde_json::from_str(&r.read("plan.json")).unwrap();
    assert_eq!(plan["retained"], serde_json::json!([0, 1, 2, 3]));
    assert_eq!(bytes(&r.out(), "model.ckpt"), bytes(&r.out(), "pruned.ckpt"));
    let c: serde_json::Value = serde_json::from_str(&r.read("comparison.json")).unwrap();
    assert_eq!(c["original"]["mse"], c["pruned"]["mse"]);
}

#[test]
fn project_writes_every_state_and_matches_eval() {
    let r = Run::new("model.layers = 8\n");
    r.ok(&["train", "--train.max_epochs", "1"]);
    r.ok(&["project"]);
    let files = fs::read_dir(r.out().join("project")).unwrap().count();
    assert_eq!(files, 9);
    r.ok(&["eval"]);
    assert_eq!(r.read("project/state_8.csv"), r.read("predictions.csv"));
    assert_eq!(r.cmd(&["project", "--layers", "9"]).status.code(), Some(2));
    assert_eq!(r.cmd(&["project", "--layers", "x"]).status.code(), Some(2));
}

#[test]
fn dump_feeds_analyze() {
    let r = Run::new("");
    r.ok(&["train", "--train.max_epochs", "1"]);
    r.ok(&["analyze"]);
    let direct: serde_json::Value = serde_json::from_str(&r.read("importance.json")).unwrap();
    r.ok(&["dump"]);
    let ltrc = bytes(&r.out(), "trace.ltrc");
    assert_eq!(&ltrc[..4], b"LTRC");
    let path = r.out().join("trace.ltrc");
    r.ok(&["analyze", "--dump", path.to_str().unwrap()]);
    let via: serde_json::Value = serde_json::from_str(&r.read("importance.json")).unwrap();
    for (a, b) in direct["per_layer"].as_array().unwrap().iter().zip(via["per_layer"].as_array().unwrap()) {
        let (x, y) = (a["dist"].as_f64().unwrap(), b["dist"].as_f64().unwrap());
        assert!((x - y).abs() <= 1e-5 * x.max(1.0));
    }
    fs::write(&path, &ltrc[..ltrc.len() - 3]).unwrap();
    assert_ne!(r.cmd(&["analyze", "--dump", path.to_str().unwrap()]).status.code(), Some(0));
}
