mod common;

use common::*;
use dscope::data::*;
use dscope::model::ForecastModel;
use dscope::training::*;

fn windows(seed: u64) -> (WindowSet, WindowSet) {
    let ds = synth_generate(&SynthSpec {
        kind: SynthKind::SineMixture,
        channels: 2,
        length: 700,
        seed,
        noise_std: 0.1,
    })
    .unwrap();
    let ds = split_chronological(ds, SplitScheme::Ratio712).unwrap();
    (
        make_windows(&ds, Split::Train, 32, 8, 2).unwrap(),
        make_windows(&ds, Split::Val, 32, 8, 1).unwrap(),
    )
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        max_epochs: epochs,
        batch_size: 16,
        seed: 3,
        ..TrainConfig::default()
    }
}

#[test]
fn first_epoch_lowers_validation_loss() {
    let (tr, va) = windows(1);
    let model = ForecastModel::new(small_config(2, 1)).unwrap();
    let before = validation_mse(&model, &va, 64).unwrap();
    let out = train(model, &tr, &va, &cfg(1)).unwrap();
    assert_eq!(out.history.len(), 1);
    assert!(out.history[0].val_mse < before, "{} vs {before}", out.history[0].val_mse);
    assert!(out.history[0].train_mse.is_finite());
}

#[test]
fn returned_model_is_the_best_one_seen() {
    let (tr, va) = windows(2);
    let model = ForecastModel::new(small_config(2, 2)).unwrap();
    let start = validation_mse(&model, &va, 64).unwrap();
    let out = train(model, &tr, &va, &TrainConfig { patience: 1, ..cfg(6) }).unwrap();
    let best = out.history.iter().map(|r| r.val_mse).fold(start, f64::min);
    assert_eq!(out.best_val_mse, best);
    assert_eq!(validation_mse(&out.model, &va, 64).unwrap(), best);
    if out.stop == StopReason::EarlyStopped {
        let last = out.history.last().unwrap();
        assert!(last.val_mse >= best);
        assert!(out.history.len() < 6);
    }
}

#[test]
fn patience_stops_a_run_that_stops_improving() {
    let (tr, va) = windows(3);
    let model = ForecastModel::new(small_config(2, 3)).unwrap();
    // a learning rate this large bounces around instead of improving
    let out = train(model, &tr, &va, &TrainConfig { lr: 0.5, patience: 2, grad_clip: 1e9, ..cfg(30) }).unwrap();
    assert_ne!(out.stop, StopReason::Completed);
    assert!(out.history.len() < 30);
}

#[test]
fn training_is_deterministic() {
    let (tr, va) = windows(4);
    let run = || train(ForecastModel::new(small_config(2, 4)).unwrap(), &tr, &va, &cfg(2)).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(history_jsonl(&a.history), history_jsonl(&b.history));
    assert_eq!(a.model, b.model);
}

#[test]
fn zero_epochs_returns_the_input() {
    let (tr, va) = windows(5);
    let model = ForecastModel::new(small_config(2, 5)).unwrap();
    let out = train(model.clone(), &tr, &va, &cfg(0)).unwrap();
    assert_eq!(out.model, model);
    assert!(out.history.is_empty());
    assert!(out.best_val_mse.is_nan());
}

#[test]
fn finetune_runs_on_a_pruned_model() {
    use dscope::pruning::{prune_model, random_plan};
    let (tr, va) = windows(6);
    let mut model = ForecastModel::new(small_config(4, 6)).unwrap();
    randomize(&mut model, 6);
    let pruned = prune_model(&model, &random_plan(&model, 1, 0).unwrap()).unwrap();
    let start = validation_mse(&pruned, &va, 64).unwrap();
    let out = finetune(pruned, &tr, &va, &cfg(4)).unwrap();
    assert!(out.history.len() <= 2);
    assert!(out.best_val_mse <= start);
    assert_eq!(out.model.num_blocks(), 3);
}

#[test]
fn mismatched_windows_are_rejected() {
    let (tr, va) = windows(7);
    let mut mc = small_config(1, 0);
    mc.t_out = 4;
    assert!(train(ForecastModel::new(mc).unwrap(), &tr, &va, &cfg(1)).is_err());
}
