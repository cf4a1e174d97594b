mod common;

use common::*;
use dscope::config::RunConfig;
use dscope::data::*;
use dscope::dump::{TraceDump, HEADER_LEN};
use dscope::model::ForecastModel;
use dscope::pipeline::{analyze_model, analyze_trace, capture_trace};
use dscope::checkpoint;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dump_roundtrip_is_bit_exact(raw in tiny_trace()) {
        let dump = TraceDump::from_trace(&raw.to_trace()).unwrap();
        let bytes = dump.encode().unwrap();
        prop_assert_eq!(bytes.len() as u128, HEADER_LEN as u128 + dump.header.payload_bytes());
        let back = TraceDump::decode(&bytes).unwrap();
        for (a, b) in dump.hidden.iter().chain(&dump.attn).zip(back.hidden.iter().chain(&back.attn)) {
            prop_assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert_eq!(&back, &dump);
        prop_assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn truncated_dump_is_rejected(raw in tiny_trace(), cut in 1usize..64) {
        let bytes = TraceDump::from_trace(&raw.to_trace()).unwrap().encode().unwrap();
        let cut = cut.min(bytes.len());
        prop_assert!(TraceDump::decode(&bytes[..bytes.len() - cut]).is_err());
    }
}

fn setup() -> (ForecastModel, RunConfig, WindowSet) {
    let cfg = RunConfig {
        model: small_config(4, 2),
        analysis_batch_size: 8,
        batch_limit: 3,
        ..RunConfig::default()
    };
    let mut model = ForecastModel::new(cfg.model.clone()).unwrap();
    randomize(&mut model, 2);
    let ds = synth_generate(&SynthSpec {
        kind: SynthKind::SineMixture,
        channels: 2,
        length: 600,
        seed: 2,
        noise_std: 0.1,
    })
    .unwrap();
    let ds = split_chronological(ds, SplitScheme::Ratio712).unwrap();
    (model, cfg, make_windows(&ds, Split::Val, 32, 8, 1).unwrap())
}

#[test]
fn analysis_from_dump_matches_analysis_from_checkpoint() {
    let (model, cfg, val) = setup();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    checkpoint::save(&model, &ckpt).unwrap();
    let loaded = checkpoint::load(&ckpt).unwrap();
    assert_eq!(loaded, model);

    let direct = analyze_model(&loaded, &cfg, &val).unwrap();
    let path = dir.path().join("t.ltrc");
    TraceDump::from_trace(&capture_trace(&loaded, &cfg, &val).unwrap()).unwrap().save(&path).unwrap();
    let via_dump = analyze_trace(&TraceDump::load(&path).unwrap().to_trace(), &cfg).unwrap();

    assert_eq!(direct.samples, via_dump.samples);
    for (a, b) in direct.per_layer.iter().zip(&via_dump.per_layer) {
        assert_eq!(a.layer_id, b.layer_id);
        for (x, y) in [
            (a.dist, b.dist),
            (a.sim_prev, b.sim_prev),
            (a.head_sim, b.head_sim),
            (a.redundancy, b.redundancy),
            (a.entropy, b.entropy),
            (a.score, b.score),
        ] {
            assert!((x - y).abs() <= 1e-5 * x.abs().max(1.0), "layer {}: {x} vs {y}", a.layer_id);
        }
    }
}

#[test]
fn checkpoint_keeps_forecasts_exact() {
    let (model, _, val) = setup();
    let bytes = checkpoint::encode(&model).unwrap();
    let back = checkpoint::decode(&bytes).unwrap();
    let x = val.select(&[0, 5, 9]).inputs;
    assert_eq!(model.forward(&x, false).unwrap().forecast, back.forward(&x, false).unwrap().forecast);
    assert_eq!(checkpoint::encode(&back).unwrap(), bytes);
}

#[test]
fn corrupt_files_are_errors_not_panics() {
    let (model, _, _) = setup();
    let bytes = checkpoint::encode(&model).unwrap();
    for cut in [0, 3, 4, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(checkpoint::decode(&bytes[..cut]).is_err(), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(checkpoint::decode(&bad).is_err());
    assert!(TraceDump::decode(b"LTRC").is_err());
}
