mod common;

use common::*;
use dscope::autograd::{grad_check, Tape};
use dscope::model::ForecastModel;
use dscope::tensor::causal_mask;
use dscope::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn one_layer_model_matches_finite_differences() {
    let mut model = ForecastModel::new(small_config(1, 4)).unwrap();
    randomize(&mut model, 4);
    let x = random_input(4, 32, 1, 4);
    let target = random_input(4, 8, 1, 5);
    let r = fd_check_model(&model, &x, &target, 100, 1e-4, 4);
    assert!(r.max_rel_error < 1e-4, "{} ({})", r.max_rel_error, r.worst);
    assert_eq!(r.tensors, 3 + 16 + 4);
}

#[test]
fn pruned_ids_do_not_change_gradients() {
    let mut model = ForecastModel::new(small_config(3, 7)).unwrap();
    randomize(&mut model, 7);
    model.layer_ids = vec![0, 2];
    model.weights.blocks.remove(1);
    let x = random_input(2, 32, 2, 1);
    let target = random_input(2, 8, 2, 2);
    let r = fd_check_model(&model, &x, &target, 30, 1e-4, 1);
    assert!(r.max_rel_error < 1e-4, "{} ({})", r.max_rel_error, r.worst);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_chain_gradients(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![rand_tensor(&[m, k], &mut rng), rand_tensor(&[k, n], &mut rng)];
        let r = grad_check(|t: &mut Tape, v| {
            let p = t.matmul(v[0], v[1])?;
            let q = t.mul(p, p)?;
            Ok(t.sum(q))
        }, &params, 1e-5, 1e-4, 100, seed).unwrap();
        prop_assert!(r.passed, "{}", r.max_rel_error);
    }

    #[test]
    fn norm_softmax_gelu_gradients(rows in 1usize..4, d in 2usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = vec![
            rand_tensor(&[rows, d, d], &mut rng),
            rand_tensor(&[d], &mut rng),
            rand_tensor(&[d], &mut rng),
        ];
        let mask = causal_mask::<f64>(d);
        let r = grad_check(|t: &mut Tape, v| {
            let ln = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            let s = t.softmax_rows(ln, Some(&mask))?;
            let g = t.gelu(ln);
            let p = t.mul(s, g)?;
            Ok(t.sum(p))
        }, &params, 1e-5, 1e-4, 100, seed).unwrap();
        prop_assert!(r.passed, "{}", r.max_rel_error);
    }

    #[test]
    fn batched_attention_gradients(b in 1usize..3, s in 1usize..4, h in 1usize..3, dh in 1usize..3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = h * dh;
        let params = vec![rand_tensor(&[b * s, d], &mut rng), rand_tensor(&[d, d], &mut rng)];
        let r = grad_check(|t: &mut Tape, v| {
            let x = t.matmul(v[0], v[1])?;
            let q = t.split_heads(x, b, s, h)?;
            let sc = t.bmm(q, q, true)?;
            let a = t.softmax_rows(sc, None)?;
            let c = t.bmm(a, q, false)?;
            let m = t.merge_heads(c, b, s, h)?;
            let sq = t.mul(m, m)?;
            Ok(t.sum(sq))
        }, &params, 1e-5, 1e-4, 100, seed).unwrap();
        prop_assert!(r.passed, "{}", r.max_rel_error);
    }
}
