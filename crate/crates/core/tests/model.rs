mod common;

use bmace::model::{
    argmax_rows, count_params, forward, init_model, load_checkpoint, predict, save_checkpoint,
    ModelConfig, ModelParams, Variant,
};
use bmace::numerics::ops::add_bias;
use bmace::numerics::{concat_features, matmul};
use bmace::sscan::{mamba_block, Direction};
use bmace::Tensor;
use common::{bmace_symmetry_error, jittered_params, rng, tiny_config, uniform};
use proptest::prelude::*;

/// Two-branch network composed from the public block primitive.
fn two_branch(p: &ModelParams<f64>, x: &Tensor<f64>, dir_b: Direction) -> Tensor<f64> {
    let h0 = add_bias(&matmul(x, &p.fc_in).unwrap(), &p.fc_in_bias).unwrap();
    let branch = |block, dir| {
        let y = mamba_block(&h0, block, dir).unwrap();
        h0.zip_map(&y, |a, b| a + b).unwrap()
    };
    let a = branch(&p.block_a, Direction::Forward);
    let b = branch(&p.block_b, dir_b);
    add_bias(&matmul(&concat_features(&a, &b).unwrap(), &p.head).unwrap(), &p.head_bias).unwrap()
}

#[test]
fn bmace_swap_reversal_symmetry() {
    let err = bmace_symmetry_error(20, 6, 17);
    assert!(err <= 1e-10, "{err}");
}

#[test]
fn horizontal_model_matches_hand_composition() {
    for seed in 0..5u64 {
        let cfg = tiny_config(Variant::MaceH, seed);
        let p = jittered_params(&cfg, seed);
        let x = uniform(&mut rng(seed), &[9, 144], -1.0, 1.0);
        let got = forward(&p, &cfg, &x).unwrap();
        assert!(got.max_abs_diff(&two_branch(&p, &x, Direction::Forward)) <= 1e-12);
    }
}

#[test]
fn bidirectional_with_both_blocks_forward_is_horizontal() {
    for seed in 0..5u64 {
        let cfg = tiny_config(Variant::Bmace, seed);
        let p = jittered_params(&cfg, seed);
        let x = uniform(&mut rng(seed + 1), &[11, 144], -1.0, 1.0);
        let h_cfg = ModelConfig { variant: Variant::MaceH, ..cfg };
        let horizontal = forward(&p, &h_cfg, &x).unwrap();
        assert_eq!(two_branch(&p, &x, Direction::Forward).data(), horizontal.data());
        let bidir = forward(&p, &cfg, &x).unwrap();
        assert!(bidir.max_abs_diff(&two_branch(&p, &x, Direction::Backward)) <= 1e-12);
        assert!(bidir.max_abs_diff(&horizontal) > 1e-6);
    }
}

#[test]
fn vertical_model_is_a_residual_stack() {
    let cfg = tiny_config(Variant::MaceV, 3);
    let p = jittered_params(&cfg, 3);
    let x = uniform(&mut rng(8), &[7, 144], -1.0, 1.0);
    let h0 = add_bias(&matmul(&x, &p.fc_in).unwrap(), &p.fc_in_bias).unwrap();
    let h1 = h0.zip_map(&mamba_block(&h0, &p.block_a, Direction::Forward).unwrap(), |a, b| a + b).unwrap();
    let h2 = h1.zip_map(&mamba_block(&h1, &p.block_b, Direction::Forward).unwrap(), |a, b| a + b).unwrap();
    let want = add_bias(&matmul(&h2, &p.head).unwrap(), &p.head_bias).unwrap();
    assert!(forward(&p, &cfg, &x).unwrap().max_abs_diff(&want) <= 1e-12);
}

#[test]
fn checkpoint_element_count_equals_param_count() {
    let dir = tempfile::tempdir().unwrap();
    for variant in Variant::ALL {
        for classes in [25, 170] {
            let cfg = ModelConfig::new(variant, classes);
            let p = init_model::<f32>(&cfg).unwrap();
            let path = dir.path().join(format!("{}-{classes}.json", variant.name()));
            save_checkpoint(&path, &cfg, &p, serde_json::Value::Null).unwrap();
            let blob = std::fs::metadata(bmace::store::blob_path(&path)).unwrap().len();
            assert_eq!(blob as usize, 4 * count_params(&cfg));
            let back = load_checkpoint(&path).unwrap();
            assert_eq!(back.params.element_count(), count_params(&cfg));
            assert_eq!(back.params, p);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn argmax_matches_linear_search(rows in prop::collection::vec(prop::collection::vec(-4i8..4, 25), 1..12)) {
        let logits = Tensor::from_rows(&rows.iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect::<Vec<_>>());
        let got = argmax_rows(&logits);
        for (row, &k) in rows.iter().zip(&got) {
            let max = *row.iter().max().unwrap();
            prop_assert_eq!(k, row.iter().position(|&v| v == max).unwrap());
        }
    }
}

#[test]
fn predict_is_argmax_of_forward() {
    let cfg = tiny_config(Variant::Bmace, 1);
    let p = jittered_params(&cfg, 1);
    let x = uniform(&mut rng(4), &[20, 144], -2.0, 2.0);
    let logits = forward(&p, &cfg, &x).unwrap();
    let pred = predict(&p, &cfg, &x).unwrap();
    for (t, &k) in pred.iter().enumerate() {
        assert!(logits.row(t).iter().all(|&v| v <= logits.get2(t, k)));
    }
}
