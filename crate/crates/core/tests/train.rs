mod common;

use bmace::chords::Vocab;
use bmace::model::{ModelConfig, Variant};
use bmace::train::{adam_step, evaluate_examples, make_examples, train, AdamState, TrainConfig};
use bmace::Tensor;
use common::{single_batch_losses, synthetic_clip};

#[test]
fn single_batch_overfits() {
    let losses = single_batch_losses(500);
    let first_hit = losses.iter().position(|&l| l < 0.05);
    assert!(first_hit.is_some(), "final loss {}", losses[losses.len() - 1]);
    let rises = losses[..10].windows(2).filter(|w| w[1] > w[0]).count();
    assert!(rises <= 1, "{:?}", &losses[..10]);
}

#[test]
fn zero_gradient_leaves_parameters_and_decays_moments() {
    let cfg = TrainConfig::default();
    let mut p = vec![Tensor::<f64>::vector(vec![1.0, -1.0])];
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &[Tensor::vector(vec![0.5, 0.5])], &mut st, &cfg).unwrap();
    let after_one = p.clone();
    let m1 = st.m[0].clone();
    adam_step(&mut p, &[Tensor::vector(vec![0.0, 0.0])], &mut st, &cfg).unwrap();
    assert!(st.m[0].data().iter().zip(m1.data()).all(|(a, b)| a.abs() < b.abs()));
    // the decayed first moment still moves the parameters; a zero gradient
    // on fresh state does not
    assert_ne!(p, after_one);
    let mut q = vec![Tensor::<f64>::vector(vec![1.0, -1.0])];
    let mut fresh = AdamState::new(&q);
    adam_step(&mut q, &[Tensor::vector(vec![0.0, 0.0])], &mut fresh, &cfg).unwrap();
    assert_eq!(q[0].data(), &[1.0, -1.0]);
}

fn small_corpus() -> (Vec<bmace::train::LabeledClip>, Vec<bmace::train::LabeledClip>) {
    let progressions: [&[(f64, f64, &str)]; 4] = [
        &[(0.0, 3.0, "C:maj"), (3.0, 6.0, "G:maj")],
        &[(0.0, 3.0, "A:min"), (3.0, 6.0, "E:min")],
        &[(0.0, 2.0, "F:maj"), (2.0, 4.0, "N"), (4.0, 6.0, "D:min")],
        &[(0.0, 3.0, "G:maj"), (3.0, 6.0, "C:maj")],
    ];
    let clips: Vec<_> = progressions
        .iter()
        .enumerate()
        .map(|(i, p)| synthetic_clip(&format!("c{i}"), p, i as u64, Vocab::MajMin25))
        .collect();
    (clips[..3].to_vec(), clips[3..].to_vec())
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_state: 4,
        dt_rank: 2,
        seed: 2,
        ..ModelConfig::new(Variant::Bmace, 25)
    }
}

#[test]
fn training_is_deterministic_and_keeps_the_best_epoch() {
    let (tr, va) = small_corpus();
    let cfg = TrainConfig {
        max_epochs: 12,
        patience: 3,
        batch_size: 2,
        learning_rate: 5e-3,
        seed: 4,
        ..Default::default()
    };
    let a = train(&tiny_model(), &cfg, &tr, &va).unwrap();
    let b = train(&tiny_model(), &cfg, &tr, &va).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);

    assert!(!a.history.is_empty() && a.history.len() <= cfg.max_epochs);
    let min = a.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    let val = make_examples::<f32>(&va, &a.stats);
    let (loss, _) = evaluate_examples(&a.params.tensors(), &tiny_model(), &val).unwrap();
    assert_eq!(loss, min);
    assert_eq!(a.history[a.best_epoch - 1].val_loss, min);
}

#[test]
fn early_stopping_respects_patience() {
    let (tr, va) = small_corpus();
    // a huge step size makes validation loss stall quickly
    let cfg = TrainConfig {
        max_epochs: 40,
        patience: 2,
        batch_size: 4,
        learning_rate: 0.5,
        clip_norm: None,
        ..Default::default()
    };
    match train(&tiny_model(), &cfg, &tr, &va) {
        Ok(out) => {
            let n = out.history.len();
            assert!(n == cfg.max_epochs || n - out.best_epoch == cfg.patience, "{n} {}", out.best_epoch);
        }
        Err(bmace::Error::Diverged { .. }) => {}
        Err(e) => panic!("{e}"),
    }
}

#[test]
fn normalization_comes_from_the_training_split() {
    let (tr, va) = small_corpus();
    let cfg = TrainConfig { max_epochs: 1, ..Default::default() };
    let out = train(&tiny_model(), &cfg, &tr, &va).unwrap();
    let expect = bmace::features::compute_norm_stats(tr.iter().map(|c| &c.features)).unwrap();
    assert_eq!(out.stats, expect);
    assert!(train(&tiny_model(), &cfg, &tr, &[]).is_err());
}
