#![allow(dead_code)]

use bmace::model::{init_model, ModelConfig, ModelParams, Variant};
use bmace::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// d_model 4, n 2, r 2, k 2: small enough for exhaustive finite differences.
pub fn tiny_config(variant: Variant, seed: u64) -> ModelConfig {
    ModelConfig {
        variant,
        d_model: 4,
        n_state: 2,
        dt_rank: 2,
        conv_k: 2,
        expand: 1,
        seed,
        ..ModelConfig::new(variant, 25)
    }
}

/// Initialized parameters with every tensor jittered by uniform(-0.3, 0.3)
/// so no gradient is structurally tiny.
pub fn jittered_params(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    let mut p = init_model::<f64>(cfg).unwrap();
    let mut r = rng(seed ^ 0x9e37_79b9);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    p
}

/// A random scan instance with positive steps and a stable state matrix.
pub fn scan_instance(
    r: &mut ChaCha8Rng,
    l: usize,
    d: usize,
    n: usize,
) -> (bmace::sscan::ScanInputs<f64>, Tensor<f64>, Tensor<f64>) {
    let s = bmace::sscan::ScanInputs {
        u: uniform(r, &[l, d], -1.0, 1.0),
        delta: uniform(r, &[l, d], 0.001, 0.5),
        b: uniform(r, &[l, n], -1.0, 1.0),
        c: uniform(r, &[l, n], -1.0, 1.0),
    };
    let a = uniform(r, &[d, n], -3.0, -0.05);
    let d_skip = uniform(r, &[d], -1.0, 1.0);
    (s, a, d_skip)
}

/// Largest |assoc - seq| over `count` instances with lengths cycling through
/// 1, 2, 3, 16, 100, 512.
pub fn scan_equivalence_error(count: u64) -> f64 {
    const LENGTHS: [usize; 6] = [1, 2, 3, 16, 100, 512];
    let mut worst = 0.0f64;
    for seed in 0..count {
        let mut r = rng(seed);
        let l = LENGTHS[seed as usize % LENGTHS.len()];
        let (d, n) = (1 + seed as usize % 5, 1 + seed as usize % 8);
        let (s, a, d_skip) = scan_instance(&mut r, l, d, n);
        let seq = bmace::sscan::selective_scan_seq(&s, &a, &d_skip).unwrap();
        let par = bmace::sscan::selective_scan_assoc(&s, &a, &d_skip).unwrap();
        worst = worst.max(seq.max_abs_diff(&par));
    }
    worst
}

/// BMACE parameters with branches swapped and the head's two row blocks
/// swapped, so the backward branch sees what the forward branch saw.
pub fn swapped(p: &ModelParams<f64>, d_model: usize) -> ModelParams<f64> {
    let mut q = p.clone();
    std::mem::swap(&mut q.block_a, &mut q.block_b);
    let c = p.head.cols();
    let data = p.head.data();
    q.head = Tensor::from_fn(&[2 * d_model, c], |i| {
        let (row, col) = (i / c, i % c);
        let src = if row < d_model { row + d_model } else { row - d_model };
        data[src * c + col]
    });
    q
}

/// Largest deviation from `forward_swapped(rev x) == rev forward(x)` over `seeds`.
pub fn bmace_symmetry_error(seeds: u64, d_model: usize, l: usize) -> f64 {
    use bmace::model::forward;
    use bmace::numerics::reverse_time;
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let cfg = ModelConfig {
            d_model,
            n_state: 4,
            dt_rank: 2,
            conv_k: 3,
            seed,
            ..ModelConfig::new(Variant::Bmace, 25)
        };
        let p = jittered_params(&cfg, seed);
        let q = swapped(&p, d_model);
        let x = uniform(&mut rng(seed + 500), &[l, 144], -1.0, 1.0);
        let lhs = forward(&q, &cfg, &reverse_time(&x).unwrap()).unwrap();
        let rhs = reverse_time(&forward(&p, &cfg, &x).unwrap()).unwrap();
        worst = worst.max(lhs.max_abs_diff(&rhs));
    }
    worst
}

/// Labels drawn by the random annotation generator: plain templates,
/// extensions, inversions, explicit interval lists, no-chord and unknown.
pub const LABEL_POOL: &[&str] = &[
    "C:maj", "C:min", "C", "C:7", "C:maj7", "C:min7", "C:sus2", "C:sus4", "C:dim", "C:aug", "C:hdim7",
    "C:dim7", "C:minmaj7", "C:maj6", "C:min6", "C:9", "C:maj/3", "C:min7/b7", "C:(1,3)", "C:5",
    "D:min", "D:7", "D:maj", "Db:maj", "C#:maj", "E:min(9)", "G:7(#9)", "G:maj", "G:sus4(b7)",
    "A:min7", "A:min", "Bb:maj7", "B:hdim7", "F:(3,5,b7,9)", "N", "N", "X",
];

/// Random annotation on a 1/8 s grid so every sum of durations is exact.
/// Segments occasionally leave gaps.
pub fn random_annotation(r: &mut ChaCha8Rng, span_eighths: u32) -> bmace::chords::Annotation {
    use bmace::chords::{parse_chord, Annotation, Segment};
    let mut t = 0u32;
    let mut segments = Vec::new();
    while t < span_eighths {
        let len = r.random_range(1..=12).min(span_eighths - t);
        let label = parse_chord(LABEL_POOL[r.random_range(0..LABEL_POOL.len())]).unwrap();
        if segments.is_empty() || !r.random_bool(0.1) {
            segments.push(Segment { start: f64::from(t) / 8.0, end: f64::from(t + len) / 8.0, label });
        }
        t += len;
    }
    if segments.is_empty() {
        segments.push(Segment { start: 0.0, end: f64::from(span_eighths) / 8.0, label: bmace::chords::ChordLabel::NoChord });
    }
    Annotation::new(segments).unwrap()
}

/// Quadratic oracle: intersect every reference interval with every estimate
/// interval; reference time the estimate leaves uncovered counts as `N`.
pub fn brute_force_wcsr(
    reference: &bmace::chords::Annotation,
    est: &bmace::chords::Annotation,
    c: bmace::eval::Comparator,
) -> (Option<f64>, f64) {
    use bmace::chords::ChordLabel;
    use bmace::eval::{compare, Outcome};
    let (mut matched, mut judged) = (0.0, 0.0);
    let mut tally = |d: f64, r: &ChordLabel, e: &ChordLabel| match compare(c, r, e) {
        Outcome::Match => {
            matched += d;
            judged += d;
        }
        Outcome::Mismatch => judged += d,
        Outcome::Skip => {}
    };
    for rs in &reference.segments {
        let mut covered = 0.0;
        for es in &est.segments {
            let overlap = rs.end.min(es.end) - rs.start.max(es.start);
            if overlap > 0.0 {
                covered += overlap;
                tally(overlap, &rs.label, &es.label);
            }
        }
        let rest = (rs.end - rs.start) - covered;
        if rest > 1e-12 {
            tally(rest, &rs.label, &ChordLabel::NoChord);
        }
    }
    ((judged > 0.0).then(|| matched / judged), judged)
}

/// Largest |wcsr - oracle| over `pairs` random annotation pairs, all metrics.
pub fn wcsr_oracle_error(pairs: u64) -> f64 {
    use bmace::eval::{evaluate_all, Comparator};
    let mut worst = 0.0f64;
    for seed in 0..pairs {
        let mut r = rng(seed);
        let span = r.random_range(8..400);
        let reference = random_annotation(&mut r, span);
        let est_span = span + r.random_range(0..40) - 20.min(span - 1);
        let est = random_annotation(&mut r, est_span);
        let got = evaluate_all(&reference, &est).unwrap();
        for c in Comparator::ALL {
            let (score, dur) = brute_force_wcsr(&reference, &est, c);
            match (got.scores.get(c), score) {
                (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                (None, None) => {}
                _ => return f64::INFINITY,
            }
            worst = worst.max((got.durations.get(c) - dur).abs());
        }
    }
    worst
}

/// Pairs over the full large-vocabulary label grid that break
/// tetrads ⇒ triads ⇒ thirds ⇒ root, or triads ⇒ mirex for chord pairs.
pub fn nesting_violations() -> usize {
    use bmace::chords::{class_to_label, ChordLabel, Vocab};
    use bmace::eval::{compare, Comparator as C, Outcome};
    let labels: Vec<ChordLabel> = (0..170).map(|k| class_to_label(k, Vocab::Large170).unwrap()).collect();
    let mut bad = 0;
    for r in &labels {
        for e in &labels {
            let m = |c| compare(c, r, e) == Outcome::Match;
            let chain = [m(C::Tetrads), m(C::Triads), m(C::Thirds), m(C::Root)];
            if chain.windows(2).any(|w| w[0] && !w[1]) {
                bad += 1;
            }
            let both_chords = matches!(r, ChordLabel::Chord(_)) && matches!(e, ChordLabel::Chord(_));
            if both_chords && m(C::Triads) && !m(C::Mirex) {
                bad += 1;
            }
        }
    }
    bad
}

/// Labelled synthetic clip rendered and analysed end to end.
pub fn synthetic_clip(id: &str, triples: &[(f64, f64, &str)], seed: u64, vocab: bmace::chords::Vocab) -> bmace::train::LabeledClip {
    use bmace::features::{extract, synth_chord_clip, LOG_EPS, SAMPLE_RATE};
    let ann = bmace::chords::Annotation::from_triples(triples).unwrap();
    let audio = synth_chord_clip(&ann, SAMPLE_RATE, seed).unwrap();
    bmace::train::LabeledClip::new(id, extract(&audio, LOG_EPS).unwrap(), &ann, vocab)
}

/// Batch losses of `steps` Adam steps on one 108-frame window with a
/// d_model = 16 BMACE.
pub fn single_batch_losses(steps: usize) -> Vec<f64> {
    use bmace::chords::Vocab;
    use bmace::features::compute_norm_stats;
    use bmace::train::{make_examples, TrainConfig, Trainer};
    let clip = synthetic_clip(
        "overfit",
        &[(0.0, 2.5, "C:maj"), (2.5, 5.0, "A:min"), (5.0, 7.5, "F:maj"), (7.5, 10.0, "G:maj")],
        11,
        Vocab::MajMin25,
    );
    let stats = compute_norm_stats([&clip.features]).unwrap();
    let examples = make_examples::<f32>(std::slice::from_ref(&clip), &stats);
    let cfg = ModelConfig {
        d_model: 16,
        seed: 5,
        ..ModelConfig::new(Variant::Bmace, 25)
    };
    let mut trainer = Trainer::<f32>::new(cfg, TrainConfig::default()).unwrap();
    (0..steps).map(|_| trainer.step(&[&examples[0]]).unwrap().unwrap()).collect()
}
