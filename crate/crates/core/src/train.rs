//! Masked cross-entropy, Adam and the epoch loop with early stopping.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chords::{framewise_targets, Annotation, Vocab};
use crate::error::{Error, Result};
use crate::features::{
    compute_norm_stats, segment_starts, znormalize, FeatureMatrix, NormStats, N_BINS, SEGMENT_FRAMES, SEGMENT_STRIDE,
};
use crate::model::{argmax_rows, forward_var, init_model, predict, ModelConfig, ModelParams, ModelVars};
use crate::numerics::{grad, Backward, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Segments per mini-batch.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            max_epochs: 50,
            patience: 5,
            clip_norm: Some(5.0),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.adam_eps > 0.0
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.patience > 0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }
}

struct CrossEntropyRule {
    targets: Vec<Option<usize>>,
    /// Row-wise softmax of the logits.
    probs: Vec<f64>,
    count: usize,
}

impl<T: Real> Backward<T> for CrossEntropyRule {
    fn backward(&self, g: &Tensor<T>, x: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let c = x[0].cols();
        let scale = g.item().as_f64() / self.count as f64;
        let mut out = vec![T::zero(); x[0].len()];
        for (t, target) in self.targets.iter().enumerate() {
            let Some(k) = *target else { continue };
            for j in 0..c {
                let onehot = if j == k { 1.0 } else { 0.0 };
                out[t * c + j] = T::lit((self.probs[t * c + j] - onehot) * scale);
            }
        }
        vec![Some(Tensor::new(x[0].shape().to_vec(), out).expect("logit shape"))]
    }
}

/// Row-wise softmax and mean negative log-likelihood over non-SKIP rows.
fn ce_forward<T: Real>(logits: &Tensor<T>, targets: &[Option<usize>]) -> Result<(f64, Vec<f64>, usize)> {
    let (l, c) = logits.expect_rank2("cross_entropy")?;
    if targets.len() != l {
        return Err(Error::shape("cross_entropy", logits.shape(), &[targets.len(), c]));
    }
    let mut probs = vec![0.0; l * c];
    let (mut total, mut count) = (0.0, 0usize);
    for (t, target) in targets.iter().enumerate() {
        let row = logits.row(t);
        let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let mut z = 0.0;
        for (p, v) in probs[t * c..(t + 1) * c].iter_mut().zip(row) {
            *p = (v.as_f64() - m).exp();
            z += *p;
        }
        probs[t * c..(t + 1) * c].iter_mut().for_each(|p| *p /= z);
        if let Some(k) = *target {
            if k >= c {
                return Err(Error::InvalidArgument(format!("target {k} at frame {t} outside {c} classes")));
            }
            total += m + z.ln() - row[k].as_f64();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("every frame is SKIP".into()));
    }
    Ok((total / count as f64, probs, count))
}

/// Mean over non-SKIP frames of `-ln softmax(logits)[t, target_t]`.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    let (loss, probs, count) = ce_forward(tape.value(logits), targets)?;
    let rule = CrossEntropyRule {
        targets: targets.to_vec(),
        probs,
        count,
    };
    Ok(tape.push(Tensor::scalar(T::lit(loss)), &[logits], Box::new(rule)))
}

pub fn cross_entropy_value<T: Real>(logits: &Tensor<T>, targets: &[Option<usize>]) -> Result<f64> {
    Ok(ce_forward(logits, targets)?.0)
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Number of completed steps.
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected Adam update (step `state.t + 1`).
pub fn adam_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        p.same_shape("adam_step", g)?;
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let it = p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
        for ((w, &gi), (mi, vi)) in it {
            let gf = gi.as_f64();
            let mf = b1 * mi.as_f64() + (1.0 - b1) * gf;
            let vf = b2 * vi.as_f64() + (1.0 - b2) * gf * gf;
            *mi = T::lit(mf);
            *vi = T::lit(vf);
            let update = cfg.learning_rate * (mf / c1) / ((vf / c2).sqrt() + cfg.adam_eps);
            *w = T::lit(w.as_f64() - update);
        }
    }
    Ok(())
}

pub fn global_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Train / validation / test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<C> {
    pub train: Vec<C>,
    pub val: Vec<C>,
    pub test: Vec<C>,
}

/// Seeded 80/10/10 split at item level; validation and test get at least
/// one item each.
pub fn split_dataset<C>(items: Vec<C>, seed: u64) -> Result<Split<C>> {
    let n = items.len();
    if n < 3 {
        return Err(Error::InvalidArgument(format!("need at least 3 clips to split, got {n}")));
    }
    let n_val = ((n as f64 * 0.1).round() as usize).max(1);
    let n_test = ((n as f64 * 0.1).round() as usize).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<C>> = items.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<C> { idx.iter().map(|&i| slots[i].take().expect("index used once")).collect() };
    let val = take(&order[..n_val]);
    let test = take(&order[n_val..n_val + n_test]);
    let train = take(&order[n_val + n_test..]);
    Ok(Split { train, val, test })
}

/// Unnormalized log-CQT features with aligned frame targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub id: String,
    pub features: FeatureMatrix,
    pub targets: Vec<Option<usize>>,
}

impl LabeledClip {
    pub fn new(id: impl Into<String>, features: FeatureMatrix, annotation: &Annotation, vocab: Vocab) -> Self {
        let targets = framewise_targets(&annotation.fill_gaps(), features.frames(), features.hop(), features.sample_rate, vocab);
        LabeledClip {
            id: id.into(),
            features,
            targets,
        }
    }
}

/// One fixed-length training window.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<T: Real> {
    pub x: Tensor<T>,
    pub targets: Vec<Option<usize>>,
}

/// Normalizes and windows every clip; padded frames get SKIP targets.
pub fn make_examples<T: Real>(clips: &[LabeledClip], stats: &NormStats) -> Vec<Example<T>> {
    let mut out = Vec::new();
    for clip in clips {
        let z = znormalize(&clip.features, stats);
        let frames = z.frames();
        for s in segment_starts(frames, SEGMENT_FRAMES, SEGMENT_STRIDE) {
            let avail = frames.saturating_sub(s).min(SEGMENT_FRAMES);
            let mut data = vec![T::zero(); SEGMENT_FRAMES * N_BINS];
            for (d, v) in data.iter_mut().zip(&z.values.data()[s * N_BINS..(s + avail) * N_BINS]) {
                *d = T::lit(*v);
            }
            let mut targets = vec![None; SEGMENT_FRAMES];
            targets[..avail].copy_from_slice(&clip.targets[s..s + avail]);
            out.push(Example {
                x: Tensor::new(vec![SEGMENT_FRAMES, N_BINS], data).expect("window shape"),
                targets,
            });
        }
    }
    out
}

/// Loss and gradients of one example; `None` if it has no labelled frame.
fn example_grad<T: Real>(
    params: &[Tensor<T>],
    cfg: &ModelConfig,
    ex: &Example<T>,
) -> Result<Option<(f64, usize, Vec<Tensor<T>>)>> {
    let count = ex.targets.iter().filter(|t| t.is_some()).count();
    if count == 0 {
        return Ok(None);
    }
    let (loss, grads) = grad(params, |tape, vars| {
        let mv = ModelVars::from_ordered(vars, cfg);
        let x = tape.constant(ex.x.clone());
        let logits = forward_var(tape, &mv, cfg.variant, x)?;
        cross_entropy(tape, logits, &ex.targets)
    })?;
    Ok(Some((loss.as_f64(), count, grads)))
}

/// Parameters plus optimizer state.
pub struct Trainer<T: Real> {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub params: Vec<Tensor<T>>,
    pub adam: AdamState<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let params = init_model::<T>(&model)?.tensors();
        let adam = AdamState::new(&params);
        Ok(Trainer {
            model,
            config,
            params,
            adam,
        })
    }

    /// One optimizer step on `batch`; returns the frame-weighted batch loss
    /// before the update. Per-example gradients may be computed in parallel
    /// but are summed in batch order.
    pub fn step(&mut self, batch: &[&Example<T>]) -> Result<Option<f64>> {
        let params = &self.params;
        let model = &self.model;
        let results: Vec<_> = batch
            .par_iter()
            .map(|ex| example_grad(params, model, ex))
            .collect::<Result<Vec<_>>>()?;
        let total: usize = results.iter().flatten().map(|r| r.1).sum();
        if total == 0 {
            return Ok(None);
        }
        let mut sum: Vec<Tensor<T>> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut loss = 0.0;
        for (l, n, g) in results.into_iter().flatten() {
            let w = n as f64 / total as f64;
            loss += l * w;
            for (acc, gi) in sum.iter_mut().zip(&g) {
                for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                    *a += T::lit(w) * *b;
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                step: self.adam.t as usize + 1,
                loss,
            });
        }
        if let Some(c) = self.config.clip_norm {
            clip_global_norm(&mut sum, c);
        }
        adam_step(&mut self.params, &sum, &mut self.adam, &self.config)?;
        Ok(Some(loss))
    }

    /// Frame-weighted loss and accuracy over non-SKIP frames.
    pub fn evaluate(&self, examples: &[Example<T>]) -> Result<(f64, f64)> {
        evaluate_examples(&self.params, &self.model, examples)
    }

    pub fn model_params(&self) -> Result<ModelParams<T>> {
        ModelParams::from_tensors(&self.model, self.params.clone())
    }
}

pub fn evaluate_examples<T: Real>(params: &[Tensor<T>], cfg: &ModelConfig, examples: &[Example<T>]) -> Result<(f64, f64)> {
    let per: Vec<(f64, usize, usize)> = examples
        .par_iter()
        .map(|ex| -> Result<(f64, usize, usize)> {
            let n = ex.targets.iter().filter(|t| t.is_some()).count();
            if n == 0 {
                return Ok((0.0, 0, 0));
            }
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
            let mv = ModelVars::from_ordered(&vars, cfg);
            let x = tape.constant(ex.x.clone());
            let logits = forward_var(&mut tape, &mv, cfg.variant, x)?;
            let lv = tape.value(logits);
            let loss = cross_entropy_value(lv, &ex.targets)?;
            let correct = argmax_rows(lv)
                .iter()
                .zip(&ex.targets)
                .filter(|(p, t)| t.is_some_and(|t| t == **p))
                .count();
            Ok((loss * n as f64, n, correct))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut loss, mut n, mut correct) = (0.0, 0usize, 0usize);
    for (l, k, c) in per {
        loss += l;
        n += k;
        correct += c;
    }
    if n == 0 {
        return Err(Error::InvalidArgument("no labelled frames to evaluate".into()));
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_framewise_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub params: ModelParams<f32>,
    pub history: Vec<EpochRecord>,
    pub stats: NormStats,
    pub best_epoch: usize,
    pub steps: u64,
}

/// Mini-batch Adam with early stopping on validation loss. Normalization
/// statistics come from the training clips only.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_clips: &[LabeledClip],
    val_clips: &[LabeledClip],
) -> Result<TrainOutcome> {
    train_with_progress(model_cfg, train_cfg, train_clips, val_clips, |_| {})
}

pub fn train_with_progress(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_clips: &[LabeledClip],
    val_clips: &[LabeledClip],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_clips.is_empty() || val_clips.is_empty() {
        return Err(Error::InvalidArgument("train and validation splits must be non-empty".into()));
    }
    let stats = compute_norm_stats(train_clips.iter().map(|c| &c.features))?;
    let train_ex: Vec<Example<f32>> = make_examples(train_clips, &stats);
    let val_ex: Vec<Example<f32>> = make_examples(val_clips, &stats);
    let mut trainer = Trainer::<f32>::new(*model_cfg, *train_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Vec<Tensor<f32>>)> = None;
    for epoch in 1..=train_cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(train_cfg.batch_size) {
            let batch: Vec<&Example<f32>> = chunk.iter().map(|&i| &train_ex[i]).collect();
            match trainer.step(&batch) {
                Ok(Some(l)) => {
                    loss_sum += l;
                    batches += 1;
                }
                Ok(None) => {}
                Err(Error::Diverged { step, loss, .. }) => return Err(Error::Diverged { epoch, step, loss }),
                Err(e) => return Err(e),
            }
        }
        let (val_loss, acc) = trainer.evaluate(&val_ex)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: trainer.adam.t as usize,
                loss: val_loss,
            });
        }
        let rec = EpochRecord {
            epoch,
            train_loss: if batches > 0 { loss_sum / batches as f64 } else { f64::NAN },
            val_loss,
            val_framewise_accuracy: acc,
        };
        on_epoch(&rec);
        history.push(rec);
        if best.as_ref().is_none_or(|b| val_loss < b.0) {
            best = Some((val_loss, epoch, trainer.params.clone()));
        } else if epoch - best.as_ref().map_or(0, |b| b.1) >= train_cfg.patience {
            break;
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        params: ModelParams::from_tensors(model_cfg, params)?,
        history,
        stats,
        best_epoch,
        steps: trainer.adam.t,
    })
}

/// Chord intervals for a whole clip: normalize, classify every frame over the
/// full sequence, merge runs.
pub fn transcribe(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    stats: &NormStats,
    features: &FeatureMatrix,
    vocab: Vocab,
) -> Result<Annotation> {
    if vocab.size() != cfg.n_classes {
        return Err(Error::Config(format!(
            "model has {} classes, vocabulary {} has {}",
            cfg.n_classes,
            vocab.name(),
            vocab.size()
        )));
    }
    let z = znormalize(features, stats);
    let classes = predict(params, cfg, &z.values.cast::<f32>())?;
    crate::eval::frames_to_annotation(&classes, vocab, features.frame_period())
}
