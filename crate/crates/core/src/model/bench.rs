use std::time::Instant;

use super::{forward, init_model, ModelConfig};
use crate::error::Result;
use crate::numerics::Tensor;

/// Best-of-`reps` wall time in seconds of one f32 forward pass per length.
/// Lengths are visited round-robin within each repetition so slow drifts of
/// the machine hit every length alike.
pub fn time_forward(cfg: &ModelConfig, lengths: &[usize], reps: usize) -> Result<Vec<f64>> {
    let p = init_model::<f32>(cfg)?;
    let inputs: Vec<Tensor<f32>> = lengths
        .iter()
        .map(|&l| Tensor::from_fn(&[l, cfg.n_bins], |i| ((i % 13) as f32 - 6.0) / 6.0))
        .collect();
    if let Some(x) = inputs.first() {
        forward(&p, cfg, x)?;
    }
    let mut best = vec![f64::INFINITY; lengths.len()];
    for _ in 0..reps.max(1) {
        for (b, x) in best.iter_mut().zip(&inputs) {
            let t = Instant::now();
            forward(&p, cfg, x)?;
            *b = b.min(t.elapsed().as_secs_f64());
        }
    }
    Ok(best)
}
