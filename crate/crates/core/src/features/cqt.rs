//! Direct constant-Q transform: one Hann-windowed complex kernel per bin,
//! evaluated at each frame center.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

use super::{AudioClip, FeatureMatrix, BINS_PER_OCTAVE, FMIN, HOP, N_BINS};

/// Quality factor shared by every bin.
pub fn q_factor() -> f64 {
    1.0 / (2f64.powf(1.0 / BINS_PER_OCTAVE as f64) - 1.0)
}

pub fn bin_frequency(b: usize) -> f64 {
    FMIN * 2f64.powf(b as f64 / BINS_PER_OCTAVE as f64)
}

/// Kernel length for bin `b`, capped at the clip length.
pub fn window_length(b: usize, sample_rate: u32, clip_len: usize) -> usize {
    let n = (q_factor() * f64::from(sample_rate) / bin_frequency(b)).ceil() as usize;
    n.min(clip_len).max(1)
}

pub fn frame_count(samples: usize) -> usize {
    samples / HOP + 1
}

struct Kernel {
    /// Offset of the first tap relative to the frame center.
    start: isize,
    re: Vec<f64>,
    im: Vec<f64>,
}

fn kernel(b: usize, sample_rate: u32, clip_len: usize) -> Kernel {
    let n = window_length(b, sample_rate, clip_len);
    let f = bin_frequency(b);
    let half = n / 2;
    let window: Vec<f64> = (0..n)
        .map(|i| if n == 1 { 1.0 } else { 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos() })
        .collect();
    let norm: f64 = window.iter().sum();
    let (mut re, mut im) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (i, w) in window.iter().enumerate() {
        let phase = -2.0 * PI * f * (i as f64 - half as f64) / f64::from(sample_rate);
        re.push(w * phase.cos() / norm);
        im.push(w * phase.sin() / norm);
    }
    Kernel {
        start: -(half as isize),
        re,
        im,
    }
}

/// Index into `0..len` under whole-sample reflection about both ends.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

fn dot2(x: &[f64], re: &[f64], im: &[f64]) -> (f64, f64) {
    let mut ar = [0.0; 4];
    let mut ai = [0.0; 4];
    let chunks = x.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        for l in 0..4 {
            ar[l] += x[o + l] * re[o + l];
            ai[l] += x[o + l] * im[o + l];
        }
    }
    let (mut sr, mut si) = (ar[0] + ar[1] + ar[2] + ar[3], ai[0] + ai[1] + ai[2] + ai[3]);
    for o in chunks * 4..x.len() {
        sr += x[o] * re[o];
        si += x[o] * im[o];
    }
    (sr, si)
}

/// Magnitude CQT with 144 bins from C1, 24 bins per octave, hop 2048.
pub fn cqt(clip: &AudioClip) -> Result<FeatureMatrix> {
    let len = clip.samples.len();
    if len == 0 {
        return Err(Error::InvalidArgument("cqt of an empty clip".into()));
    }
    let kernels: Vec<Kernel> = (0..N_BINS).map(|b| kernel(b, clip.sample_rate, len)).collect();
    let pad = kernels.iter().map(|k| k.re.len()).max().unwrap_or(1);
    let padded: Vec<f64> = (-(pad as isize)..(len + pad) as isize)
        .map(|i| clip.samples[reflect(i, len)])
        .collect();
    let frames = frame_count(len);
    let mut out = vec![0.0; frames * N_BINS];
    for t in 0..frames {
        let center = (t * HOP + pad) as isize;
        let row = &mut out[t * N_BINS..(t + 1) * N_BINS];
        for (b, k) in kernels.iter().enumerate() {
            let s = (center + k.start) as usize;
            let (r, i) = dot2(&padded[s..s + k.re.len()], &k.re, &k.im);
            row[b] = r.hypot(i);
        }
    }
    FeatureMatrix::new(Tensor::new(vec![frames, N_BINS], out)?, clip.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SAMPLE_RATE;

    #[test]
    fn reflection_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect(-5, 1), 0);
    }

    #[test]
    fn bin_layout() {
        assert!((bin_frequency(0) - 32.7032).abs() < 1e-12);
        assert!((bin_frequency(24) - 65.4064).abs() < 1e-9);
        assert!((q_factor() - 34.12708).abs() < 1e-4);
        assert_eq!(window_length(0, SAMPLE_RATE, 1_000_000), 23_011);
        assert_eq!(window_length(0, SAMPLE_RATE, 100), 100);
    }

    #[test]
    fn frame_counts() {
        assert_eq!(frame_count(220_500), 108);
        assert_eq!(frame_count(1), 1);
        assert_eq!(frame_count(2048), 2);
    }

    #[test]
    fn silence_is_zero_and_tiny_clip_works() {
        let f = cqt(&AudioClip::new(vec![0.0; 5000], SAMPLE_RATE).unwrap()).unwrap();
        assert_eq!(f.values.shape(), &[3, 144]);
        assert!(f.values.data().iter().all(|&v| v == 0.0));
        let f = cqt(&AudioClip::new(vec![0.3], SAMPLE_RATE).unwrap()).unwrap();
        assert_eq!(f.frames(), 1);
        assert!(cqt(&AudioClip::new(vec![], SAMPLE_RATE).unwrap()).is_err());
    }

    #[test]
    fn matched_tone_has_half_amplitude() {
        let b = 60;
        let f = bin_frequency(b);
        let n = SAMPLE_RATE as usize * 2;
        let samples = (0..n)
            .map(|i| (2.0 * PI * f * i as f64 / f64::from(SAMPLE_RATE)).cos())
            .collect();
        let m = cqt(&AudioClip::new(samples, SAMPLE_RATE).unwrap()).unwrap();
        let mid = m.frames() / 2;
        assert!((m.values.get2(mid, b) - 0.5).abs() < 1e-3);
    }
}
