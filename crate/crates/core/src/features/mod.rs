//! Audio in, normalized 144-bin log-CQT windows out.
//!
//! `read_wav -> cqt -> log_amplitude -> znormalize -> segment`

mod cqt;
mod synth;
mod wav;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::store;

pub use cqt::{bin_frequency, cqt, frame_count, q_factor, window_length};
pub use synth::{
    note_frequency, random_progression, synth_chord_clip, synth_corpus, ProgressionConfig, SyntheticClip,
    NOISE_STD,
};
pub use wav::{decode_wav, encode_wav_f32, encode_wav_pcm16, read_wav, write_wav};

pub const SAMPLE_RATE: u32 = 22_050;
pub const HOP: usize = 2048;
/// C1.
pub const FMIN: f64 = 32.7032;
pub const BINS_PER_OCTAVE: usize = 24;
pub const N_BINS: usize = 144;
pub const LOG_EPS: f64 = 1e-6;
/// 10 s of frames at hop 2048.
pub const SEGMENT_FRAMES: usize = 108;
/// 5 s overlap.
pub const SEGMENT_STRIDE: usize = 54;
pub const FEATURE_FORMAT: &str = "bmace-feat-1";

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("sample {i} is not finite")));
        }
        Ok(AudioClip { samples, sample_rate })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// Frames x 144 feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: Tensor<f64>,
    pub sample_rate: u32,
}

impl FeatureMatrix {
    pub fn new(values: Tensor<f64>, sample_rate: u32) -> Result<Self> {
        if values.rank() != 2 || values.cols() != N_BINS || values.rows() == 0 {
            return Err(Error::InvalidArgument(format!(
                "feature matrix must be frames x {N_BINS} with frames >= 1, got {:?}",
                values.shape()
            )));
        }
        Ok(FeatureMatrix { values, sample_rate })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn hop(&self) -> usize {
        HOP
    }

    /// Seconds between consecutive frames.
    pub fn frame_period(&self) -> f64 {
        HOP as f64 / f64::from(self.sample_rate)
    }

    fn with_values(&self, values: Tensor<f64>) -> FeatureMatrix {
        FeatureMatrix {
            values,
            sample_rate: self.sample_rate,
        }
    }
}

/// Elementwise `ln(S + eps)`.
pub fn log_amplitude(s: &FeatureMatrix, eps: f64) -> Result<FeatureMatrix> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("log eps must be positive, got {eps}")));
    }
    Ok(s.with_values(s.values.map(|v| (v + eps).ln())))
}

/// CQT followed by log amplitude.
pub fn extract(clip: &AudioClip, eps: f64) -> Result<FeatureMatrix> {
    log_amplitude(&cqt(clip)?, eps)
}

/// Scalar mean and variance pooled over every training cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub variance: f64,
}

pub fn compute_norm_stats<'a>(features: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<NormStats> {
    let feats: Vec<&FeatureMatrix> = features.into_iter().collect();
    let n: usize = feats.iter().map(|f| f.values.len()).sum();
    if n == 0 {
        return Err(Error::InvalidArgument("no cells to normalize".into()));
    }
    let cells = || feats.iter().flat_map(|f| f.values.data().iter().copied());
    let mean = cells().sum::<f64>() / n as f64;
    let variance = cells().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    if !(variance > f64::EPSILON * mean * mean) {
        return Err(Error::ZeroVariance);
    }
    Ok(NormStats { mean, variance })
}

pub fn znormalize(f: &FeatureMatrix, stats: &NormStats) -> FeatureMatrix {
    let sd = stats.variance.sqrt();
    f.with_values(f.values.map(|v| (v - stats.mean) / sd))
}

pub fn denormalize(f: &FeatureMatrix, stats: &NormStats) -> FeatureMatrix {
    let sd = stats.variance.sqrt();
    f.with_values(f.values.map(|v| v * sd + stats.mean))
}

/// Per-bin statistics, the non-default alternative to [`NormStats`].
pub fn compute_bin_norm_stats(features: &[FeatureMatrix]) -> Result<Vec<NormStats>> {
    let n: usize = features.iter().map(|f| f.frames()).sum();
    if n == 0 {
        return Err(Error::InvalidArgument("no frames to normalize".into()));
    }
    let mut mean = vec![0.0; N_BINS];
    for f in features {
        for t in 0..f.frames() {
            for (m, v) in mean.iter_mut().zip(f.values.row(t)) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; N_BINS];
    for f in features {
        for t in 0..f.frames() {
            for ((s, v), m) in var.iter_mut().zip(f.values.row(t)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
    }
    mean.into_iter()
        .zip(var)
        .map(|(mean, s)| {
            let variance = s / n as f64;
            if variance > f64::EPSILON * mean * mean {
                Ok(NormStats { mean, variance })
            } else {
                Err(Error::ZeroVariance)
            }
        })
        .collect()
}

pub fn znormalize_per_bin(f: &FeatureMatrix, stats: &[NormStats]) -> Result<FeatureMatrix> {
    if stats.len() != N_BINS {
        return Err(Error::InvalidArgument(format!("{} bin stats, expected {N_BINS}", stats.len())));
    }
    let sd: Vec<f64> = stats.iter().map(|s| s.variance.sqrt()).collect();
    let values = Tensor::from_fn(f.values.shape(), |i| {
        let b = i % N_BINS;
        (f.values.data()[i] - stats[b].mean) / sd[b]
    });
    Ok(f.with_values(values))
}

/// Start frames of the windows over `frames` frames: 0, stride, 2·stride, …
/// until a window reaches the last frame. A final window that runs past the
/// end (or the only window of a short input) is zero-padded.
pub fn segment_starts(frames: usize, window: usize, stride: usize) -> Vec<usize> {
    let mut starts = vec![0];
    while starts[starts.len() - 1] + window < frames {
        starts.push(starts[starts.len() - 1] + stride.max(1));
    }
    starts
}

/// Cuts `f` into 108-frame windows with stride 54.
pub fn segment(f: &FeatureMatrix) -> Vec<FeatureMatrix> {
    segment_with(f, SEGMENT_FRAMES, SEGMENT_STRIDE)
}

pub fn segment_with(f: &FeatureMatrix, window: usize, stride: usize) -> Vec<FeatureMatrix> {
    segment_starts(f.frames(), window, stride)
        .into_iter()
        .map(|s| {
            let avail = f.frames().saturating_sub(s).min(window);
            let mut data = vec![0.0; window * N_BINS];
            data[..avail * N_BINS].copy_from_slice(&f.values.data()[s * N_BINS..(s + avail) * N_BINS]);
            f.with_values(Tensor::new(vec![window, N_BINS], data).expect("window shape"))
        })
        .collect()
}

/// Named feature matrices plus optional normalization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub entries: Vec<(String, FeatureMatrix)>,
    pub stats: Option<NormStats>,
    pub eps: f64,
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    sample_rate: u32,
    hop: usize,
    fmin: f64,
    bins_per_octave: usize,
    eps: f64,
    stats: Option<NormStats>,
}

pub fn write_feature_cache(path: &Path, cache: &FeatureCache) -> Result<()> {
    let sample_rate = cache.entries.first().map_or(SAMPLE_RATE, |(_, f)| f.sample_rate);
    let meta = CacheMeta {
        sample_rate,
        hop: HOP,
        fmin: FMIN,
        bins_per_octave: BINS_PER_OCTAVE,
        eps: cache.eps,
        stats: cache.stats,
    };
    let meta = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let named: Vec<(String, &Tensor<f64>)> = cache.entries.iter().map(|(n, f)| (n.clone(), &f.values)).collect();
    store::write_store(path, FEATURE_FORMAT, meta, &named)?;
    Ok(())
}

pub fn read_feature_cache(path: &Path) -> Result<FeatureCache> {
    let (manifest, tensors) = store::read_store(path, FEATURE_FORMAT)?;
    let meta: CacheMeta =
        serde_json::from_value(manifest.metadata).map_err(|e| Error::Checkpoint(format!("feature metadata: {e}")))?;
    let entries = tensors
        .into_iter()
        .map(|(name, t)| Ok((name, FeatureMatrix::new(t.cast(), meta.sample_rate)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureCache {
        entries,
        stats: meta.stats,
        eps: meta.eps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(frames: usize, f: impl FnMut(usize) -> f64) -> FeatureMatrix {
        FeatureMatrix::new(Tensor::from_fn(&[frames, N_BINS], f), SAMPLE_RATE).unwrap()
    }

    #[test]
    fn log_amplitude_examples() {
        let s = fm(1, |i| if i == 0 { 0.0 } else { 1.0 - LOG_EPS });
        let l = log_amplitude(&s, LOG_EPS).unwrap();
        assert!((l.values.data()[0] - (-13.815_510_557_964_274)).abs() < 1e-12);
        assert!(l.values.data()[1].abs() < 1e-15);
        assert!(log_amplitude(&s, 0.0).is_err());
    }

    #[test]
    fn two_cell_pool() {
        let cells = [0.0, 2.0];
        let a = fm(1, |i| cells[i % 2]);
        let stats = compute_norm_stats([&a]).unwrap();
        assert!((stats.mean - 1.0).abs() < 1e-15 && (stats.variance - 1.0).abs() < 1e-15);
        let z = znormalize(&a, &stats);
        assert_eq!(&z.values.data()[..2], &[-1.0, 1.0]);
        let back = denormalize(&z, &stats);
        assert!(back.values.max_abs_diff(&a.values) < 1e-12);
    }

    #[test]
    fn constant_pool_is_rejected() {
        let a = fm(3, |_| 4.2);
        assert!(matches!(compute_norm_stats([&a]), Err(Error::ZeroVariance)));
        assert!(matches!(compute_bin_norm_stats(&[a]), Err(Error::ZeroVariance)));
    }

    #[test]
    fn segmentation_rules() {
        assert_eq!(segment_starts(323, 108, 54), vec![0, 54, 108, 162, 216]);
        assert_eq!(segment_starts(108, 108, 54), vec![0]);
        assert_eq!(segment_starts(50, 108, 54), vec![0]);
        assert_eq!(segment_starts(162, 108, 54), vec![0, 54]);
        assert_eq!(segment_starts(163, 108, 54), vec![0, 54, 108]);
        let f = fm(50, |i| i as f64 + 1.0);
        let s = segment(&f);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].frames(), 108);
        assert_eq!(s[0].values.get2(49, 143), (50 * 144) as f64);
        assert!(s[0].values.row(50).iter().all(|&v| v == 0.0));
        let f = fm(200, |i| (i / N_BINS) as f64);
        let s = segment(&f);
        assert_eq!(s.len(), 3);
        assert!(s[2].values.row(92).iter().all(|&v| v == 0.0));
        assert_eq!(s[1].values.get2(0, 0), 54.0);
        assert_eq!(s[0].values.row(54), s[1].values.row(0));
    }

    #[test]
    fn per_bin_normalization() {
        let a = fm(4, |i| (i % N_BINS + 1) as f64 * (1.0 + (i / N_BINS) as f64));
        let stats = compute_bin_norm_stats(std::slice::from_ref(&a)).unwrap();
        let z = znormalize_per_bin(&a, &stats).unwrap();
        for b in 0..N_BINS {
            let col: Vec<f64> = (0..4).map(|t| z.values.get2(t, b)).collect();
            let m: f64 = col.iter().sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
        }
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feats.json");
        let cache = FeatureCache {
            entries: vec![("a".into(), fm(2, |i| i as f64 * 0.25)), ("b".into(), fm(1, |_| -1.5))],
            stats: Some(NormStats { mean: 0.5, variance: 2.0 }),
            eps: LOG_EPS,
        };
        write_feature_cache(&path, &cache).unwrap();
        assert_eq!(read_feature_cache(&path).unwrap(), cache);
    }
}
