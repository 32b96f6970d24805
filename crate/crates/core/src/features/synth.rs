//! Additive chord synthesis and random progressions for synthetic corpora.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::chords::{pitch_classes, Annotation, ChordLabel, Quality, Segment, Vocab};
use crate::error::{Error, Result};

use super::AudioClip;

pub const HARMONICS: usize = 4;
pub const OCTAVES: [i32; 2] = [3, 4];
pub const FADE_S: f64 = 0.010;
pub const PEAK: f64 = 0.5;
/// -40 dB relative to full scale.
pub const NOISE_STD: f64 = 0.01;

/// Frequency of pitch class `pc` in scientific octave `octave` (A4 = 440 Hz).
pub fn note_frequency(pc: u8, octave: i32) -> f64 {
    let midi = 12 * (octave + 1) + i32::from(pc);
    440.0 * 2f64.powf(f64::from(midi - 69) / 12.0)
}

fn rise(tau: f64) -> f64 {
    if tau <= 0.0 {
        0.0
    } else if tau >= FADE_S {
        1.0
    } else {
        0.5 - 0.5 * (std::f64::consts::PI * tau / FADE_S).cos()
    }
}

/// Renders `progression` (assumed to start at 0 s) as audio. Each chord
/// sounds its pitch classes in octaves 3 and 4 with four harmonics at
/// amplitude 1/h; boundaries cross-fade over 10 ms.
pub fn synth_chord_clip(progression: &Annotation, sample_rate: u32, seed: u64) -> Result<AudioClip> {
    if progression.is_empty() {
        return Err(Error::InvalidArgument("empty progression".into()));
    }
    let sr = f64::from(sample_rate);
    let total = (progression.end() * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tone = vec![0.0f64; total];
    let segs = &progression.segments;
    for (i, seg) in segs.iter().enumerate() {
        let pcs = pitch_classes(&seg.label).ok_or_else(|| {
            Error::InvalidArgument(format!("cannot synthesize label {} at {:.3} s", seg.label, seg.start))
        })?;
        let first = i == 0;
        let last = i + 1 == segs.len();
        let on = if first { seg.start } else { seg.start - FADE_S / 2.0 };
        let off = if last { seg.end } else { seg.end + FADE_S / 2.0 };
        let n0 = ((on * sr).floor().max(0.0)) as usize;
        let n1 = ((off * sr).ceil() as usize).min(total);
        let env: Vec<f64> = (n0..n1)
            .map(|n| {
                let t = n as f64 / sr;
                let a = if first { 1.0 } else { rise(t - on) };
                let b = if last { 1.0 } else { 1.0 - rise(t - (seg.end - FADE_S / 2.0)) };
                a * b
            })
            .collect();
        for pc in pcs.iter() {
            for &oct in &OCTAVES {
                let f0 = note_frequency(pc, oct);
                for h in 1..=HARMONICS {
                    let f = f0 * h as f64;
                    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    if f >= sr / 2.0 {
                        continue;
                    }
                    let amp = 1.0 / h as f64;
                    let w = std::f64::consts::TAU * f / sr;
                    let (ws, wc) = w.sin_cos();
                    // phasor rotation, resynchronised every 4096 samples
                    let (mut s, mut c) = (0.0, 0.0);
                    for (k, (n, e)) in (n0..n1).zip(&env).enumerate() {
                        if k % 4096 == 0 {
                            (s, c) = (w * n as f64 + phase).sin_cos();
                        }
                        tone[n] += amp * e * s;
                        (s, c) = (s * wc + c * ws, c * wc - s * ws);
                    }
                }
            }
        }
    }
    let peak = tone.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = PEAK / peak;
        tone.iter_mut().for_each(|v| *v *= g);
    }
    let noise = Normal::new(0.0, NOISE_STD).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    for v in &mut tone {
        *v = (*v + noise.sample(&mut rng)).clamp(-1.0, 1.0);
    }
    AudioClip::new(tone, sample_rate)
}

/// Settings for random chord progressions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProgressionConfig {
    pub seconds: f64,
    pub min_chord_s: f64,
    pub max_chord_s: f64,
    /// Probability that a segment is `N`.
    pub no_chord_prob: f64,
    pub vocab: Vocab,
}

impl Default for ProgressionConfig {
    fn default() -> Self {
        ProgressionConfig {
            seconds: 15.0,
            min_chord_s: 1.0,
            max_chord_s: 3.0,
            no_chord_prob: 0.08,
            vocab: Vocab::MajMin25,
        }
    }
}

/// Random progression filling `[0, seconds)`; consecutive segments differ.
pub fn random_progression<R: Rng>(cfg: &ProgressionConfig, rng: &mut R) -> Result<Annotation> {
    if !(cfg.seconds > 0.0 && cfg.min_chord_s > 0.0 && cfg.min_chord_s <= cfg.max_chord_s) {
        return Err(Error::Config(format!("bad progression config {cfg:?}")));
    }
    let qualities: &[Quality] = match cfg.vocab {
        Vocab::MajMin25 => &[Quality::Maj, Quality::Min],
        Vocab::Large170 => &Quality::ALL,
    };
    let mut segments: Vec<Segment> = Vec::new();
    let mut t = 0.0;
    while t < cfg.seconds {
        let dur = rng.random_range(cfg.min_chord_s..=cfg.max_chord_s);
        let end = (t + dur).min(cfg.seconds);
        let label = loop {
            let l = if rng.random_bool(cfg.no_chord_prob) {
                ChordLabel::NoChord
            } else {
                let q = qualities[rng.random_range(0..qualities.len())];
                ChordLabel::chord(rng.random_range(0..12u8), q)
            };
            if segments.last().is_none_or(|s| s.label != l) {
                break l;
            }
        };
        segments.push(Segment { start: t, end, label });
        t = end;
    }
    Annotation::new(segments)
}

/// One element of a synthetic corpus.
#[derive(Debug, Clone)]
pub struct SyntheticClip {
    pub id: String,
    pub annotation: Annotation,
    pub audio: AudioClip,
}

/// `n` clips with independent progressions, deterministic in `seed`.
pub fn synth_corpus(n: usize, cfg: &ProgressionConfig, sample_rate: u32, seed: u64) -> Result<Vec<SyntheticClip>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let annotation = random_progression(cfg, &mut rng)?;
            let clip_seed: u64 = rng.random();
            let audio = synth_chord_clip(&annotation, sample_rate, clip_seed)?;
            Ok(SyntheticClip {
                id: format!("synth_{i:04}"),
                annotation,
                audio,
            })
        })
        .collect()
}
