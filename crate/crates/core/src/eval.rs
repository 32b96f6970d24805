//! Duration-weighted chord symbol recall under seven comparators.
//!
//! Both labels are first reduced to a canonical template (bass dropped).
//! A reference of `X` is skipped by every comparator.

use serde::{Deserialize, Serialize};

use crate::chords::{to_class, Annotation, ChordLabel, PcSet, Quality, Segment, Vocab};
use crate::error::{Error, Result};

pub use crate::chords::pitch_classes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparator {
    Root,
    Thirds,
    Triads,
    Sevenths,
    Tetrads,
    MajMin,
    Mirex,
}

impl Comparator {
    pub const ALL: [Comparator; 7] = [
        Comparator::Root,
        Comparator::Thirds,
        Comparator::Triads,
        Comparator::Sevenths,
        Comparator::Tetrads,
        Comparator::MajMin,
        Comparator::Mirex,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Comparator::Root => "root",
            Comparator::Thirds => "thirds",
            Comparator::Triads => "triads",
            Comparator::Sevenths => "sevenths",
            Comparator::Tetrads => "tetrads",
            Comparator::MajMin => "majmin",
            Comparator::Mirex => "mirex",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Match,
    Mismatch,
    Skip,
}

impl Outcome {
    fn from_bool(b: bool) -> Self {
        if b {
            Outcome::Match
        } else {
            Outcome::Mismatch
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Third {
    Major,
    Minor,
    None,
}

fn third(set: PcSet) -> Third {
    if set.contains(4) {
        Third::Major
    } else if set.contains(3) {
        Third::Minor
    } else {
        Third::None
    }
}

/// Root and template of a canonical chord; `None` for `N`.
fn parts(label: &ChordLabel) -> Option<(u8, PcSet)> {
    match label {
        ChordLabel::Chord(c) => Some((c.root, c.quality.intervals())),
        _ => None,
    }
}

const SEVENTHS_DOMAIN: [Quality; 5] = [Quality::Maj, Quality::Min, Quality::Dom7, Quality::Maj7, Quality::Min7];

/// Judges `est` against `ref_label` under comparator `c`.
pub fn compare(c: Comparator, ref_label: &ChordLabel, est_label: &ChordLabel) -> Outcome {
    let r = ref_label.canonical();
    let e = est_label.canonical();
    if r == ChordLabel::Unknown {
        return Outcome::Skip;
    }
    if c == Comparator::Sevenths {
        if let ChordLabel::Chord(ch) = r {
            let in_domain = SEVENTHS_DOMAIN
                .iter()
                .any(|q| ch.quality.intervals() == q.template());
            if !in_domain {
                return Outcome::Skip;
            }
        }
    }
    match c {
        Comparator::MajMin => match to_class(&r, Vocab::MajMin25) {
            None => Outcome::Skip,
            Some(k) => Outcome::from_bool(to_class(&e, Vocab::MajMin25) == Some(k)),
        },
        Comparator::Mirex => {
            let rp = pitch_classes(&r).unwrap_or_default();
            match pitch_classes(&e) {
                None => Outcome::Mismatch,
                Some(ep) if rp.is_empty() || ep.is_empty() => Outcome::from_bool(rp.is_empty() && ep.is_empty()),
                Some(ep) => Outcome::from_bool(rp.intersection(ep).len() >= 3),
            }
        }
        _ => {
            if e == ChordLabel::Unknown {
                return Outcome::Mismatch;
            }
            match (parts(&r), parts(&e)) {
                (None, None) => Outcome::Match,
                (None, Some(_)) | (Some(_), None) => Outcome::Mismatch,
                (Some((rr, rs)), Some((er, es))) => Outcome::from_bool(
                    rr == er
                        && match c {
                            Comparator::Root => true,
                            Comparator::Thirds => third(rs) == third(es),
                            Comparator::Triads => rs.truncate(8) == es.truncate(8),
                            _ => rs == es,
                        },
                ),
            }
        }
    }
}

/// Recall under one comparator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    /// `None` when every reference segment was skipped.
    pub score: Option<f64>,
    /// Seconds of reference time the comparator judged.
    pub duration: f64,
}

/// Merged partition of the reference span into pieces with constant labels
/// on both sides. The estimate is extended with `N` where it is silent.
pub fn merged_segments(ref_ann: &Annotation, est: &Annotation) -> Result<Vec<(f64, ChordLabel, ChordLabel)>> {
    if ref_ann.is_empty() {
        return Err(Error::InvalidArgument("empty reference annotation".into()));
    }
    let (lo, hi) = (ref_ann.start(), ref_ann.end());
    let mut cuts: Vec<f64> = ref_ann
        .segments
        .iter()
        .chain(&est.segments)
        .flat_map(|s| [s.start, s.end])
        .filter(|&t| t >= lo && t <= hi)
        .collect();
    cuts.push(lo);
    cuts.push(hi);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    Ok(cuts
        .windows(2)
        .filter_map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            let r = ref_ann.label_at(mid)?;
            let e = est.label_at(mid).unwrap_or(ChordLabel::NoChord);
            Some((w[1] - w[0], r, e))
        })
        .collect())
}

pub fn wcsr(ref_ann: &Annotation, est: &Annotation, c: Comparator) -> Result<Recall> {
    let pieces = merged_segments(ref_ann, est)?;
    Ok(recall_of(&pieces, c))
}

fn recall_of(pieces: &[(f64, ChordLabel, ChordLabel)], c: Comparator) -> Recall {
    let (mut matched, mut judged) = (0.0, 0.0);
    for (d, r, e) in pieces {
        match compare(c, r, e) {
            Outcome::Match => {
                matched += d;
                judged += d;
            }
            Outcome::Mismatch => judged += d,
            Outcome::Skip => {}
        }
    }
    Recall {
        score: (judged > 0.0).then(|| matched / judged),
        duration: judged,
    }
}

/// One value per comparator, serialized under the fixed metric names.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerMetric<T> {
    pub root: T,
    pub thirds: T,
    pub triads: T,
    pub sevenths: T,
    pub tetrads: T,
    pub majmin: T,
    pub mirex: T,
}

impl<T: Copy> PerMetric<T> {
    pub fn from_fn(mut f: impl FnMut(Comparator) -> T) -> Self {
        PerMetric {
            root: f(Comparator::Root),
            thirds: f(Comparator::Thirds),
            triads: f(Comparator::Triads),
            sevenths: f(Comparator::Sevenths),
            tetrads: f(Comparator::Tetrads),
            majmin: f(Comparator::MajMin),
            mirex: f(Comparator::Mirex),
        }
    }

    pub fn get(&self, c: Comparator) -> T {
        match c {
            Comparator::Root => self.root,
            Comparator::Thirds => self.thirds,
            Comparator::Triads => self.triads,
            Comparator::Sevenths => self.sevenths,
            Comparator::Tetrads => self.tetrads,
            Comparator::MajMin => self.majmin,
            Comparator::Mirex => self.mirex,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(flatten)]
    pub scores: PerMetric<Option<f64>>,
    pub durations: PerMetric<f64>,
    /// Length of the reference span in seconds.
    pub total_duration: f64,
}

pub fn evaluate_all(ref_ann: &Annotation, est: &Annotation) -> Result<EvalResult> {
    let pieces = merged_segments(ref_ann, est)?;
    let recalls = PerMetric::from_fn(|c| recall_of(&pieces, c));
    Ok(EvalResult {
        scores: PerMetric::from_fn(|c| recalls.get(c).score),
        durations: PerMetric::from_fn(|c| recalls.get(c).duration),
        total_duration: ref_ann.end() - ref_ann.start(),
    })
}

/// Intervals from per-frame classes: frame `t` covers
/// `[max(0, (t - 1/2)·period), (t + 1/2)·period)`, runs of equal classes merged.
pub fn frames_to_annotation(classes: &[usize], vocab: Vocab, frame_period: f64) -> Result<Annotation> {
    let mut segments: Vec<Segment> = Vec::new();
    let edge = |t: usize| ((t as f64 - 0.5) * frame_period).max(0.0);
    let mut t = 0;
    while t < classes.len() {
        let k = classes[t];
        let mut u = t + 1;
        while u < classes.len() && classes[u] == k {
            u += 1;
        }
        segments.push(Segment {
            start: edge(t),
            end: edge(u),
            label: crate::chords::class_to_label(k, vocab)?,
        });
        t = u;
    }
    Annotation::new(segments)
}

/// Corpus-level summary over songs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    /// Total matched duration over total judged duration.
    pub weighted: PerMetric<Option<f64>>,
    /// Unweighted mean of the defined per-song scores.
    pub song_mean: PerMetric<Option<f64>>,
    pub durations: PerMetric<f64>,
    pub songs: usize,
}

pub fn aggregate(results: &[EvalResult]) -> Aggregate {
    let weighted = PerMetric::from_fn(|c| {
        let (mut m, mut d) = (0.0, 0.0);
        for r in results {
            if let Some(s) = r.scores.get(c) {
                m += s * r.durations.get(c);
                d += r.durations.get(c);
            }
        }
        (d > 0.0).then(|| m / d)
    });
    let song_mean = PerMetric::from_fn(|c| {
        let defined: Vec<f64> = results.iter().filter_map(|r| r.scores.get(c)).collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    });
    Aggregate {
        weighted,
        song_mean,
        durations: PerMetric::from_fn(|c| results.iter().map(|r| r.durations.get(c)).sum()),
        songs: results.len(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongRecord {
    pub id: String,
    #[serde(flatten)]
    pub result: EvalResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub songs: Vec<SongRecord>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn new(songs: Vec<SongRecord>) -> Self {
        let results: Vec<EvalResult> = songs.iter().map(|s| s.result).collect();
        EvalReport {
            aggregate: aggregate(&results),
            songs,
        }
    }
}
