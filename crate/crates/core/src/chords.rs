//! Harte chord labels, `.lab` annotations and the 25 / 170 class vocabularies.
//!
//! Label syntax: `ROOT[:SHORTHAND][(DEGREES)][/BASS]`, `N` for no chord and
//! `X` for unknown. Degrees accept stacked `b`/`#` modifiers and a leading
//! `*` for omission, e.g. `C:maj7(*5,9)/3`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Set of pitch classes (or intervals above a root) as a 12-bit mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PcSet(u16);

impl PcSet {
    pub const EMPTY: PcSet = PcSet(0);

    pub fn from_slice(pcs: &[u8]) -> Self {
        PcSet(pcs.iter().fold(0, |m, &p| m | 1 << (p % 12)))
    }

    pub fn bits(self) -> u16 {
        self.0
    }

    pub fn contains(self, pc: u8) -> bool {
        self.0 & (1 << (pc % 12)) != 0
    }

    pub fn insert(&mut self, pc: u8) {
        self.0 |= 1 << (pc % 12);
    }

    pub fn remove(&mut self, pc: u8) {
        self.0 &= !(1 << (pc % 12));
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: PcSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn intersection(self, other: PcSet) -> PcSet {
        PcSet(self.0 & other.0)
    }

    /// Keeps only the members in `0..=max`.
    pub fn truncate(self, max: u8) -> PcSet {
        PcSet(self.0 & ((1u16 << (max + 1)) - 1))
    }

    /// Rotates every member up by `semitones`.
    pub fn transpose(self, semitones: u8) -> PcSet {
        let s = u32::from(semitones % 12);
        let m = u32::from(self.0);
        PcSet((((m << s) | (m >> (12 - s))) & 0xfff) as u16)
    }

    pub fn iter(self) -> impl Iterator<Item = u8> {
        (0..12u8).filter(move |&p| self.contains(p))
    }
}

/// The fourteen canonical qualities of the large vocabulary, in class order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quality {
    Maj,
    Min,
    Dim,
    Aug,
    Sus2,
    Sus4,
    Maj6,
    Min6,
    Dom7,
    Maj7,
    Min7,
    MinMaj7,
    Dim7,
    HalfDim7,
}

impl Quality {
    pub const ALL: [Quality; 14] = [
        Quality::Maj,
        Quality::Min,
        Quality::Dim,
        Quality::Aug,
        Quality::Sus2,
        Quality::Sus4,
        Quality::Maj6,
        Quality::Min6,
        Quality::Dom7,
        Quality::Maj7,
        Quality::Min7,
        Quality::MinMaj7,
        Quality::Dim7,
        Quality::HalfDim7,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Quality::Maj => "maj",
            Quality::Min => "min",
            Quality::Dim => "dim",
            Quality::Aug => "aug",
            Quality::Sus2 => "sus2",
            Quality::Sus4 => "sus4",
            Quality::Maj6 => "maj6",
            Quality::Min6 => "min6",
            Quality::Dom7 => "7",
            Quality::Maj7 => "maj7",
            Quality::Min7 => "min7",
            Quality::MinMaj7 => "minmaj7",
            Quality::Dim7 => "dim7",
            Quality::HalfDim7 => "hdim7",
        }
    }

    /// Intervals above the root.
    pub fn template(self) -> PcSet {
        PcSet::from_slice(match self {
            Quality::Maj => &[0, 4, 7],
            Quality::Min => &[0, 3, 7],
            Quality::Dim => &[0, 3, 6],
            Quality::Aug => &[0, 4, 8],
            Quality::Sus2 => &[0, 2, 7],
            Quality::Sus4 => &[0, 5, 7],
            Quality::Maj6 => &[0, 4, 7, 9],
            Quality::Min6 => &[0, 3, 7, 9],
            Quality::Dom7 => &[0, 4, 7, 10],
            Quality::Maj7 => &[0, 4, 7, 11],
            Quality::Min7 => &[0, 3, 7, 10],
            Quality::MinMaj7 => &[0, 3, 7, 11],
            Quality::Dim7 => &[0, 3, 6, 9],
            Quality::HalfDim7 => &[0, 3, 6, 10],
        })
    }

    /// Exact template match.
    pub fn from_template(set: PcSet) -> Option<Quality> {
        Quality::ALL.into_iter().find(|q| q.template() == set)
    }

    /// Largest template contained in `set`; ties go to the earlier quality.
    pub fn reduce(set: PcSet) -> Option<Quality> {
        if let Some(q) = Quality::from_template(set) {
            return Some(q);
        }
        let mut best: Option<Quality> = None;
        for q in Quality::ALL {
            if q.template().is_subset(set) && best.is_none_or(|b| q.template().len() > b.template().len()) {
                best = Some(q);
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChordQuality {
    Canonical(Quality),
    /// Interval set that matches none of the templates exactly.
    Intervals(PcSet),
}

impl ChordQuality {
    fn from_set(set: PcSet) -> Self {
        match Quality::from_template(set) {
            Some(q) => ChordQuality::Canonical(q),
            None => ChordQuality::Intervals(set),
        }
    }

    pub fn intervals(self) -> PcSet {
        match self {
            ChordQuality::Canonical(q) => q.template(),
            ChordQuality::Intervals(s) => s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Chord {
    /// Pitch class, C = 0.
    pub root: u8,
    pub quality: ChordQuality,
    /// Bass as a semitone interval above the root; 0 for root position.
    pub bass: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChordLabel {
    NoChord,
    Unknown,
    Chord(Chord),
}

impl ChordLabel {
    pub fn chord(root: u8, quality: Quality) -> Self {
        ChordLabel::Chord(Chord {
            root: root % 12,
            quality: ChordQuality::Canonical(quality),
            bass: 0,
        })
    }

    /// Same label mapped onto one of the canonical templates, dropping the
    /// bass. Interval sets with no contained template become `Unknown`.
    pub fn canonical(self) -> ChordLabel {
        match self {
            ChordLabel::Chord(c) => match Quality::reduce(c.quality.intervals()) {
                Some(q) => ChordLabel::chord(c.root, q),
                None => ChordLabel::Unknown,
            },
            other => other,
        }
    }
}

/// Absolute pitch classes sounded by `label`; `None` for unknown.
pub fn pitch_classes(label: &ChordLabel) -> Option<PcSet> {
    match label {
        ChordLabel::NoChord => Some(PcSet::EMPTY),
        ChordLabel::Unknown => None,
        ChordLabel::Chord(c) => Some(c.quality.intervals().transpose(c.root)),
    }
}

const SHARP_NAMES: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];
const DEGREE_NAMES: [&str; 12] = ["1", "b2", "2", "b3", "3", "4", "b5", "5", "#5", "6", "b7", "7"];

pub fn pitch_name(pc: u8) -> &'static str {
    SHARP_NAMES[(pc % 12) as usize]
}

impl fmt::Display for ChordLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChordLabel::NoChord => write!(f, "N"),
            ChordLabel::Unknown => write!(f, "X"),
            ChordLabel::Chord(c) => {
                write!(f, "{}:", pitch_name(c.root))?;
                match c.quality {
                    ChordQuality::Canonical(q) => write!(f, "{}", q.name())?,
                    ChordQuality::Intervals(s) => {
                        let parts: Vec<&str> = s.iter().map(|i| DEGREE_NAMES[i as usize]).collect();
                        write!(f, "({})", parts.join(","))?;
                    }
                }
                if c.bass != 0 {
                    write!(f, "/{}", DEGREE_NAMES[c.bass as usize])?;
                }
                Ok(())
            }
        }
    }
}

fn shorthand(name: &str) -> Option<&'static [u8]> {
    Some(match name {
        "maj" => &[0, 4, 7],
        "min" => &[0, 3, 7],
        "dim" => &[0, 3, 6],
        "aug" => &[0, 4, 8],
        "sus2" => &[0, 2, 7],
        "sus4" => &[0, 5, 7],
        "maj6" => &[0, 4, 7, 9],
        "min6" => &[0, 3, 7, 9],
        "7" => &[0, 4, 7, 10],
        "maj7" => &[0, 4, 7, 11],
        "min7" => &[0, 3, 7, 10],
        "minmaj7" => &[0, 3, 7, 11],
        "dim7" => &[0, 3, 6, 9],
        "hdim7" => &[0, 3, 6, 10],
        "9" => &[0, 4, 7, 10, 2],
        "maj9" => &[0, 4, 7, 11, 2],
        "min9" => &[0, 3, 7, 10, 2],
        "11" => &[0, 4, 7, 10, 2, 5],
        "min11" => &[0, 3, 7, 10, 2, 5],
        "13" => &[0, 4, 7, 10, 2, 5, 9],
        "maj13" => &[0, 4, 7, 11, 2, 9],
        "min13" => &[0, 3, 7, 10, 2, 5, 9],
        "1" => &[0],
        "5" => &[0, 7],
        _ => return None,
    })
}

struct Cursor<'a> {
    token: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(token: &'a str) -> Self {
        Cursor {
            token,
            bytes: token.as_bytes(),
            pos: 0,
        }
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn err(&self, column: usize, message: impl Into<String>) -> Error {
        Error::ChordParse {
            token: self.token.to_string(),
            column,
            message: message.into(),
        }
    }

    /// Stacked `#` / `b` modifiers as a signed semitone offset.
    fn modifiers(&mut self) -> i32 {
        let mut shift = 0;
        while let Some(c) = self.peek() {
            match c {
                b'#' => shift += 1,
                b'b' => shift -= 1,
                _ => break,
            }
            self.pos += 1;
        }
        shift
    }

    fn root(&mut self) -> Result<u8> {
        let natural = match self.peek() {
            Some(b'C') => 0,
            Some(b'D') => 2,
            Some(b'E') => 4,
            Some(b'F') => 5,
            Some(b'G') => 7,
            Some(b'A') => 9,
            Some(b'B') => 11,
            _ => return Err(self.err(self.pos, "expected root note A-G")),
        };
        self.pos += 1;
        let shift = self.modifiers();
        Ok((natural + shift).rem_euclid(12) as u8)
    }

    /// One scale degree: modifiers then 1..=13.
    fn degree(&mut self) -> Result<u8> {
        let start = self.pos;
        let shift = self.modifiers();
        let digits_at = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if digits_at == self.pos {
            return Err(self.err(self.pos, "expected scale degree"));
        }
        let n: u32 = self.token[digits_at..self.pos]
            .parse()
            .map_err(|_| self.err(digits_at, "bad degree number"))?;
        if !(1..=13).contains(&n) {
            return Err(self.err(start, format!("degree {n} out of range 1-13")));
        }
        const MAJOR: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];
        let base = MAJOR[((n - 1) % 7) as usize] + 12 * ((n as i32 - 1) / 7);
        Ok((base + shift).rem_euclid(12) as u8)
    }
}

/// Parses one Harte label.
pub fn parse_chord(text: &str) -> Result<ChordLabel> {
    let token = text.trim();
    if token.is_empty() {
        return Err(Error::ChordParse {
            token: text.to_string(),
            column: 0,
            message: "empty label".into(),
        });
    }
    match token {
        "N" => return Ok(ChordLabel::NoChord),
        "X" => return Ok(ChordLabel::Unknown),
        _ => {}
    }
    let mut cur = Cursor::new(token);
    let root = cur.root()?;
    let mut set: Option<PcSet> = None;
    if cur.peek() == Some(b':') {
        cur.pos += 1;
        let start = cur.pos;
        while cur.peek().is_some_and(|c| c != b'(' && c != b'/') {
            cur.pos += 1;
        }
        let name = &token[start..cur.pos];
        if name.is_empty() {
            if cur.peek() != Some(b'(') {
                return Err(cur.err(start, "expected shorthand or interval list after ':'"));
            }
            set = Some(PcSet::EMPTY);
        } else {
            let pcs = shorthand(name).ok_or_else(|| cur.err(start, format!("unknown shorthand {name:?}")))?;
            set = Some(PcSet::from_slice(pcs));
        }
    }
    let mut set = set.unwrap_or_else(|| Quality::Maj.template());
    if cur.peek() == Some(b'(') {
        cur.pos += 1;
        loop {
            match cur.peek() {
                Some(b')') => {
                    cur.pos += 1;
                    break;
                }
                None => return Err(cur.err(cur.pos, "unterminated interval list")),
                _ => {}
            }
            let omit = cur.peek() == Some(b'*');
            if omit {
                cur.pos += 1;
            }
            let pc = cur.degree()?;
            if omit {
                set.remove(pc);
            } else {
                set.insert(pc);
            }
            match cur.peek() {
                Some(b',') => cur.pos += 1,
                Some(b')') => {}
                _ => return Err(cur.err(cur.pos, "expected ',' or ')'")),
            }
        }
    }
    let mut bass = 0;
    if cur.peek() == Some(b'/') {
        cur.pos += 1;
        bass = cur.degree()?;
    }
    if cur.pos != token.len() {
        return Err(cur.err(cur.pos, "unexpected trailing characters"));
    }
    Ok(ChordLabel::Chord(Chord {
        root,
        quality: ChordQuality::from_set(set),
        bass,
    }))
}

impl FromStr for ChordLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_chord(s)
    }
}

/// Class vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Vocab {
    #[serde(rename = "majmin")]
    MajMin25,
    #[serde(rename = "large")]
    Large170,
}

impl Vocab {
    pub fn size(self) -> usize {
        match self {
            Vocab::MajMin25 => 25,
            Vocab::Large170 => 170,
        }
    }

    pub fn no_chord(self) -> usize {
        match self {
            Vocab::MajMin25 => 24,
            Vocab::Large170 => 168,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Vocab::MajMin25 => "majmin",
            Vocab::Large170 => "large",
        }
    }

    pub fn from_size(n: usize) -> Option<Vocab> {
        match n {
            25 => Some(Vocab::MajMin25),
            170 => Some(Vocab::Large170),
            _ => None,
        }
    }
}

impl FromStr for Vocab {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "majmin" | "maj-min" | "25" => Ok(Vocab::MajMin25),
            "large" | "170" => Ok(Vocab::Large170),
            other => Err(Error::Config(format!("unknown vocabulary {other:?}"))),
        }
    }
}

/// Third class used by the maj-min reduction: major third wins over minor.
fn majmin_third(set: PcSet) -> Option<bool> {
    if set.contains(4) {
        Some(true)
    } else if set.contains(3) {
        Some(false)
    } else {
        None
    }
}

/// Class id of `label`, or `None` when the label has no class (SKIP).
pub fn to_class(label: &ChordLabel, vocab: Vocab) -> Option<usize> {
    match (vocab, label) {
        (_, ChordLabel::NoChord) => Some(vocab.no_chord()),
        (Vocab::MajMin25, ChordLabel::Unknown) => None,
        (Vocab::Large170, ChordLabel::Unknown) => Some(169),
        (Vocab::MajMin25, ChordLabel::Chord(c)) => {
            majmin_third(c.quality.intervals()).map(|major| c.root as usize * 2 + usize::from(!major))
        }
        (Vocab::Large170, ChordLabel::Chord(c)) => match Quality::reduce(c.quality.intervals()) {
            Some(q) => Some(c.root as usize * 14 + q.index()),
            None => Some(169),
        },
    }
}

/// Canonical label of class `k`.
pub fn class_to_label(k: usize, vocab: Vocab) -> Result<ChordLabel> {
    if k >= vocab.size() {
        return Err(Error::InvalidArgument(format!(
            "class {k} outside {} vocabulary",
            vocab.name()
        )));
    }
    Ok(match vocab {
        Vocab::MajMin25 => match k {
            24 => ChordLabel::NoChord,
            _ => ChordLabel::chord((k / 2) as u8, if k.is_multiple_of(2) { Quality::Maj } else { Quality::Min }),
        },
        Vocab::Large170 => match k {
            168 => ChordLabel::NoChord,
            169 => ChordLabel::Unknown,
            _ => ChordLabel::chord((k / 14) as u8, Quality::ALL[k % 14]),
        },
    })
}

/// One labelled time span, `[start, end)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub label: ChordLabel,
}

/// Sorted, non-overlapping chord intervals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Annotation {
    pub segments: Vec<Segment>,
}

const TIME_EPS: f64 = 1e-9;

impl Annotation {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        for (i, s) in segments.iter().enumerate() {
            if !(s.start < s.end) {
                return Err(Error::InvalidArgument(format!(
                    "segment {i}: start {} not before end {}",
                    s.start, s.end
                )));
            }
            if i > 0 && s.start < segments[i - 1].end - TIME_EPS {
                return Err(Error::LabOverlap {
                    first: i,
                    second: i + 1,
                });
            }
        }
        Ok(Annotation { segments })
    }

    /// Convenience constructor from `(start, end, label)` triples.
    pub fn from_triples(items: &[(f64, f64, &str)]) -> Result<Self> {
        let segments = items
            .iter()
            .map(|&(start, end, l)| Ok(Segment { start, end, label: parse_chord(l)? }))
            .collect::<Result<Vec<_>>>()?;
        Annotation::new(segments)
    }

    pub fn start(&self) -> f64 {
        self.segments.first().map_or(0.0, |s| s.start)
    }

    pub fn end(&self) -> f64 {
        self.segments.last().map_or(0.0, |s| s.end)
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Label active at time `t` (half-open intervals), if any.
    pub fn label_at(&self, t: f64) -> Option<ChordLabel> {
        let i = self.segments.partition_point(|s| s.start <= t);
        if i == 0 {
            return None;
        }
        let s = &self.segments[i - 1];
        (t < s.end).then_some(s.label)
    }

    /// Inserts `N` segments into gaps between consecutive segments.
    pub fn fill_gaps(&self) -> Annotation {
        let mut out: Vec<Segment> = Vec::with_capacity(self.segments.len());
        for s in &self.segments {
            if let Some(prev) = out.last() {
                if s.start > prev.end + TIME_EPS {
                    out.push(Segment {
                        start: prev.end,
                        end: s.start,
                        label: ChordLabel::NoChord,
                    });
                }
            }
            out.push(*s);
        }
        Annotation { segments: out }
    }

    pub fn to_lab(&self) -> String {
        self.segments
            .iter()
            .map(|s| format!("{:.6}\t{:.6}\t{}\n", s.start, s.end, s.label))
            .collect()
    }
}

fn strip_comment(line: &str) -> &str {
    let bytes = line.as_bytes();
    match (0..bytes.len()).find(|&i| bytes[i] == b'#' && (i == 0 || bytes[i - 1].is_ascii_whitespace())) {
        Some(i) => &line[..i],
        None => line,
    }
}

/// Parses `.lab` text: `start end label` per line, `#` comments, LF or CRLF.
/// A `#` opens a comment only at the start of a line or after whitespace,
/// so sharps in labels survive. Lines are sorted by start time, overlaps rejected and gaps filled with `N`.
pub fn parse_lab(text: &str) -> Result<Annotation> {
    let mut rows: Vec<(usize, Segment)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let mut time = |what: &str| -> Result<f64> {
            let f = fields.next().ok_or_else(|| Error::LabParse {
                line: line_no,
                message: format!("missing {what} time"),
            })?;
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::LabParse {
                    line: line_no,
                    message: format!("non-numeric {what} time {f:?}"),
                })
        };
        let start = time("start")?;
        let end = time("end")?;
        let label_text = fields.next().ok_or_else(|| Error::LabParse {
            line: line_no,
            message: "missing label".into(),
        })?;
        if fields.next().is_some() {
            return Err(Error::LabParse {
                line: line_no,
                message: "unexpected extra fields".into(),
            });
        }
        let label = parse_chord(label_text).map_err(|e| Error::LabParse {
            line: line_no,
            message: e.to_string(),
        })?;
        if end < start {
            return Err(Error::LabParse {
                line: line_no,
                message: format!("end {end} before start {start}"),
            });
        }
        if end == start {
            continue;
        }
        rows.push((line_no, Segment { start, end, label }));
    }
    rows.sort_by(|a, b| a.1.start.total_cmp(&b.1.start));
    for w in rows.windows(2) {
        if w[1].1.start < w[0].1.end - TIME_EPS {
            let (a, b) = (w[0].0.min(w[1].0), w[0].0.max(w[1].0));
            return Err(Error::LabOverlap { first: a, second: b });
        }
    }
    let ann = Annotation {
        segments: rows.into_iter().map(|(_, s)| s).collect(),
    };
    Ok(ann.fill_gaps())
}

/// Per-frame class targets: frame `t` takes the label active at `t·hop/sr`;
/// times outside the annotation count as `N`.
pub fn framewise_targets(
    ann: &Annotation,
    n_frames: usize,
    hop: usize,
    sample_rate: u32,
    vocab: Vocab,
) -> Vec<Option<usize>> {
    (0..n_frames)
        .map(|t| {
            let time = (t * hop) as f64 / f64::from(sample_rate);
            let label = ann.label_at(time).unwrap_or(ChordLabel::NoChord);
            to_class(&label, vocab)
        })
        .collect()
}
