mod common;

use bmace::chords::{
    class_to_label, framewise_targets, parse_chord, parse_lab, to_class, Annotation, Quality, Vocab,
};
use common::{random_annotation, rng};
use proptest::prelude::*;

const SHARP: [&str; 12] = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"];
const FLAT: [&str; 12] = ["C", "Db", "D", "Eb", "E", "F", "Gb", "G", "Ab", "A", "Bb", "B"];

#[test]
fn every_class_round_trips_through_text() {
    for vocab in [Vocab::MajMin25, Vocab::Large170] {
        for k in 0..vocab.size() {
            let label = class_to_label(k, vocab).unwrap();
            assert_eq!(to_class(&label, vocab), Some(k));
            let reparsed = parse_chord(&label.to_string()).unwrap();
            assert_eq!(to_class(&reparsed, vocab), Some(k), "{label}");
        }
        assert!(class_to_label(vocab.size(), vocab).is_err());
    }
}

#[test]
fn lab_file_round_trip() {
    for seed in 0..20 {
        let ann = random_annotation(&mut rng(seed), 300).fill_gaps();
        let back = parse_lab(&ann.to_lab()).unwrap();
        assert_eq!(back.segments.len(), ann.segments.len());
        for (a, b) in ann.segments.iter().zip(&back.segments) {
            assert_eq!((a.start, a.end), (b.start, b.end));
            assert_eq!(to_class(&a.label, Vocab::Large170), to_class(&b.label, Vocab::Large170));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn enharmonic_spellings_agree(root in 0usize..12, q in 0usize..14, bass in prop::option::of(prop::sample::select(vec!["3", "5", "b7"]))) {
        let name = Quality::ALL[q].name();
        let suffix = bass.map(|b| format!("/{b}")).unwrap_or_default();
        let a = parse_chord(&format!("{}:{name}{suffix}", SHARP[root])).unwrap();
        let b = parse_chord(&format!("{}:{name}{suffix}", FLAT[root])).unwrap();
        for vocab in [Vocab::MajMin25, Vocab::Large170] {
            prop_assert_eq!(to_class(&a, vocab), to_class(&b, vocab));
        }
        prop_assert_eq!(to_class(&a, Vocab::Large170), Some(root * 14 + q));
    }

    #[test]
    fn display_then_parse_is_stable(text in prop::sample::select(common::LABEL_POOL.to_vec())) {
        let once = parse_chord(text).unwrap();
        let twice = parse_chord(&once.to_string()).unwrap();
        prop_assert_eq!(&once.to_string(), &twice.to_string());
        prop_assert_eq!(to_class(&once, Vocab::Large170), to_class(&twice, Vocab::Large170));
    }

    #[test]
    fn targets_are_in_range_and_skip_share_tracks_duration(seed in 0u64..10_000) {
        let ann: Annotation = random_annotation(&mut rng(seed), 480).fill_gaps();
        let (hop, sr) = (2048usize, 22_050u32);
        let period = hop as f64 / f64::from(sr);
        let n = (ann.end() / period).floor() as usize;
        let targets = framewise_targets(&ann, n, hop, sr, Vocab::MajMin25);
        prop_assert_eq!(targets.len(), n);
        prop_assert!(targets.iter().flatten().all(|&k| k < 25));

        // brute-force frame lookup
        for (t, target) in targets.iter().enumerate() {
            let time = t as f64 * period;
            let seg = ann.segments.iter().find(|s| s.start <= time && time < s.end).unwrap();
            prop_assert_eq!(*target, to_class(&seg.label, Vocab::MajMin25));
        }

        // each maximal unmappable run can be off by less than one frame
        let span = n as f64 * period;
        let mut share = 0.0;
        let mut runs = 0usize;
        let mut prev_skip = false;
        for s in &ann.segments {
            let skip = to_class(&s.label, Vocab::MajMin25).is_none();
            if skip && s.start < span {
                share += s.end.min(span) - s.start;
                if !prev_skip {
                    runs += 1;
                }
            }
            prev_skip = skip;
        }
        let skips = targets.iter().filter(|t| t.is_none()).count() as f64;
        prop_assert!((skips - share / period).abs() <= runs.max(1) as f64, "{} vs {}", skips, share / period);
    }
}
