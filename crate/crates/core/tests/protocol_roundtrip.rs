use std::path::Path;

use proptest::prelude::*;
use sasv::protocol::{
    parse_scores_str, parse_trials, parse_trials_str, read_features, read_scores, write_features,
    write_scores, write_trials, Trial, LFT1_HEADER_LEN,
};
use sasv::{Error, LayeredFeatures, ScoreSet, TrialLabel, TrialSet};

fn p() -> &'static Path {
    Path::new("mem")
}

fn label_strategy() -> impl Strategy<Value = TrialLabel> {
    prop_oneof![
        Just(TrialLabel::Target),
        Just(TrialLabel::Nontarget),
        Just(TrialLabel::Spoof),
        Just(TrialLabel::Unknown),
    ]
}

fn features_strategy() -> impl Strategy<Value = LayeredFeatures> {
    (1usize..4, 1usize..6, 1usize..5).prop_flat_map(|(l, t, d)| {
        prop::collection::vec(-1e6f32..1e6f32, l * t * d).prop_map(move |v| {
            LayeredFeatures::new(l, t, d, v.into_iter().map(f64::from).collect()).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn lft1_roundtrip_is_exact_for_f32_values(f in features_strategy()) {
        let bytes = f.to_lft1_bytes();
        prop_assert_eq!(bytes.len(), LFT1_HEADER_LEN + 4 * f.as_slice().len());
        let back = LayeredFeatures::from_lft1_bytes(&bytes, p()).unwrap();
        prop_assert_eq!(back, f);
    }

    #[test]
    fn lft1_rejects_every_truncation(f in features_strategy(), cut in 0usize..1000) {
        let bytes = f.to_lft1_bytes();
        let cut = cut % bytes.len();
        prop_assert!(LayeredFeatures::from_lft1_bytes(&bytes[..cut], p()).is_err());
    }

    #[test]
    fn trials_roundtrip(labels in prop::collection::vec(label_strategy(), 0..40)) {
        let mut set = TrialSet::new();
        for (i, label) in labels.iter().enumerate() {
            set.push(Trial {
                trial_id: format!("t{i}"),
                enroll_id: format!("e{}", i % 3),
                test_id: format!("x{i}"),
                label: *label,
            }).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trials.txt");
        write_trials(&path, &set).unwrap();
        let back = parse_trials(&path).unwrap();
        prop_assert_eq!(back.trials(), set.trials());
        for l in [TrialLabel::Target, TrialLabel::Nontarget, TrialLabel::Spoof, TrialLabel::Unknown] {
            prop_assert_eq!(back.count(l), labels.iter().filter(|x| **x == l).count());
        }
    }

    #[test]
    fn scores_roundtrip_bit_exact(values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 0..40)) {
        let mut set = ScoreSet::new("sys");
        for (i, v) in values.iter().enumerate() {
            set.insert(format!("t{i}"), *v).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sys.txt");
        write_scores(&path, &set).unwrap();
        let back = read_scores(&path).unwrap();
        prop_assert_eq!(back.system_tag.as_str(), "sys");
        prop_assert_eq!(back.ids(), set.ids());
        for (a, b) in back.scores().iter().zip(set.scores()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn lft1_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.lft");
    let f = LayeredFeatures::new(2, 3, 2, (0..12).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap();
    write_features(&path, &f).unwrap();
    assert_eq!(read_features(&path).unwrap(), f);
    assert!(matches!(read_features(dir.path().join("none.lft")), Err(Error::Io { .. })));
}

#[test]
fn lft1_header_errors() {
    let f = LayeredFeatures::new(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let good = f.to_lft1_bytes();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    assert!(matches!(
        LayeredFeatures::from_lft1_bytes(&bad_magic, p()),
        Err(Error::BadMagic { .. })
    ));

    let short = &good[..good.len() - 1];
    assert!(matches!(
        LayeredFeatures::from_lft1_bytes(short, p()),
        Err(Error::Truncated { expected: 36, found: 35, .. })
    ));

    let mut long = good.clone();
    long.push(0);
    assert!(matches!(
        LayeredFeatures::from_lft1_bytes(&long, p()),
        Err(Error::Format { .. })
    ));

    let mut empty = good.clone();
    empty[12..16].copy_from_slice(&0u32.to_le_bytes());
    assert!(matches!(
        LayeredFeatures::from_lft1_bytes(&empty[..20], p()),
        Err(Error::Format { .. })
    ));

    let mut nan = good.clone();
    nan[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
    assert!(matches!(
        LayeredFeatures::from_lft1_bytes(&nan, p()),
        Err(Error::NonFinite(_))
    ));
}

#[test]
fn trial_parse_errors_carry_line_numbers() {
    let cases = [
        ("t1 e x target\nt2 e x\n", 2),
        ("t1 e x target\n\nt1 e y spoof\n", 3),
        ("t1 e x bonafide\n", 1),
    ];
    for (text, line) in cases {
        match parse_trials_str(text, p()) {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
    let ok = parse_trials_str("\n  t1\te  x   nontarget  \n", p()).unwrap();
    assert_eq!(ok.count(TrialLabel::Nontarget), 1);
}

#[test]
fn score_parse_errors() {
    for (text, line) in [
        ("a 1.0\nb\n", 2),
        ("a one\n", 1),
        ("a inf\n", 1),
        ("a NaN\n", 1),
        ("a 1\na 2\n", 2),
    ] {
        match parse_scores_str(text, p(), "s") {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
    let s = parse_scores_str("a -1e-3\nb 2\n", p(), "s").unwrap();
    assert_eq!(s.get("a"), Some(-1e-3));
    assert_eq!(s.get("c"), None);
}
