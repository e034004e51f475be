use std::collections::BTreeSet;
use std::path::PathBuf;

use mmvq_core::data::*;
use proptest::prelude::*;

fn record(subject: &str, k: usize) -> ManifestRecord {
    ManifestRecord {
        subject_id: subject.into(),
        session_id: format!("{subject}_{k}"),
        audio_csv: PathBuf::from("a.csv"),
        video_csv: PathBuf::from("v.csv"),
        bprs_items: vec![1; 18],
        class: None,
    }
}

fn small_cohort() -> CohortConfig {
    CohortConfig {
        subjects: 6,
        sessions_per_subject: 2,
        duration_s: (41.0, 50.0),
        extreme_subjects: 1,
        ..Default::default()
    }
}

/// Label by the rule written out directly.
fn oracle_class(items: &[u8]) -> Option<SymptomClass> {
    let mean = |idx: &[usize]| idx.iter().map(|&i| items[i] as f64).sum::<f64>() / idx.len() as f64;
    let pos = mean(&[3, 7, 11, 14]) > 3.5;
    let neg = mean(&[2, 12, 15]) > 3.5;
    match (pos, neg) {
        (false, false) => Some(SymptomClass::Hc),
        (true, false) => Some(SymptomClass::PSz),
        (true, true) => Some(SymptomClass::MSz),
        (false, true) => None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn subtype_rule_matches_oracle(items in prop::collection::vec(1u8..=7, 18)) {
        let got = assign_subtype(&items, &SubtypeConfig::default()).ok();
        prop_assert_eq!(got, oracle_class(&items));
    }

    /// Every subject lands in exactly one non-empty split and no subject straddles splits.
    #[test]
    fn split_partitions_subjects(
        sessions in prop::collection::vec(1usize..6, 3..30),
        seed in 0u64..10_000,
        pin in prop::option::of(0usize..30),
    ) {
        let n = sessions.len();
        let records: Vec<ManifestRecord> = sessions
            .iter()
            .enumerate()
            .flat_map(|(i, &k)| (0..k).map(move |j| record(&format!("S{i:03}"), j)))
            .collect();
        let mut cfg = SplitConfig::default();
        let pinned = pin.filter(|&p| p < n && n >= 4).map(|p| format!("S{p:03}"));
        cfg.pinned_test = pinned.iter().cloned().collect();
        let a = split_subjects(&records, &cfg, seed).unwrap();
        prop_assert_eq!(a.subjects.len(), n);
        let mut seen = BTreeSet::new();
        for s in [Split::Train, Split::Val, Split::Test] {
            let m = a.members(s);
            prop_assert!(!m.is_empty(), "{:?} empty", s);
            for x in m {
                prop_assert!(seen.insert(x.to_string()));
            }
        }
        if let Some(p) = pinned {
            prop_assert_eq!(a.split_of(&p), Some(Split::Test));
        }
        let again = split_subjects(&records, &cfg, seed).unwrap();
        prop_assert_eq!(a, again);
    }
}

#[test]
fn split_rejects_bad_ratios_and_unknown_pins() {
    let records: Vec<_> = (0..5).map(|i| record(&format!("S{i}"), 0)).collect();
    let bad = SplitConfig {
        train: 0.8,
        ..Default::default()
    };
    assert!(split_subjects(&records, &bad, 0).is_err());
    let pin = SplitConfig {
        pinned_test: vec!["nobody".into()],
        ..Default::default()
    };
    assert!(split_subjects(&records, &pin, 0).is_err());
    assert!(split_subjects(&records[..2], &SplitConfig::default(), 0).is_err());
}

#[test]
fn item_validation() {
    let cfg = SubtypeConfig::default();
    assert!(assign_subtype(&[1; 17], &cfg).is_err());
    let mut items = vec![1u8; 18];
    items[4] = 8;
    assert!(assign_subtype(&items, &cfg).is_err());
    items[4] = 0;
    assert!(assign_subtype(&items, &cfg).is_err());
}

#[test]
fn generator_is_byte_deterministic() {
    let cfg = small_cohort();
    let sub = SubtypeConfig::default();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_synthetic(&cfg, &sub, 9, a.path()).unwrap();
    generate_synthetic(&cfg, &sub, 9, b.path()).unwrap();
    let mut files = vec![PathBuf::from("manifest.jsonl")];
    for r in &ma.records {
        files.push(r.audio_csv.clone());
        files.push(r.video_csv.clone());
    }
    for f in files {
        let x = std::fs::read(a.path().join(&f)).unwrap();
        let y = std::fs::read(b.path().join(&f)).unwrap();
        assert!(x == y, "{} differs", f.display());
    }
    let c = tempfile::tempdir().unwrap();
    generate_synthetic(&cfg, &sub, 10, c.path()).unwrap();
    let x = std::fs::read(a.path().join("manifest.jsonl")).unwrap();
    let y = std::fs::read(c.path().join("manifest.jsonl")).unwrap();
    assert_ne!(x, y);
}

#[test]
fn manifest_round_trip_and_labels() {
    let cfg = small_cohort();
    let sub = SubtypeConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let m = generate_synthetic(&cfg, &sub, 3, dir.path()).unwrap();
    assert_eq!(m.records.len(), 14);
    let back = Manifest::read(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(back, m);
    let labels = back.labels(&sub).unwrap();
    for r in &back.records {
        let l = &labels[&r.session_id];
        assert_eq!(Some(l.class), r.class);
        assert!((BPRS_MIN_TOTAL..=BPRS_MAX_TOTAL).contains(&l.bprs_total));
    }
    let extreme = extreme_subject_ids(&cfg);
    assert_eq!(extreme, vec!["S007".to_string()]);
    for r in back.records.iter().filter(|r| r.subject_id == "S007") {
        let t = labels[&r.session_id].bprs_total;
        assert!((61..=62).contains(&t), "extreme total {t}");
        assert_eq!(r.class, Some(SymptomClass::MSz));
    }
    let r = &back.records[0];
    let (a, v) = back.load_series(r, cfg.audio_rate_hz, cfg.video_rate_hz).unwrap();
    assert_eq!(a.samples.len(), 8);
    assert_eq!(v.samples.len(), 10);

    std::fs::remove_file(dir.path().join(&r.video_csv)).unwrap();
    let err = Manifest::read(&dir.path().join("manifest.jsonl")).unwrap_err();
    assert!(err.to_string().contains("missing file"), "{err}");
}

#[test]
fn stored_class_mismatch_is_rejected() {
    let mut r = record("S1", 0);
    r.class = Some(SymptomClass::MSz);
    let m = Manifest {
        base_dir: PathBuf::new(),
        records: vec![r],
    };
    assert!(m.labels(&SubtypeConfig::default()).is_err());
}
