mod common;

use common::{all_pairs_auc, oracle_class_counts, oracle_weighted_auc, random_probs, rng};
use mmvq_core::data::SymptomClass;
use mmvq_core::downstream::PredictionRow;
use mmvq_core::metrics::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn labels(r: &mut impl Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..classes)).collect()
}

#[test]
fn label_metrics_match_counting_oracles() {
    let mut r = rng(31);
    for inst in 0..200 {
        let n = 1 + inst % 40;
        let classes = 1 + inst % 3;
        let truth = labels(&mut r, n, classes);
        let pred = labels(&mut r, n, 3);
        let stats = class_stats(&pred, &truth).unwrap();
        let mut wf1 = 0.0;
        let mut rec = Vec::new();
        for (c, s) in stats.iter().enumerate() {
            let (p, rc, f1, sup) = oracle_class_counts(&pred, &truth, c);
            assert_eq!(s.support, sup);
            assert!((s.precision - p).abs() < 1e-9 && (s.recall - rc).abs() < 1e-9 && (s.f1 - f1).abs() < 1e-9);
            wf1 += f1 * sup as f64 / n as f64;
            if sup > 0 {
                rec.push(rc);
            }
        }
        assert!((weighted_f1(&pred, &truth).unwrap() - wf1).abs() < 1e-9, "inst {inst}");
        let acc = accuracy_scores(&pred, &truth).unwrap();
        let correct = pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / n as f64;
        assert!((acc.weighted - correct).abs() < 1e-9);
        assert!((acc.balanced - rec.iter().sum::<f64>() / rec.len() as f64).abs() < 1e-9);
        let m = confusion_matrix(&pred, &truth).unwrap();
        assert_eq!(m.iter().flatten().sum::<usize>(), n);
    }
}

#[test]
fn auc_matches_all_pairs() {
    let mut r = rng(32);
    let mut checked = 0;
    for inst in 0..220 {
        let n = 2 + inst % 30;
        let truth = labels(&mut r, n, 3);
        let probs = random_probs(&mut r, n, 2 + (inst % 6) as u32);
        match (auc_roc_ovr(&probs, &truth), oracle_weighted_auc(&probs, &truth)) {
            (Ok(a), Some(b)) => {
                assert!((a - b).abs() < 1e-9, "inst {inst}: {a} vs {b}");
                checked += 1;
            }
            (Err(_), None) => {}
            (a, b) => panic!("inst {inst}: {a:?} vs {b:?}"),
        }
    }
    assert!(checked >= 200);
}

#[test]
fn mae_matches_loop() {
    let mut r = rng(33);
    for inst in 0..200 {
        let n = 1 + inst % 25;
        let p: Vec<f64> = (0..n).map(|_| r.random_range(18.0..126.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| r.random_range(18.0..126.0)).collect();
        let mut acc = 0.0;
        for i in 0..n {
            acc += if p[i] > t[i] { p[i] - t[i] } else { t[i] - p[i] };
        }
        assert!((mae(&p, &t).unwrap() - acc / n as f64).abs() < 1e-9);
    }
    assert!(mae(&[], &[]).is_err());
    assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn metric_input_errors() {
    assert!(weighted_f1(&[], &[]).is_err());
    assert!(weighted_f1(&[0, 3], &[0, 1]).is_err());
    assert!(auc_roc_ovr(&[[0.2, 0.3, 0.5]; 3], &[1, 1, 1]).is_err());
    assert!(auc_roc_ovr(&[[f64::NAN, 0.5, 0.5], [0.2, 0.3, 0.5]], &[0, 1]).is_err());
}

#[test]
fn percent_change_values() {
    assert!((percent_change(7.19, 5.13) - 0.2865).abs() < 5e-5);
    assert!((percent_change(7.19, 5.59) - 0.2225).abs() < 5e-5);
    assert!((constant_mae(&[1.0, 3.0], 2.0).unwrap() - 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    /// AUC depends only on the ordering of scores.
    #[test]
    fn auc_invariant_under_monotone_maps(seed in 0u64..10_000, n in 4usize..40) {
        let mut r = rng(seed);
        let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0..8) as f64) / 7.0).collect();
        let pos: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 10.0).collect();
        prop_assert_eq!(binary_auc(&scores, &pos).is_some(), all_pairs_auc(&scores, &pos).is_some());
        if let (Some(a), Some(b)) = (binary_auc(&scores, &pos), binary_auc(&mapped, &pos)) {
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((a - all_pairs_auc(&scores, &pos).unwrap()).abs() < 1e-9);
            let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
            prop_assert!((binary_auc(&flipped, &pos).unwrap() - (1.0 - a)).abs() < 1e-9);
        }
    }

    /// Metrics are functions of the multiset of (prediction, truth) pairs.
    #[test]
    fn metrics_permutation_invariant(seed in 0u64..10_000, n in 3usize..40) {
        let mut r = rng(seed);
        let truth = labels(&mut r, n, 3);
        let pred = labels(&mut r, n, 3);
        let probs = random_probs(&mut r, n, 5);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut r);
        let pt: Vec<usize> = order.iter().map(|&i| truth[i]).collect();
        let pp: Vec<usize> = order.iter().map(|&i| pred[i]).collect();
        let pq: Vec<[f64; 3]> = order.iter().map(|&i| probs[i]).collect();
        prop_assert!((weighted_f1(&pred, &truth).unwrap() - weighted_f1(&pp, &pt).unwrap()).abs() < 1e-12);
        prop_assert_eq!(accuracy_scores(&pred, &truth).unwrap(), accuracy_scores(&pp, &pt).unwrap());
        match (auc_roc_ovr(&probs, &truth), auc_roc_ovr(&pq, &pt)) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }

    #[test]
    fn scores_in_unit_interval(seed in 0u64..10_000, n in 2usize..30) {
        let mut r = rng(seed);
        let truth = labels(&mut r, n, 3);
        let pred = labels(&mut r, n, 3);
        let f1 = weighted_f1(&pred, &truth).unwrap();
        let acc = accuracy_scores(&pred, &truth).unwrap();
        for v in [f1, acc.weighted, acc.balanced] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((weighted_f1(&truth, &truth).unwrap() - 1.0).abs() < 1e-12);
    }
}

fn row(subject: &str, k: usize, t: f64, p: f64) -> PredictionRow {
    PredictionRow {
        subject_id: subject.into(),
        session_id: format!("{subject}_{k}"),
        true_class: SymptomClass::Hc,
        pred_class: SymptomClass::Hc,
        p_hc: 1.0,
        p_psz: 0.0,
        p_msz: 0.0,
        true_bprs: t,
        pred_bprs: p,
    }
}

#[test]
fn leave_subject_out_against_recomputation() {
    let mut r = rng(34);
    for _ in 0..50 {
        let subjects = r.random_range(2..7);
        let mut rows = Vec::new();
        for s in 0..subjects {
            for k in 0..r.random_range(1..4) {
                let t = r.random_range(18.0..70.0f64).round();
                rows.push(row(&format!("S{s}"), k, t, t + r.random_range(-10.0..10.0)));
            }
        }
        let lso = leave_subject_out(&rows, None, None).unwrap();
        let all: Vec<f64> = rows.iter().map(|x| (x.pred_bprs - x.true_bprs).abs()).collect();
        let pooled = all.iter().sum::<f64>() / all.len() as f64;
        assert!((lso.pooled_mae - pooled).abs() < 1e-9);
        for w in lso.subjects.windows(2) {
            assert!(w[0].drop_excluded >= w[1].drop_excluded);
        }
        for s in &lso.subjects {
            let rest: Vec<f64> = rows
                .iter()
                .filter(|x| x.subject_id != s.subject_id)
                .map(|x| (x.pred_bprs - x.true_bprs).abs())
                .collect();
            let m = rest.iter().sum::<f64>() / rest.len() as f64;
            assert!((s.mae_excluded - m).abs() < 1e-9);
            assert!((s.drop_excluded - (pooled - m) / pooled).abs() < 1e-9);
        }
    }
    assert!(leave_subject_out(&[row("A", 0, 30.0, 31.0)], None, None).is_err());
}

#[test]
fn leave_subject_out_replacement_and_outlier() {
    let mut rows: Vec<PredictionRow> = (0..6)
        .map(|i| row(&format!("S{i}"), 0, 30.0 + i as f64, 31.0 + i as f64))
        .collect();
    rows.push(row("X", 0, 62.0, 47.0));
    rows.push(row("X", 1, 61.0, 47.0));
    let cohort = CohortStats {
        mean: 33.14,
        std: 11.24,
    };
    let rep = vec![row("R", 0, 40.0, 42.0)];
    let lso = leave_subject_out(&rows, Some(&rep), Some(cohort)).unwrap();
    let top = &lso.subjects[0];
    assert_eq!(top.subject_id, "X");
    assert!(top.z_distance > 2.0);
    assert!(top.mae_excluded < lso.pooled_mae);
    assert!((top.mae_excluded - 1.0).abs() < 1e-12);
    assert!((top.mae_replaced.unwrap() - 8.0 / 7.0).abs() < 1e-12);
}

#[test]
fn report_on_perfect_predictions() {
    let rows: Vec<PredictionRow> = (0..6)
        .map(|i| {
            let c = SymptomClass::ALL[i % 3];
            let mut p = [0.0; 3];
            p[i % 3] = 1.0;
            PredictionRow {
                true_class: c,
                pred_class: c,
                p_hc: p[0],
                p_psz: p[1],
                p_msz: p[2],
                ..row(&format!("S{i}"), 0, 20.0 + i as f64, 20.0 + i as f64)
            }
        })
        .collect();
    let r = EvalReport::from_predictions(&rows).unwrap();
    assert_eq!(
        (r.weighted_f1, r.weighted_accuracy, r.balanced_accuracy, r.mae),
        (1.0, 1.0, 1.0, 0.0)
    );
    assert_eq!(r.auc_roc, Some(1.0));
    let table = r.to_table();
    assert!(table.contains("100.00"), "{table}");
}
