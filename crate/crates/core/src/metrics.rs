//! Classification and severity metrics, evaluation reports, and the
//! leave-subject-out error analysis.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::SymptomClass;
use crate::downstream::{PredictionRow, TaskMode};
use crate::error::{Error, Result};
use crate::util::{mean, std_dev};

pub const NUM_CLASSES: usize = 3;

fn check_labels(pred: &[usize], truth: &[usize]) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::validation("metric input is empty"));
    }
    if pred.len() != truth.len() {
        return Err(Error::validation(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(&bad) = pred.iter().chain(truth).find(|&&c| c >= NUM_CLASSES) {
        return Err(Error::validation(format!("label {bad} outside 0..{NUM_CLASSES}")));
    }
    Ok(())
}

/// `m[t][p]` counts samples of true class `t` predicted as `p`.
pub fn confusion_matrix(pred: &[usize], truth: &[usize]) -> Result<[[usize; NUM_CLASSES]; NUM_CLASSES]> {
    check_labels(pred, truth)?;
    let mut m = [[0; NUM_CLASSES]; NUM_CLASSES];
    for (&p, &t) in pred.iter().zip(truth) {
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class: SymptomClass,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Per-class precision/recall/F1; undefined ratios are 0.
pub fn class_stats(pred: &[usize], truth: &[usize]) -> Result<Vec<ClassStats>> {
    let m = confusion_matrix(pred, truth)?;
    Ok((0..NUM_CLASSES)
        .map(|c| {
            let tp = m[c][c] as f64;
            let support: usize = m[c].iter().sum();
            let predicted: usize = (0..NUM_CLASSES).map(|t| m[t][c]).sum();
            let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassStats {
                class: SymptomClass::ALL[c],
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect())
}

/// Support-weighted mean of per-class F1.
pub fn weighted_f1(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let n = pred.len() as f64;
    Ok(class_stats(pred, truth)?
        .iter()
        .map(|s| s.f1 * s.support as f64 / n)
        .sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyScores {
    /// Support-weighted recall, i.e. plain accuracy.
    pub weighted: f64,
    /// Mean recall over classes present in the truth.
    pub balanced: f64,
}

pub fn accuracy_scores(pred: &[usize], truth: &[usize]) -> Result<AccuracyScores> {
    let stats = class_stats(pred, truth)?;
    let n = pred.len() as f64;
    let present: Vec<&ClassStats> = stats.iter().filter(|s| s.support > 0).collect();
    Ok(AccuracyScores {
        weighted: stats.iter().map(|s| s.recall * s.support as f64 / n).sum(),
        balanced: present.iter().map(|s| s.recall).sum::<f64>() / present.len() as f64,
    })
}

/// Mid-ranks (1-based) of `scores`, averaging over ties.
fn mid_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Binary AUC by the Mann-Whitney rank statistic; `None` if either group is empty.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = mid_ranks(scores);
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// One-vs-rest AUC averaged with support weights over the classes present.
pub fn auc_roc_ovr(probs: &[[f64; NUM_CLASSES]], truth: &[usize]) -> Result<f64> {
    if probs.is_empty() || probs.len() != truth.len() {
        return Err(Error::validation(format!(
            "{} probability rows for {} labels",
            probs.len(),
            truth.len()
        )));
    }
    if probs.iter().flatten().any(|p| !p.is_finite()) {
        return Err(Error::numeric("non-finite class probability"));
    }
    let mut total = 0.0;
    let mut weight = 0usize;
    for c in 0..NUM_CLASSES {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        let support = pos.iter().filter(|&&p| p).count();
        if let Some(a) = binary_auc(&scores, &pos) {
            total += a * support as f64;
            weight += support;
        }
    }
    if weight == 0 {
        return Err(Error::validation("AUC is undefined with a single true class"));
    }
    Ok(total / weight as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::validation(format!(
            "MAE needs equal non-empty inputs, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// `(old - new) / old`, as a fraction.
pub fn percent_change(old: f64, new: f64) -> f64 {
    (old - new) / old
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sessions: usize,
    pub weighted_f1: f64,
    pub weighted_accuracy: f64,
    pub balanced_accuracy: f64,
    /// Which accuracy the comparison table shows.
    pub comparison_accuracy: String,
    /// Absent when the evaluated set has a single true class.
    pub auc_roc: Option<f64>,
    pub mae: f64,
    pub per_class: Vec<ClassStats>,
    pub per_subject_mae: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn from_predictions(rows: &[PredictionRow]) -> Result<Self> {
        let pred: Vec<usize> = rows.iter().map(|r| r.pred_class.index()).collect();
        let truth: Vec<usize> = rows.iter().map(|r| r.true_class.index()).collect();
        let probs: Vec<[f64; 3]> = rows.iter().map(PredictionRow::probs).collect();
        let acc = accuracy_scores(&pred, &truth)?;
        let auc_roc = match auc_roc_ovr(&probs, &truth) {
            Ok(a) => Some(a),
            Err(Error::Validation(m)) => {
                log::warn!("{m}");
                None
            }
            Err(e) => return Err(e),
        };
        let mut by_subject: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in rows {
            let e = by_subject.entry(r.subject_id.clone()).or_default();
            e.0.push(r.pred_bprs);
            e.1.push(r.true_bprs);
        }
        let per_subject_mae = by_subject
            .into_iter()
            .map(|(s, (p, t))| mae(&p, &t).map(|m| (s, m)))
            .collect::<Result<_>>()?;
        Ok(Self {
            sessions: rows.len(),
            weighted_f1: weighted_f1(&pred, &truth)?,
            weighted_accuracy: acc.weighted,
            balanced_accuracy: acc.balanced,
            comparison_accuracy: "balanced".into(),
            auc_roc,
            mae: mae(
                &rows.iter().map(|r| r.pred_bprs).collect::<Vec<_>>(),
                &rows.iter().map(|r| r.true_bprs).collect::<Vec<_>>(),
            )?,
            per_class: class_stats(&pred, &truth)?,
            per_subject_mae,
        })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let pct = |v: f64| format!("{:.2}", 100.0 * v);
        let _ = writeln!(s, "sessions           {}", self.sessions);
        let _ = writeln!(s, "W.F1               {}", pct(self.weighted_f1));
        let _ = writeln!(s, "W.Acc (balanced)   {}", pct(self.balanced_accuracy));
        let _ = writeln!(s, "Acc (weighted)     {}", pct(self.weighted_accuracy));
        let _ = writeln!(s, "AUC-ROC            {}", self.auc_roc.map_or("n/a".into(), pct));
        let _ = writeln!(s, "MAE                {:.2}", self.mae);
        let _ = writeln!(s, "\nclass   precision  recall     F1  support");
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:<6} {:>10} {:>7} {:>6} {:>8}",
                c.class.label(),
                pct(c.precision),
                pct(c.recall),
                pct(c.f1),
                c.support
            );
        }
        let _ = writeln!(s, "\nsubject  MAE");
        for (subj, m) in &self.per_subject_mae {
            let _ = writeln!(s, "{subj:<8} {m:.2}");
        }
        s
    }
}

/// MAE of always predicting `constant`.
pub fn constant_mae(truth: &[f64], constant: f64) -> Result<f64> {
    mae(&vec![constant; truth.len()], truth)
}

/// One comparison-table row; metrics a mode does not train are left empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub accuracy: Option<f64>,
    pub weighted_f1: Option<f64>,
    pub auc_roc: Option<f64>,
    pub mae: Option<f64>,
}

impl ComparisonRow {
    pub fn from_report(mode: TaskMode, r: &EvalReport) -> Self {
        let cls = mode != TaskMode::Reg;
        let reg = mode != TaskMode::Cls;
        let model = match mode {
            TaskMode::Mtl => "MTL (classification + severity)",
            TaskMode::Cls => "single-task classification",
            TaskMode::Reg => "single-task severity",
        };
        Self {
            model: model.into(),
            accuracy: cls.then_some(r.balanced_accuracy),
            weighted_f1: cls.then_some(r.weighted_f1),
            auc_roc: if cls { r.auc_roc } else { None },
            mae: reg.then_some(r.mae),
        }
    }
}

pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let cell = |v: Option<f64>, pct: bool| match v {
        Some(x) if pct => format!("{:.2}", 100.0 * x),
        Some(x) => format!("{x:.2}"),
        None => "-".into(),
    };
    let mut s = String::from("model                              W.Acc    W.F1  AUC-ROC    MAE\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<32} {:>7} {:>7} {:>8} {:>6}",
            r.model,
            cell(r.accuracy, true),
            cell(r.weighted_f1, true),
            cell(r.auc_roc, true),
            cell(r.mae, false)
        );
    }
    s
}

/// Mean and population standard deviation of session severity totals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortStats {
    pub mean: f64,
    pub std: f64,
}

impl CohortStats {
    pub fn from_totals(totals: &[f64]) -> Result<Self> {
        if totals.is_empty() {
            return Err(Error::validation("no severity totals"));
        }
        Ok(Self {
            mean: mean(totals),
            std: std_dev(totals),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectImpact {
    pub subject_id: String,
    pub sessions: usize,
    pub subject_mae: f64,
    pub mean_true_bprs: f64,
    /// Distance of the subject's mean true score from the cohort mean, in SDs.
    pub z_distance: f64,
    /// Pooled MAE with this subject's sessions removed.
    pub mae_excluded: f64,
    pub drop_excluded: f64,
    /// Pooled MAE with this subject removed and the replacement sessions added.
    pub mae_replaced: Option<f64>,
    pub drop_replaced: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeaveSubjectOut {
    pub pooled_mae: f64,
    pub cohort: CohortStats,
    /// Sorted by `drop_excluded`, largest first.
    pub subjects: Vec<SubjectImpact>,
}

/// Recomputes test MAE with each subject left out. `replacement` rows, when
/// given, are added back in place of the removed subject. Without `cohort`,
/// the z-distance uses the statistics of the file itself.
pub fn leave_subject_out(
    rows: &[PredictionRow],
    replacement: Option<&[PredictionRow]>,
    cohort: Option<CohortStats>,
) -> Result<LeaveSubjectOut> {
    let errs: Vec<f64> = rows.iter().map(|r| (r.pred_bprs - r.true_bprs).abs()).collect();
    let mut subjects: Vec<&str> = rows.iter().map(|r| r.subject_id.as_str()).collect();
    subjects.sort_unstable();
    subjects.dedup();
    if subjects.len() < 2 {
        return Err(Error::validation(
            "leave-subject-out needs predictions for at least 2 subjects",
        ));
    }
    if replacement.is_some_and(|r| r.is_empty()) {
        return Err(Error::validation("replacement predictions are empty"));
    }
    let cohort = match cohort {
        Some(c) => c,
        None => CohortStats::from_totals(&rows.iter().map(|r| r.true_bprs).collect::<Vec<_>>())?,
    };
    let pooled = mean(&errs);
    let rep_errs: Vec<f64> = replacement
        .unwrap_or(&[])
        .iter()
        .map(|r| (r.pred_bprs - r.true_bprs).abs())
        .collect();
    let mut out = Vec::with_capacity(subjects.len());
    for s in subjects {
        let (mine, rest): (Vec<usize>, Vec<usize>) = (0..rows.len()).partition(|&i| rows[i].subject_id == s);
        let rest: Vec<f64> = rest.into_iter().map(|i| errs[i]).collect();
        let mine_err: Vec<f64> = mine.iter().map(|&i| errs[i]).collect();
        let mean_true = mean(&mine.iter().map(|&i| rows[i].true_bprs).collect::<Vec<_>>());
        let mae_excluded = mean(&rest);
        let mae_replaced = replacement.map(|_| {
            let mut all = rest.clone();
            all.extend_from_slice(&rep_errs);
            mean(&all)
        });
        out.push(SubjectImpact {
            subject_id: s.to_string(),
            sessions: mine.len(),
            subject_mae: mean(&mine_err),
            mean_true_bprs: mean_true,
            z_distance: if cohort.std > 0.0 {
                (mean_true - cohort.mean) / cohort.std
            } else {
                0.0
            },
            mae_excluded,
            drop_excluded: percent_change(pooled, mae_excluded),
            mae_replaced,
            drop_replaced: mae_replaced.map(|m| percent_change(pooled, m)),
        });
    }
    out.sort_by(|a, b| {
        b.drop_excluded
            .total_cmp(&a.drop_excluded)
            .then_with(|| a.subject_id.cmp(&b.subject_id))
    });
    Ok(LeaveSubjectOut {
        pooled_mae: pooled,
        cohort,
        subjects: out,
    })
}

impl LeaveSubjectOut {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "pooled test MAE {:.2} (cohort mean {:.2}, SD {:.2})\n\n",
            self.pooled_mae, self.cohort.mean, self.cohort.std
        );
        s.push_str("subject  sessions  mean BPRS  z-dist  subject MAE  MAE excl.  drop %  MAE repl.  drop %\n");
        for r in &self.subjects {
            let _ = writeln!(
                s,
                "{:<8} {:>8} {:>10.2} {:>7.2} {:>12.2} {:>10.2} {:>7.2} {:>10} {:>7}",
                r.subject_id,
                r.sessions,
                r.mean_true_bprs,
                r.z_distance,
                r.subject_mae,
                r.mae_excluded,
                100.0 * r.drop_excluded,
                r.mae_replaced.map_or("-".into(), |m| format!("{m:.2}")),
                r.drop_replaced.map_or("-".into(), |d| format!("{:.2}", 100.0 * d)),
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_examples() {
        assert!((weighted_f1(&[0, 1, 1], &[0, 0, 1]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(weighted_f1(&[2, 1, 0], &[2, 1, 0]).unwrap(), 1.0);
        let truth = [0, 1, 2, 0, 1, 2];
        assert!(weighted_f1(&[0; 6], &truth).unwrap() < 0.2);
        assert!(weighted_f1(&[], &[]).is_err());
    }

    #[test]
    fn accuracy_example() {
        let a = accuracy_scores(&[0, 0, 0, 0], &[0, 0, 0, 1]).unwrap();
        assert_eq!((a.balanced, a.weighted), (0.5, 0.75));
    }

    #[test]
    fn auc_ties_and_single_class() {
        let p = [[0.2, 0.3, 0.5]; 4];
        assert_eq!(auc_roc_ovr(&p, &[0, 1, 2, 0]).unwrap(), 0.5);
        assert!(auc_roc_ovr(&p, &[1, 1, 1, 1]).is_err());
        let sep = [[0.9, 0.05, 0.05], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]];
        assert_eq!(auc_roc_ovr(&sep, &[0, 1, 2]).unwrap(), 1.0);
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[30.0, 40.0], &[33.0, 36.0]).unwrap(), 3.5);
        assert!(mae(&[], &[]).is_err());
    }

    #[test]
    fn percent_change_values() {
        assert!((100.0 * percent_change(7.19, 5.59) - 22.25).abs() < 5e-3);
        // a 28.64% drop from 7.19 corresponds to 5.13 at two decimals
        assert_eq!(format!("{:.2}", 7.19 * (1.0 - 0.2864)), "5.13");
    }
}
