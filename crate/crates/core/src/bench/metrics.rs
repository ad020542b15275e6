//! Evaluation metrics for OOS detection.
//!
//! Threshold-dependent metrics come from predicted verdicts. The
//! threshold-independent ones treat in-scope as the positive class and
//! need one scalar per query, higher meaning more in scope. A metric whose
//! denominator is empty is `None`, never 0.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::Verdict;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no records to evaluate")]
    EmptyRecords,
    #[error("threshold-independent metrics need both in-scope and out-of-scope records")]
    OneClassOnly,
    #[error("record {0} has no finite score")]
    MissingScore(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scope {
    #[serde(rename = "IS")]
    InScope,
    #[serde(rename = "ID-OOS")]
    IdOos,
    #[serde(rename = "OOD-OOS")]
    OodOos,
}

impl Scope {
    pub fn is_oos(self) -> bool {
        self != Scope::InScope
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub gold_scope: Scope,
    pub gold_intent: String,
    pub predicted: Verdict,
    pub score: Option<f64>,
}

/// Counts behind the threshold-dependent metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    /// In-scope queries given the right intent.
    pub is_correct: usize,
    /// In-scope queries given another intent.
    pub is_wrong_intent: usize,
    /// In-scope queries rejected as OOS.
    pub is_rejected: usize,
    /// OOS queries rejected as OOS.
    pub oos_rejected: usize,
    /// OOS queries accepted as some intent.
    pub oos_accepted: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.is_correct + self.is_wrong_intent + self.is_rejected + self.oos_rejected + self.oos_accepted
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_acc: Option<f64>,
    pub is_acc: Option<f64>,
    pub is_f1: Option<f64>,
    pub oos_f1: Option<f64>,
    pub oos_recall: Option<f64>,
    pub fpr90: Option<f64>,
    pub fpr95: Option<f64>,
    pub auroc: Option<f64>,
    pub aupr_in: Option<f64>,
    pub aupr_out: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Confusion>,
}

impl EvalReport {
    pub const COLUMNS: [&'static str; 10] = [
        "Overall Acc",
        "IS Acc",
        "IS F1",
        "OOS F1",
        "OOS Recall",
        "FPR90",
        "FPR95",
        "AUROC",
        "AUPR In",
        "AUPR Out",
    ];

    /// Values in [`Self::COLUMNS`] order.
    pub fn values(&self) -> [Option<f64>; 10] {
        [
            self.overall_acc,
            self.is_acc,
            self.is_f1,
            self.oos_f1,
            self.oos_recall,
            self.fpr90,
            self.fpr95,
            self.auroc,
            self.aupr_in,
            self.aupr_out,
        ]
    }

    fn values_mut(&mut self) -> [&mut Option<f64>; 10] {
        [
            &mut self.overall_acc,
            &mut self.is_acc,
            &mut self.is_f1,
            &mut self.oos_f1,
            &mut self.oos_recall,
            &mut self.fpr90,
            &mut self.fpr95,
            &mut self.auroc,
            &mut self.aupr_in,
            &mut self.aupr_out,
        ]
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn evaluate_threshold_dependent(records: &[ScoreRecord]) -> Result<EvalReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let mut c = Confusion::default();
    // per gold intent: (tp, fn); per predicted intent: fp
    let mut gold: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut fp: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        let pred = r.predicted.intent();
        if r.gold_scope.is_oos() {
            match pred {
                None => c.oos_rejected += 1,
                Some(p) => {
                    c.oos_accepted += 1;
                    *fp.entry(p).or_default() += 1;
                }
            }
            continue;
        }
        let slot = gold.entry(r.gold_intent.as_str()).or_default();
        match pred {
            Some(p) if p == r.gold_intent => {
                c.is_correct += 1;
                slot.0 += 1;
            }
            Some(p) => {
                c.is_wrong_intent += 1;
                slot.1 += 1;
                *fp.entry(p).or_default() += 1;
            }
            None => {
                c.is_rejected += 1;
                slot.1 += 1;
            }
        }
    }
    let n_is = c.is_correct + c.is_wrong_intent + c.is_rejected;
    let n_oos = c.oos_rejected + c.oos_accepted;

    let is_f1 = (!gold.is_empty()).then(|| {
        let sum: f64 = gold
            .iter()
            .map(|(intent, &(tp, fn_))| {
                let fp = fp.get(intent).copied().unwrap_or(0);
                2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
            })
            .sum();
        sum / gold.len() as f64
    });
    let oos_f1 = (n_oos > 0).then(|| {
        let tp = c.oos_rejected;
        2.0 * tp as f64 / (2 * tp + c.is_rejected + c.oos_accepted) as f64
    });

    Ok(EvalReport {
        overall_acc: ratio(c.is_correct + c.oos_rejected, c.total()),
        is_acc: ratio(c.is_correct, n_is),
        is_f1,
        oos_f1,
        oos_recall: ratio(c.oos_rejected, n_oos),
        confusion: Some(c),
        ..Default::default()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdFree {
    pub fpr90: f64,
    pub fpr95: f64,
    pub auroc: f64,
    pub aupr_in: f64,
    pub aupr_out: f64,
}

/// One point per distinct score, from the highest threshold down.
/// Each point is `(tp, fp)` when everything scoring at least that value is
/// called positive.
fn sweep(labelled: &mut [(f64, bool)]) -> Vec<(usize, usize)> {
    labelled.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < labelled.len() {
        let s = labelled[i].0;
        while i < labelled.len() && labelled[i].0 == s {
            if labelled[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp, fp));
    }
    points
}

/// Lowest false-positive rate among thresholds whose true-positive rate is
/// at least `percent`%.
pub fn fpr_at_tpr(positives: &[f64], negatives: &[f64], percent: u32) -> Result<f64, MetricsError> {
    let (p, n) = (positives.len(), negatives.len());
    if p == 0 || n == 0 {
        return Err(MetricsError::OneClassOnly);
    }
    let mut all = label(positives, negatives);
    let best = sweep(&mut all)
        .into_iter()
        .filter(|&(tp, _)| tp as u64 * 100 >= u64::from(percent) * p as u64)
        .map(|(_, fp)| fp)
        .min()
        .expect("the lowest threshold reaches full recall");
    Ok(best as f64 / n as f64)
}

/// ROC area by trapezoids over the tie-grouped threshold sweep.
pub fn auroc(positives: &[f64], negatives: &[f64]) -> Result<f64, MetricsError> {
    let (p, n) = (positives.len(), negatives.len());
    if p == 0 || n == 0 {
        return Err(MetricsError::OneClassOnly);
    }
    let mut all = label(positives, negatives);
    let (mut area, mut prev) = (0.0, (0usize, 0usize));
    for (tp, fp) in sweep(&mut all) {
        // integer trapezoid: (fp - fp0) * (tp + tp0) / 2, scaled later
        area += (fp - prev.1) as f64 * (tp + prev.0) as f64;
        prev = (tp, fp);
    }
    Ok(area / (2.0 * p as f64 * n as f64))
}

/// Step-wise area under precision-recall: sum over thresholds of
/// `(R_k - R_{k-1}) * P_k`.
pub fn average_precision(positives: &[f64], negatives: &[f64]) -> Result<f64, MetricsError> {
    let p = positives.len();
    if p == 0 || negatives.is_empty() {
        return Err(MetricsError::OneClassOnly);
    }
    let mut all = label(positives, negatives);
    let (mut ap, mut prev_tp) = (0.0, 0usize);
    for (tp, fp) in sweep(&mut all) {
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / p as f64 * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    Ok(ap)
}

fn label(positives: &[f64], negatives: &[f64]) -> Vec<(f64, bool)> {
    positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect()
}

pub fn evaluate_threshold_independent(records: &[ScoreRecord]) -> Result<ThresholdFree, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let s = r.score.filter(|s| s.is_finite()).ok_or(MetricsError::MissingScore(i))?;
        if r.gold_scope.is_oos() {
            neg.push(s);
        } else {
            pos.push(s);
        }
    }
    let neg_pos: Vec<f64> = pos.iter().map(|s| -s).collect();
    let neg_neg: Vec<f64> = neg.iter().map(|s| -s).collect();
    Ok(ThresholdFree {
        fpr90: fpr_at_tpr(&pos, &neg, 90)?,
        fpr95: fpr_at_tpr(&pos, &neg, 95)?,
        auroc: auroc(&pos, &neg)?,
        aupr_in: average_precision(&pos, &neg)?,
        aupr_out: average_precision(&neg_neg, &neg_pos)?,
    })
}

/// Threshold-dependent metrics, plus the threshold-independent ones when
/// every record has a score and both classes are present.
pub fn evaluate(records: &[ScoreRecord]) -> Result<EvalReport, MetricsError> {
    let mut report = evaluate_threshold_dependent(records)?;
    if records.iter().all(|r| r.score.is_some()) {
        match evaluate_threshold_independent(records) {
            Ok(t) => {
                report.fpr90 = Some(t.fpr90);
                report.fpr95 = Some(t.fpr95);
                report.auroc = Some(t.auroc);
                report.aupr_in = Some(t.aupr_in);
                report.aupr_out = Some(t.aupr_out);
            }
            Err(MetricsError::OneClassOnly) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(report)
}

/// Unweighted mean per metric over the reports where it is present.
pub fn aggregate(reports: &[EvalReport]) -> EvalReport {
    let mut out = EvalReport::default();
    for (col, slot) in out.values_mut().into_iter().enumerate() {
        let present: Vec<f64> = reports.iter().filter_map(|r| r.values()[col]).collect();
        *slot = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    }
    out
}

/// Intents observed in gold in-scope records.
pub fn gold_intents(records: &[ScoreRecord]) -> BTreeSet<&str> {
    records
        .iter()
        .filter(|r| !r.gold_scope.is_oos())
        .map(|r| r.gold_intent.as_str())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(scope: Scope, gold: &str, pred: Option<&str>, score: f64) -> ScoreRecord {
        ScoreRecord {
            gold_scope: scope,
            gold_intent: gold.into(),
            predicted: pred.map_or(Verdict::Oos, |p| Verdict::Intent(p.into())),
            score: Some(score),
        }
    }

    #[test]
    fn hand_counted_example() {
        let r = [
            rec(Scope::InScope, "a", Some("a"), 0.9),
            rec(Scope::InScope, "b", None, 0.1),
            rec(Scope::IdOos, "x", None, 0.2),
            rec(Scope::OodOos, "y", Some("a"), 0.8),
        ];
        let e = evaluate_threshold_dependent(&r).unwrap();
        assert_eq!(e.overall_acc, Some(0.5));
        assert_eq!(e.is_acc, Some(0.5));
        assert_eq!(e.oos_recall, Some(0.5));
        // a: tp 1, fp 1 (the OOD query) -> 2/3; b: tp 0, fn 1 -> 0
        assert!((e.is_f1.unwrap() - 1.0 / 3.0).abs() < 1e-12);
        // merged OOS: tp 1, fp 1 (b rejected), fn 1 -> 2/4
        assert_eq!(e.oos_f1, Some(0.5));
        let c = e.confusion.unwrap();
        assert_eq!(e.overall_acc, Some((c.is_correct + c.oos_rejected) as f64 / c.total() as f64));
    }

    #[test]
    fn perfect_and_degenerate() {
        let r = [
            rec(Scope::InScope, "a", Some("a"), 0.9),
            rec(Scope::InScope, "b", Some("b"), 0.8),
            rec(Scope::IdOos, "x", None, 0.1),
        ];
        let e = evaluate(&r).unwrap();
        for (name, v) in EvalReport::COLUMNS.iter().zip(e.values()) {
            let want = if name.starts_with("FPR") { 0.0 } else { 1.0 };
            assert_eq!(v, Some(want), "{name}");
        }

        let all_rejected = [rec(Scope::InScope, "a", None, 0.1), rec(Scope::InScope, "b", None, 0.1)];
        let e = evaluate(&all_rejected).unwrap();
        assert_eq!(e.overall_acc, Some(0.0));
        assert_eq!(e.oos_f1, None);
        assert_eq!(e.oos_recall, None);
        assert_eq!(e.auroc, None);
        assert_eq!(evaluate(&[]), Err(MetricsError::EmptyRecords));
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4, 0.4], &[0.4, 0.4]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.3], &[0.5]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9], &[]), Err(MetricsError::OneClassOnly));
    }

    #[test]
    fn fpr_examples() {
        // TPR >= 90% with 10 positives needs 9 of them
        let pos: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        let neg = [8.5, 1.5, 0.0];
        assert_eq!(fpr_at_tpr(&pos, &neg, 90).unwrap(), 1.0 / 3.0);
        assert_eq!(fpr_at_tpr(&pos, &neg, 95).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn average_precision_by_hand() {
        // ranking: P(0.9) N(0.8) P(0.7): AP = 1/2*1 + 1/2*2/3
        let ap = average_precision(&[0.9, 0.7], &[0.8]).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn scores_are_required_for_threshold_free() {
        let mut r = vec![rec(Scope::InScope, "a", Some("a"), 0.9), rec(Scope::IdOos, "x", None, 0.1)];
        r[0].score = None;
        assert_eq!(evaluate_threshold_independent(&r), Err(MetricsError::MissingScore(0)));
        let e = evaluate(&r).unwrap();
        assert!(e.auroc.is_none() && e.overall_acc.is_some());
    }

    #[test]
    fn aggregate_skips_absent() {
        let a = EvalReport { overall_acc: Some(0.8), auroc: None, ..Default::default() };
        let b = EvalReport { overall_acc: Some(0.6), auroc: Some(0.9), ..Default::default() };
        let m = aggregate(&[a, b]);
        assert!((m.overall_acc.unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(m.auroc, Some(0.9));
        assert_eq!(m.is_acc, None);
    }

    fn pairwise(pos: &[f64], neg: &[f64]) -> f64 {
        let mut s = 0.0;
        for p in pos {
            for n in neg {
                s += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        s / (pos.len() * neg.len()) as f64
    }

    proptest::proptest! {
        #[test]
        fn auroc_matches_pairwise_and_fpr_is_ordered(
            pos in proptest::collection::vec(0u8..20, 1..100),
            neg in proptest::collection::vec(0u8..20, 1..100),
        ) {
            let pos: Vec<f64> = pos.into_iter().map(|x| f64::from(x) / 20.0).collect();
            let neg: Vec<f64> = neg.into_iter().map(|x| f64::from(x) / 20.0).collect();
            proptest::prop_assert!((auroc(&pos, &neg).unwrap() - pairwise(&pos, &neg)).abs() <= 1e-9);
            proptest::prop_assert!(fpr_at_tpr(&pos, &neg, 90).unwrap() <= fpr_at_tpr(&pos, &neg, 95).unwrap());
        }

        #[test]
        fn overall_acc_follows_confusion(rows in proptest::collection::vec((0u8..3, 0u8..3, 0u8..4), 1..60)) {
            let records: Vec<ScoreRecord> = rows
                .into_iter()
                .map(|(scope, gold, pred)| {
                    let scope = [Scope::InScope, Scope::IdOos, Scope::OodOos][scope as usize];
                    let pred = (pred < 3).then(|| ["a", "b", "c"][pred as usize]);
                    rec(scope, ["a", "b", "c"][gold as usize], pred, 0.5)
                })
                .collect();
            let e = evaluate_threshold_dependent(&records).unwrap();
            let c = e.confusion.unwrap();
            proptest::prop_assert_eq!(c.total(), records.len());
            proptest::prop_assert_eq!(e.overall_acc, Some((c.is_correct + c.oos_rejected) as f64 / c.total() as f64));
        }
    }
}
