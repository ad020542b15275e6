//! Change in top confidence between two model versions over a traffic
//! sample, bucketed in steps of 0.1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::{OosSystem, PipelineError};

pub const BUCKETS: usize = 10;

#[derive(Debug, Error)]
pub enum DriftError {
    #[error("traffic sample is empty")]
    EmptyTraffic,
    #[error("confidence lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("query {line}: {source}")]
    Query { line: usize, source: PipelineError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    /// Fraction of queries with `|delta|` in `[i/10, (i+1)/10)`; the last
    /// bucket is closed so that a change of exactly 1 lands in it.
    pub bucket_fractions: Vec<f64>,
    pub sample_size: usize,
    pub share_under_0_1: f64,
}

pub fn bucket_of(delta: f64) -> usize {
    ((delta.abs() * BUCKETS as f64).floor() as usize).min(BUCKETS - 1)
}

pub fn drift_from_tops(a: &[f64], b: &[f64]) -> Result<DriftReport, DriftError> {
    if a.len() != b.len() {
        return Err(DriftError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(DriftError::EmptyTraffic);
    }
    let mut counts = [0usize; BUCKETS];
    for (x, y) in a.iter().zip(b) {
        counts[bucket_of(x - y)] += 1;
    }
    let n = a.len() as f64;
    let bucket_fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    Ok(DriftReport {
        share_under_0_1: bucket_fractions[0],
        bucket_fractions,
        sample_size: a.len(),
    })
}

/// Blank lines are skipped; `line` in errors is 1-based.
pub fn drift_report(a: &OosSystem, b: &OosSystem, traffic: &[String]) -> Result<DriftReport, DriftError> {
    let queries: Vec<(usize, &str)> = traffic
        .iter()
        .enumerate()
        .filter(|(_, t)| !t.trim().is_empty())
        .map(|(i, t)| (i + 1, t.as_str()))
        .collect();
    let top = |sys: &OosSystem| -> Result<Vec<f64>, DriftError> {
        let texts: Vec<&str> = queries.iter().map(|(_, t)| *t).collect();
        sys.predict_batch(&texts)
            .into_iter()
            .zip(&queries)
            .map(|(r, (line, _))| r.map(|d| d.top_confidence).map_err(|source| DriftError::Query { line: *line, source }))
            .collect()
    };
    drift_from_tops(&top(a)?, &top(b)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_tops_fill_first_bucket() {
        let t = [0.1, 0.5, 0.93];
        let r = drift_from_tops(&t, &t).unwrap();
        assert_eq!(r.share_under_0_1, 1.0);
        assert_eq!(r.sample_size, 3);
    }

    #[test]
    fn zeroed_model_buckets_by_original_top() {
        // B's factor forced to 0 means every top confidence becomes 0
        let a = [0.05, 0.42, 0.97];
        let r = drift_from_tops(&a, &[0.0; 3]).unwrap();
        let mut want = vec![0.0; BUCKETS];
        want[0] += 1.0 / 3.0;
        want[4] += 1.0 / 3.0;
        want[9] += 1.0 / 3.0;
        assert_eq!(r.bucket_fractions, want);
    }

    #[test]
    fn edges() {
        assert_eq!(bucket_of(0.0), 0);
        assert_eq!(bucket_of(0.1), 1);
        assert_eq!(bucket_of(-0.25), 2);
        assert_eq!(bucket_of(1.0), 9);
        assert!(matches!(drift_from_tops(&[], &[]), Err(DriftError::EmptyTraffic)));
        assert!(matches!(drift_from_tops(&[0.1], &[]), Err(DriftError::LengthMismatch(1, 0))));
    }

    proptest::proptest! {
        #[test]
        fn fractions_sum_to_one(pairs in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..300)) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let r = drift_from_tops(&a, &b).unwrap();
            proptest::prop_assert!((r.bucket_fractions.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }
}
