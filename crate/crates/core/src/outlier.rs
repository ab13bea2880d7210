//! Conformal outlier screening: p-values for fully observed test cases
//! against a shared reference sample, and Benjamini–Hochberg over a batch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::pvalue::{conformal_p, PValueResult, ScoreFunction};
use crate::types::{CalibrationSet, LabeledSample, ScoreBag, TestPoint};

/// Test cases screened against one reference sample.
#[derive(Debug, Clone)]
pub struct OutlierBatch {
    pub reference: CalibrationSet,
    pub tests: Vec<LabeledSample>,
}

impl OutlierBatch {
    pub fn new(reference: CalibrationSet, tests: Vec<LabeledSample>) -> Result<Self> {
        if tests.is_empty() {
            return Err(domain("outlier batch needs at least one test case"));
        }
        Ok(OutlierBatch { reference, tests })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BhResult {
    /// Indices into the input, ascending.
    pub rejected: Vec<usize>,
    pub q: f64,
    pub per_test_p: Vec<f64>,
}

impl BhResult {
    pub fn is_rejected(&self, index: usize) -> bool {
        self.rejected.binary_search(&index).is_ok()
    }
}

fn as_test_point(z: &LabeledSample) -> TestPoint {
    TestPoint {
        features: z.features.clone(),
        tiebreak_u: z.tiebreak_u,
    }
}

/// p-value of a fully observed test case.
pub fn outlier_p(test: &LabeledSample, reference: &CalibrationSet, score: &ScoreFunction<'_>) -> Result<PValueResult> {
    conformal_p(&test.outcome, reference, &as_test_point(test), score)
}

/// p-values of every test case in the batch. Split-mode reference scores are
/// sorted once and each test is a binary search.
pub fn outlier_pvalues(batch: &OutlierBatch, score: &ScoreFunction<'_>) -> Result<Vec<PValueResult>> {
    if score.is_split() {
        let reference = ScoreBag::new(score.score_bag(batch.reference.samples())?)?;
        let n = reference.len();
        return batch
            .tests
            .par_iter()
            .map(|z| PValueResult::new(reference.count_at_least(score.score(z, &[])?), n))
            .collect();
    }
    batch
        .tests
        .par_iter()
        .map(|z| outlier_p(z, &batch.reference, score))
        .collect()
}

/// Benjamini–Hochberg step-up: with `k* = max{k : p_(k) <= k q / m}`, reject
/// every hypothesis with `p <= p_(k*)`.
pub fn bh_procedure(pvalues: &[f64], q: f64) -> Result<BhResult> {
    if !(q > 0.0 && q < 1.0) {
        return Err(domain(format!("q must lie in (0, 1), got {q}")));
    }
    if pvalues.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(domain("p-values must lie in [0, 1]"));
    }
    let m = pvalues.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]).then(a.cmp(&b)));
    let k_star = (1..=m)
        .rev()
        .find(|&k| pvalues[order[k - 1]] <= k as f64 * q / m as f64);
    let mut rejected: Vec<usize> = match k_star {
        Some(k) => {
            let cut = pvalues[order[k - 1]];
            (0..m).filter(|&i| pvalues[i] <= cut).collect()
        }
        None => Vec::new(),
    };
    rejected.sort_unstable();
    Ok(BhResult {
        rejected,
        q,
        per_test_p: pvalues.to_vec(),
    })
}

/// Conformal p-values for the batch followed by Benjamini–Hochberg at `q`.
pub fn screen_batch(batch: &OutlierBatch, score: &ScoreFunction<'_>, q: f64) -> Result<BhResult> {
    let p: Vec<f64> = outlier_pvalues(batch, score)?.iter().map(PValueResult::value).collect();
    bh_procedure(&p, q)
}
