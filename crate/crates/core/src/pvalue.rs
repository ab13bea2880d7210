//! Generic conformal machinery: the rank-based p-function, prediction sets
//! by test inversion, and tie-breaking.
//!
//! For a hypothesized outcome `y` the augmented bag is
//! `D(y) = {Z_1, ..., Z_n, (x, y)}` and
//!
//! ```text
//! p(y) = (1 + #{i <= n : s(test; D(y)) <= s(Z_i; D(y))}) / (n + 1)
//! ```
//!
//! Ties are resolved by the `<=`, which is conservative.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_alpha, domain, Result};
use crate::set::{PredictionSet, Region};
use crate::types::{CalibrationSet, LabeledSample, Outcome, ScoreBag, TestPoint};

type SplitFn<'a> = dyn Fn(&LabeledSample) -> Result<f64> + Send + Sync + 'a;
type FullFn<'a> = dyn Fn(&LabeledSample, &[LabeledSample]) -> Result<f64> + Send + Sync + 'a;

/// A nonconformity score.
///
/// `Split` scores are fixed functions of one case. `Full` scores also see the
/// hypothesized bag and may refit a model on it; they must depend on the bag
/// only as an unordered collection.
pub enum ScoreFunction<'a> {
    Split(Box<SplitFn<'a>>),
    Full(Box<FullFn<'a>>),
}

impl<'a> ScoreFunction<'a> {
    pub fn split(f: impl Fn(&LabeledSample) -> f64 + Send + Sync + 'a) -> Self {
        ScoreFunction::Split(Box::new(move |z| Ok(f(z))))
    }

    pub fn try_split(f: impl Fn(&LabeledSample) -> Result<f64> + Send + Sync + 'a) -> Self {
        ScoreFunction::Split(Box::new(f))
    }

    pub fn full(f: impl Fn(&LabeledSample, &[LabeledSample]) -> f64 + Send + Sync + 'a) -> Self {
        ScoreFunction::Full(Box::new(move |z, bag| Ok(f(z, bag))))
    }

    pub fn try_full(f: impl Fn(&LabeledSample, &[LabeledSample]) -> Result<f64> + Send + Sync + 'a) -> Self {
        ScoreFunction::Full(Box::new(f))
    }

    pub fn is_split(&self) -> bool {
        matches!(self, ScoreFunction::Split(_))
    }

    /// Score of `z` relative to `bag` (ignored in split mode).
    pub fn score(&self, z: &LabeledSample, bag: &[LabeledSample]) -> Result<f64> {
        let s = match self {
            ScoreFunction::Split(f) => f(z)?,
            ScoreFunction::Full(f) => f(z, bag)?,
        };
        if s.is_nan() {
            return Err(domain("score function returned NaN"));
        }
        Ok(s)
    }

    /// Scores of every member of `bag`, each evaluated against the whole bag.
    pub fn score_bag(&self, bag: &[LabeledSample]) -> Result<Vec<f64>> {
        bag.iter().map(|z| self.score(z, bag)).collect()
    }
}

impl fmt::Debug for ScoreFunction<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreFunction::Split(_) => f.write_str("ScoreFunction::Split(..)"),
            ScoreFunction::Full(_) => f.write_str("ScoreFunction::Full(..)"),
        }
    }
}

/// A classical conformal p-value `(1 + rank_count) / (n + 1)`, held exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PValueResult {
    pub rank_count: usize,
    pub n: usize,
}

impl PValueResult {
    pub fn new(rank_count: usize, n: usize) -> Result<Self> {
        if rank_count > n {
            return Err(domain(format!("rank count {rank_count} exceeds n = {n}")));
        }
        Ok(PValueResult { rank_count, n })
    }

    pub fn numerator(&self) -> usize {
        self.rank_count + 1
    }

    pub fn denominator(&self) -> usize {
        self.n + 1
    }

    pub fn value(&self) -> f64 {
        self.numerator() as f64 / self.denominator() as f64
    }

    /// `p > alpha`, the membership test of the prediction set.
    pub fn exceeds(&self, alpha: f64) -> bool {
        self.value() > alpha
    }

    /// Exact `p <= num / den`.
    pub fn le_fraction(&self, num: usize, den: usize) -> bool {
        (self.numerator() as u128) * (den as u128) <= (num as u128) * (self.denominator() as u128)
    }
}

impl fmt::Display for PValueResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.numerator(), self.denominator())
    }
}

/// p-value of a test score against `n` reference scores.
pub fn p_from_scores(test_score: f64, reference: &[f64]) -> PValueResult {
    let count = reference.iter().filter(|&&s| test_score <= s).count();
    PValueResult {
        rank_count: count,
        n: reference.len(),
    }
}

/// Conformal p-value of `candidate` as the outcome of `test`.
pub fn conformal_p(
    candidate: &Outcome,
    calib: &CalibrationSet,
    test: &TestPoint,
    score: &ScoreFunction<'_>,
) -> Result<PValueResult> {
    let n = calib.len();
    let bag = calib.augmented(test.hypothesize(*candidate));
    let test_score = score.score(&bag[n], &bag)?;
    let mut count = 0;
    for z in &bag[..n] {
        if test_score <= score.score(z, &bag)? {
            count += 1;
        }
    }
    Ok(PValueResult { rank_count: count, n })
}

/// p-values for every candidate, evaluated in parallel. The augmented bag
/// and its scores are built once per candidate.
pub fn conformal_pvalues(
    candidates: &[Outcome],
    calib: &CalibrationSet,
    test: &TestPoint,
    score: &ScoreFunction<'_>,
) -> Result<Vec<PValueResult>> {
    if let ScoreFunction::Split(_) = score {
        // Calibration scores do not depend on the candidate.
        let reference = score.score_bag(calib.samples())?;
        return candidates
            .par_iter()
            .map(|y| {
                let s = score.score(&test.hypothesize(*y), &[])?;
                Ok(p_from_scores(s, &reference))
            })
            .collect();
    }
    candidates
        .par_iter()
        .map(|y| conformal_p(y, calib, test, score))
        .collect()
}

/// `{y in candidates : p(y) > alpha}`.
pub fn prediction_set_by_inversion(
    candidates: &[Outcome],
    calib: &CalibrationSet,
    test: &TestPoint,
    score: &ScoreFunction<'_>,
    alpha: f64,
) -> Result<PredictionSet> {
    check_alpha(alpha)?;
    if candidates.is_empty() {
        return Err(domain("empty candidate list"));
    }
    let pvalues = conformal_pvalues(candidates, calib, test, score)?;
    let kept = candidates
        .iter()
        .zip(&pvalues)
        .filter(|(_, p)| p.exceeds(alpha))
        .map(|(y, _)| *y)
        .collect();
    Ok(PredictionSet::new(Region::Outcomes(kept), alpha))
}

/// Adds independent `Uniform(0, epsilon)` noise to every score so that ties
/// are broken at random. Deterministic given `seed`.
pub fn add_tiebreak_noise(scores: &ScoreBag, epsilon: f64, seed: u64) -> Result<ScoreBag> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(domain(format!("tie-break epsilon must be > 0, got {epsilon}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy = scores
        .values()
        .iter()
        .map(|&s| s + epsilon * rng.random::<f64>())
        .collect();
    ScoreBag::new(noisy)
}

/// Checks that a full-mode score depends on the bag only as a multiset:
/// every member is rescored against `trials` random reorderings of the bag
/// and must reproduce its score exactly.
pub fn bag_permutation_invariant(
    score: &ScoreFunction<'_>,
    bag: &[LabeledSample],
    trials: usize,
    seed: u64,
) -> Result<bool> {
    let reference = score.score_bag(bag)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = bag.to_vec();
    for _ in 0..trials {
        shuffled.shuffle(&mut rng);
        for (z, &expected) in bag.iter().zip(&reference) {
            if score.score(z, &shuffled)?.to_bits() != expected.to_bits() {
                return Ok(false);
            }
        }
    }
    Ok(true)
}
