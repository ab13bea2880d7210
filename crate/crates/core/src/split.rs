//! Closed-form split-conformal constructions.
//!
//! All of them threshold a fixed score at the empirical quantile of the
//! calibration scores taken at the inflated level `(1 - alpha)(1 + 1/n)`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{check_alpha, domain, Error, Result};
use crate::pvalue::{PValueResult, ScoreFunction};
use crate::set::PredictionSet;
use crate::types::{
    ceil_rank, empirical_quantile, CalibrationSet, ExtendedReal, LabeledSample, Outcome, ScoreBag, TestPoint,
};

type RealFn<'a> = Box<dyn Fn(&[f64]) -> f64 + Send + Sync + 'a>;
type ProbFn<'a> = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync + 'a>;

/// Level `(1 - alpha)(n + 1)/n` at which calibration quantiles are taken.
pub fn inflated_level(n: usize, alpha: f64) -> f64 {
    (1.0 - alpha) * (1.0 + 1.0 / n as f64)
}

/// `Q(P̂(S); (1 - alpha)(1 + 1/n))`, `+inf` when the level exceeds 1.
pub fn calibrated_quantile(scores: &ScoreBag, alpha: f64) -> Result<ExtendedReal> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(domain("empty calibration set"));
    }
    empirical_quantile(scores, inflated_level(scores.len(), alpha))
}

/// The `ceil((1 - alpha)(n + 1))`-th smallest of `{Y_1, ..., Y_n, +inf}`.
pub fn one_sided_upper_bound(y_values: &ScoreBag, alpha: f64) -> Result<ExtendedReal> {
    check_alpha(alpha)?;
    let n = y_values.len();
    if n == 0 {
        return Err(domain("empty calibration set"));
    }
    let rank = ceil_rank((1.0 - alpha) * (n as f64 + 1.0)) as usize;
    Ok(if rank > n {
        ExtendedReal::PosInf
    } else {
        ExtendedReal::Finite(y_values.sorted()[rank.max(1) - 1])
    })
}

/// Black-box regression models: a conditional mean and/or a pair of
/// conditional quantiles.
#[derive(Default)]
pub struct RegressionModels<'a> {
    pub mean: Option<RealFn<'a>>,
    pub q_lo: Option<RealFn<'a>>,
    pub q_hi: Option<RealFn<'a>>,
    /// Callbacks may be invoked from several threads at once.
    pub concurrent: bool,
}

impl<'a> RegressionModels<'a> {
    pub fn with_mean(mean: impl Fn(&[f64]) -> f64 + Send + Sync + 'a) -> Self {
        RegressionModels {
            mean: Some(Box::new(mean)),
            ..Default::default()
        }
    }

    pub fn with_quantiles(
        q_lo: impl Fn(&[f64]) -> f64 + Send + Sync + 'a,
        q_hi: impl Fn(&[f64]) -> f64 + Send + Sync + 'a,
    ) -> Self {
        RegressionModels {
            q_lo: Some(Box::new(q_lo)),
            q_hi: Some(Box::new(q_hi)),
            ..Default::default()
        }
    }

    pub fn concurrent(mut self) -> Self {
        self.concurrent = true;
        self
    }
}

impl fmt::Debug for RegressionModels<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegressionModels")
            .field("mean", &self.mean.is_some())
            .field("q_lo", &self.q_lo.is_some())
            .field("q_hi", &self.q_hi.is_some())
            .field("concurrent", &self.concurrent)
            .finish()
    }
}

fn score_calibration<F>(calib: &CalibrationSet, concurrent: bool, f: F) -> Result<ScoreBag>
where
    F: Fn(&LabeledSample) -> Result<f64> + Send + Sync,
{
    let scores: Result<Vec<f64>> = if concurrent {
        calib.samples().par_iter().map(&f).collect()
    } else {
        calib.samples().iter().map(&f).collect()
    };
    ScoreBag::new(scores?)
}

fn real_outcome(z: &LabeledSample) -> Result<f64> {
    z.outcome
        .as_real()
        .ok_or_else(|| domain("regression requires real outcomes"))
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Score(format!("{what} returned {v}")))
    }
}

/// Absolute residual scores `|Y_i - m(X_i)|`.
pub fn residual_scores(models: &RegressionModels<'_>, calib: &CalibrationSet) -> Result<ScoreBag> {
    let mean = models
        .mean
        .as_ref()
        .ok_or_else(|| domain("mean-residual interval needs a mean model"))?;
    score_calibration(calib, models.concurrent, |z| {
        Ok((real_outcome(z)? - finite(mean(&z.features), "mean model")?).abs())
    })
}

/// `m(x) ± Q(S; (1 - alpha)(n + 1)/n)` with absolute-residual scores.
pub fn mean_residual_interval(
    models: &RegressionModels<'_>,
    calib: &CalibrationSet,
    test: &TestPoint,
    alpha: f64,
) -> Result<PredictionSet> {
    let scores = residual_scores(models, calib)?;
    let half_width = calibrated_quantile(&scores, alpha)?;
    let center = finite((models.mean.as_ref().unwrap())(&test.features), "mean model")?;
    Ok(match half_width {
        ExtendedReal::Finite(h) => PredictionSet::interval(
            ExtendedReal::Finite(center - h),
            ExtendedReal::Finite(center + h),
            alpha,
        ),
        _ => PredictionSet::interval(ExtendedReal::NegInf, ExtendedReal::PosInf, alpha),
    })
}

/// CQR scores `max(q_lo(X_i) - Y_i, Y_i - q_hi(X_i))`.
pub fn cqr_scores(models: &RegressionModels<'_>, calib: &CalibrationSet) -> Result<ScoreBag> {
    let (q_lo, q_hi) = quantile_models(models)?;
    score_calibration(calib, models.concurrent, |z| {
        let y = real_outcome(z)?;
        let lo = finite(q_lo(&z.features), "lower quantile model")?;
        let hi = finite(q_hi(&z.features), "upper quantile model")?;
        if lo > hi {
            log::warn!("quantile models cross at a calibration point: q_lo = {lo} > q_hi = {hi}");
        }
        Ok((lo - y).max(y - hi))
    })
}

fn quantile_models<'m, 'a>(models: &'m RegressionModels<'a>) -> Result<(&'m RealFn<'a>, &'m RealFn<'a>)> {
    match (&models.q_lo, &models.q_hi) {
        (Some(lo), Some(hi)) => Ok((lo, hi)),
        _ => Err(domain("CQR needs both lower and upper quantile models")),
    }
}

/// `[q_lo(x) - t, q_hi(x) + t]` with `t` the calibrated quantile of the CQR
/// scores. `t` may be negative; a resulting `lower > upper` is reported as an
/// empty interval with the endpoints kept as computed.
pub fn cqr_interval(
    models: &RegressionModels<'_>,
    calib: &CalibrationSet,
    test: &TestPoint,
    alpha: f64,
) -> Result<PredictionSet> {
    let scores = cqr_scores(models, calib)?;
    let correction = calibrated_quantile(&scores, alpha)?;
    let (q_lo, q_hi) = quantile_models(models)?;
    let lo = finite(q_lo(&test.features), "lower quantile model")?;
    let hi = finite(q_hi(&test.features), "upper quantile model")?;
    if lo > hi {
        log::warn!("quantile models cross at the test point: q_lo = {lo} > q_hi = {hi}");
    }
    Ok(cqr_interval_from(lo, hi, correction, alpha))
}

/// CQR interval from the test-point quantile predictions and a calibrated
/// correction.
pub fn cqr_interval_from(q_lo: f64, q_hi: f64, correction: ExtendedReal, alpha: f64) -> PredictionSet {
    match correction {
        ExtendedReal::Finite(t) => {
            PredictionSet::interval(ExtendedReal::Finite(q_lo - t), ExtendedReal::Finite(q_hi + t), alpha)
        }
        ExtendedReal::PosInf => PredictionSet::interval(ExtendedReal::NegInf, ExtendedReal::PosInf, alpha),
        ExtendedReal::NegInf => PredictionSet::interval(ExtendedReal::PosInf, ExtendedReal::NegInf, alpha),
    }
}

/// Tolerance on the total mass of a probability vector before it is rejected.
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-6;

/// Validates a probability vector and renormalizes it to sum to one.
pub fn normalize_probabilities(mut p: Vec<f64>) -> Result<Vec<f64>> {
    if p.is_empty() {
        return Err(domain("empty probability vector"));
    }
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(domain("probabilities must be finite and nonnegative"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
        return Err(domain(format!("probabilities sum to {total}, not 1")));
    }
    for v in &mut p {
        *v /= total;
    }
    Ok(p)
}

/// A black-box classifier returning class probabilities over `1..=K`.
pub struct Classifier<'a> {
    pi_hat: ProbFn<'a>,
    pub concurrent: bool,
}

impl<'a> Classifier<'a> {
    pub fn new(pi_hat: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'a) -> Self {
        Classifier {
            pi_hat: Box::new(pi_hat),
            concurrent: false,
        }
    }

    pub fn concurrent(mut self) -> Self {
        self.concurrent = true;
        self
    }

    pub fn probabilities(&self, features: &[f64]) -> Result<Vec<f64>> {
        normalize_probabilities((self.pi_hat)(features))
    }
}

impl fmt::Debug for Classifier<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Classifier")
            .field("concurrent", &self.concurrent)
            .finish()
    }
}

fn label_of(z: &LabeledSample, k: usize) -> Result<usize> {
    match z.outcome {
        Outcome::Category { label, .. } if label <= k => Ok(label),
        Outcome::Category { label, .. } => Err(domain(format!("label {label} outside the classifier's {k} classes"))),
        Outcome::Real(_) => Err(domain("classification requires categorical outcomes")),
    }
}

/// Calibration scores `-π̂_{Y_i}(X_i)`.
pub fn threshold_scores(clf: &Classifier<'_>, calib: &CalibrationSet) -> Result<ScoreBag> {
    score_calibration(calib, clf.concurrent, |z| {
        let p = clf.probabilities(&z.features)?;
        Ok(-p[label_of(z, p.len())? - 1])
    })
}

/// Labels `y` with `-π̂_y(x) <= threshold`.
pub fn threshold_label_set(probs: &[f64], threshold: ExtendedReal) -> Vec<usize> {
    (1..=probs.len())
        .filter(|&y| ExtendedReal::Finite(-probs[y - 1]) <= threshold)
        .collect()
}

/// Probability-threshold classification set.
pub fn classification_threshold_set(
    clf: &Classifier<'_>,
    calib: &CalibrationSet,
    test: &TestPoint,
    alpha: f64,
) -> Result<PredictionSet> {
    check_alpha(alpha)?;
    let tau = calibrated_quantile(&threshold_scores(clf, calib)?, alpha)?;
    let probs = clf.probabilities(&test.features)?;
    let k = probs.len();
    Ok(PredictionSet::labels(threshold_label_set(&probs, tau), k, alpha))
}

/// Cumulative-probability scores of every label: the total mass of labels
/// ranked at or above it (decreasing probability, ties by label index),
/// minus `u * π̂_y` when a randomization uniform is given.
pub fn cumulative_scores(probs: &[f64], u: Option<f64>) -> Vec<f64> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut scores = vec![0.0; probs.len()];
    let mut mass = 0.0;
    for &i in &order {
        mass += probs[i];
        scores[i] = mass - u.map_or(0.0, |u| u * probs[i]);
    }
    scores
}

/// Labels whose cumulative score is at most `threshold`.
pub fn cumulative_label_set(probs: &[f64], u: Option<f64>, threshold: ExtendedReal) -> Vec<usize> {
    cumulative_scores(probs, u)
        .into_iter()
        .enumerate()
        .filter(|&(_, s)| ExtendedReal::Finite(s) <= threshold)
        .map(|(i, _)| i + 1)
        .collect()
}

/// Calibration scores for the cumulative-probability set. When randomizing,
/// each case uses its recorded `u` or a draw from `rng`.
pub fn cumulative_calibration_scores(
    clf: &Classifier<'_>,
    calib: &CalibrationSet,
    randomize: bool,
    rng: &mut ChaCha8Rng,
) -> Result<ScoreBag> {
    let us: Vec<Option<f64>> = calib
        .samples()
        .iter()
        .map(|z| randomize.then(|| z.tiebreak_u.unwrap_or_else(|| rng.random())))
        .collect();
    let scores: Result<Vec<f64>> = calib
        .samples()
        .iter()
        .zip(us)
        .map(|(z, u)| {
            let p = clf.probabilities(&z.features)?;
            let y = label_of(z, p.len())?;
            Ok(cumulative_scores(&p, u)[y - 1])
        })
        .collect();
    ScoreBag::new(scores?)
}

/// Cumulative-probability ("adaptive") classification set, optionally
/// randomized with one shared uniform per test point.
pub fn cumulative_probability_set(
    clf: &Classifier<'_>,
    calib: &CalibrationSet,
    test: &TestPoint,
    alpha: f64,
    randomize: bool,
    seed: u64,
) -> Result<PredictionSet> {
    check_alpha(alpha)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = cumulative_calibration_scores(clf, calib, randomize, &mut rng)?;
    let tau = calibrated_quantile(&scores, alpha)?;
    let u = randomize.then(|| test.tiebreak_u.unwrap_or_else(|| rng.random()));
    let probs = clf.probabilities(&test.features)?;
    let k = probs.len();
    Ok(PredictionSet::labels(cumulative_label_set(&probs, u, tau), k, alpha))
}

/// Mondrian p-value: the rank of the test score among calibration cases in
/// the same stratum as the hypothesized test case.
pub fn mondrian_p<S, G>(
    candidate: &Outcome,
    calib: &CalibrationSet,
    test: &TestPoint,
    score: &ScoreFunction<'_>,
    stratum_of: G,
) -> Result<PValueResult>
where
    S: PartialEq,
    G: Fn(&[f64], &Outcome) -> S,
{
    let n = calib.len();
    let bag = calib.augmented(test.hypothesize(*candidate));
    let stratum = stratum_of(&test.features, candidate);
    let test_score = score.score(&bag[n], &bag)?;
    let mut size = 0;
    let mut count = 0;
    for z in &bag[..n] {
        if stratum_of(&z.features, &z.outcome) != stratum {
            continue;
        }
        size += 1;
        if test_score <= score.score(z, &bag)? {
            count += 1;
        }
    }
    PValueResult::new(count, size)
}
