//! Weighted conformal p-values for non-exchangeable data.
//!
//! Under a joint law `f` of `(Z_1, ..., Z_{n+1})` the weight `w_i` is the
//! probability that the test case is `z_i`, given the bag. The weighted
//! p-value is `Σ_i w_i 1{s(test) <= s(z_i)}`. Uniform weights recover the
//! classical p-value; under covariate shift the weights are the normalized
//! density ratios `dQ_X/dP_X` of the features.

use std::fmt;

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_alpha, domain, Error, Result};
use crate::pvalue::ScoreFunction;
use crate::set::{PredictionSet, Region};
use crate::types::{CalibrationSet, LabeledSample, Outcome, TestPoint};

/// Largest bag the permutation oracle will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 9;
/// Normalization drift silently corrected.
pub const RENORMALIZE_TOLERANCE: f64 = 1e-9;
/// Normalization drift treated as a caller bug.
pub const WEIGHT_SUM_HARD_LIMIT: f64 = 1e-6;

type LogDensity<'a> = dyn Fn(&[LabeledSample]) -> f64 + Send + Sync + 'a;
type RatioFn<'a> = dyn Fn(&[f64]) -> f64 + Send + Sync + 'a;

/// Joint law of an ordered bag, as a log density up to an additive constant.
pub struct JointLaw<'a> {
    log_f: Box<LogDensity<'a>>,
}

impl<'a> JointLaw<'a> {
    pub fn new(log_f: impl Fn(&[LabeledSample]) -> f64 + Send + Sync + 'a) -> Self {
        JointLaw { log_f: Box::new(log_f) }
    }

    /// Any permutation-invariant law.
    pub fn exchangeable() -> Self {
        JointLaw::new(|_| 0.0)
    }

    /// Calibration features from `P_X`, test features from `Q_X`, a shared
    /// conditional law of the outcome. Up to a constant depending only on the
    /// bag, `log f = log ratio(x_{n+1})`.
    pub fn covariate_shift(ratio: DensityRatio<'a>) -> Self {
        JointLaw::new(move |z| match z.last() {
            Some(last) => ratio.evaluate(&last.features).map_or(f64::NAN, f64::ln),
            None => 0.0,
        })
    }

    pub fn log_density(&self, z: &[LabeledSample]) -> Result<f64> {
        let v = (self.log_f)(z);
        if v.is_nan() || v == f64::INFINITY {
            return Err(Error::Numerical(format!("joint log density evaluated to {v}")));
        }
        Ok(v)
    }
}

impl fmt::Debug for JointLaw<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("JointLaw")
    }
}

/// Density ratio `dQ_X/dP_X` between test and calibration feature laws.
pub struct DensityRatio<'a> {
    ratio: Box<RatioFn<'a>>,
}

impl<'a> DensityRatio<'a> {
    pub fn new(ratio: impl Fn(&[f64]) -> f64 + Send + Sync + 'a) -> Self {
        DensityRatio { ratio: Box::new(ratio) }
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        let v = (self.ratio)(x);
        if !(v.is_finite() && v >= 0.0) {
            return Err(domain(format!("density ratio must be finite and >= 0, got {v}")));
        }
        Ok(v)
    }
}

impl fmt::Debug for DensityRatio<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DensityRatio")
    }
}

/// Normalized weights over the augmented bag; the last entry is the test case.
///
/// The unnormalized masses are kept so that p-values are a single division of
/// mass sums, which makes uniform weights reproduce the classical p-value bit
/// for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector {
    weights: Vec<f64>,
    masses: Vec<f64>,
    total: f64,
}

impl WeightVector {
    /// Validates and renormalizes weights that should already sum to 1.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(domain("empty weight vector"));
        }
        check_masses(&weights)?;
        let total: f64 = weights.iter().sum();
        let drift = (total - 1.0).abs();
        if drift > WEIGHT_SUM_HARD_LIMIT {
            return Err(domain(format!("weights sum to {total}, not 1")));
        }
        if drift > RENORMALIZE_TOLERANCE {
            log::debug!("renormalizing weights with drift {drift:e}");
        }
        Ok(Self::normalized(weights, total))
    }

    pub fn uniform(len: usize) -> Result<Self> {
        if len == 0 {
            return Err(domain("empty weight vector"));
        }
        Ok(Self::normalized(vec![1.0; len], len as f64))
    }

    /// Normalizes arbitrary nonnegative masses.
    pub fn from_unnormalized(masses: &[f64]) -> Result<Self> {
        check_masses(masses)?;
        let total: f64 = masses.iter().sum();
        if total <= 0.0 {
            return Err(domain("all weights are zero"));
        }
        Ok(Self::normalized(masses.to_vec(), total))
    }

    fn normalized(masses: Vec<f64>, total: f64) -> Self {
        WeightVector {
            weights: masses.iter().map(|w| w / total).collect(),
            masses,
            total,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Weight of the test case.
    pub fn test_weight(&self) -> f64 {
        self.weights[self.weights.len() - 1]
    }
}

fn check_masses(masses: &[f64]) -> Result<()> {
    if masses.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(domain("weights must be finite and nonnegative"));
    }
    Ok(())
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;

    fn try_from(weights: Vec<f64>) -> Result<Self> {
        WeightVector::new(weights)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.weights
    }
}

/// Weights by summing the law over every ordering of the bag. Exponential in
/// the bag size; intended as a reference implementation.
pub fn permutation_weights_bruteforce(law: &JointLaw<'_>, z: &[LabeledSample]) -> Result<WeightVector> {
    let m = z.len();
    if m == 0 {
        return Err(domain("empty bag"));
    }
    if m > BRUTE_FORCE_LIMIT {
        return Err(Error::Refused(format!(
            "brute-force weights over {m}! orderings exceed the limit of {BRUTE_FORCE_LIMIT} samples; \
             use a factorized form such as covariate_shift_weights"
        )));
    }
    let mut ordered = z.to_vec();
    let mut terms = Vec::new();
    for perm in (0..m).permutations(m) {
        for (slot, &i) in ordered.iter_mut().zip(&perm) {
            slot.clone_from(&z[i]);
        }
        terms.push((perm[m - 1], law.log_density(&ordered)?));
    }
    let max = terms.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::Numerical("joint law gives zero mass to every ordering".into()));
    }
    let mut mass = vec![0.0; m];
    for (i, lf) in terms {
        mass[i] += (lf - max).exp();
    }
    WeightVector::from_unnormalized(&mass)
}

/// `w_i = ratio(x_i) / Σ_j ratio(x_j)` over the calibration features
/// followed by the test features.
pub fn covariate_shift_weights(ratio: &DensityRatio<'_>, features: &[&[f64]]) -> Result<WeightVector> {
    let values = features.iter().map(|x| ratio.evaluate(x)).collect::<Result<Vec<_>>>()?;
    weights_from_ratios(&values)
}

/// Covariate-shift weights from ratio values already evaluated at each
/// point, test point last.
pub fn weights_from_ratios(values: &[f64]) -> Result<WeightVector> {
    if values.iter().all(|&v| v == 0.0) {
        return Err(domain(
            "every density ratio is zero; the test point is outside the calibration support",
        ));
    }
    WeightVector::from_unnormalized(values)
}

/// `Σ_i w_i 1{test_score <= s_i}` over the reference scores followed by the
/// test case itself, whose term always counts.
pub fn weighted_p_from_scores(test_score: f64, reference: &[f64], weights: &WeightVector) -> Result<f64> {
    if weights.len() != reference.len() + 1 {
        return Err(domain(format!(
            "{} weights for {} reference scores plus the test case",
            weights.len(),
            reference.len()
        )));
    }
    let (test_mass, masses) = weights.masses.split_last().expect("nonempty");
    let mut mass = 0.0;
    for (m, &s) in masses.iter().zip(reference) {
        if test_score <= s {
            mass += m;
        }
    }
    Ok(((mass + test_mass) / weights.total).min(1.0))
}

/// Weighted conformal p-value of `candidate`.
pub fn weighted_p(
    candidate: &Outcome,
    calib: &CalibrationSet,
    test: &TestPoint,
    score: &ScoreFunction<'_>,
    weights: &WeightVector,
) -> Result<f64> {
    let n = calib.len();
    if weights.len() != n + 1 {
        return Err(domain(format!("{} weights for {} samples", weights.len(), n + 1)));
    }
    let bag = calib.augmented(test.hypothesize(*candidate));
    let scores = score.score_bag(&bag)?;
    weighted_p_from_scores(scores[n], &scores[..n], weights)
}

/// Where the weights of a weighted prediction set come from.
#[derive(Debug)]
pub enum WeightSource<'a> {
    /// A general joint law; weights are recomputed for each candidate.
    Law(JointLaw<'a>),
    /// Covariate shift; weights depend only on features and are computed once.
    /// `clip` caps the ratio values, for diagnostics only.
    Ratio { ratio: DensityRatio<'a>, clip: Option<f64> },
    /// Caller-supplied weights.
    Fixed(WeightVector),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedSet {
    pub set: PredictionSet,
    pub pvalues: Vec<f64>,
    /// Whether any density ratio was clipped. When set, the coverage
    /// guarantee no longer applies.
    pub clipped: bool,
}

/// `{y in candidates : p^f(y) > alpha}`.
pub fn weighted_prediction_set(
    candidates: &[Outcome],
    calib: &CalibrationSet,
    test: &TestPoint,
    score: &ScoreFunction<'_>,
    source: &WeightSource<'_>,
    alpha: f64,
) -> Result<WeightedSet> {
    check_alpha(alpha)?;
    if candidates.is_empty() {
        return Err(domain("empty candidate list"));
    }
    let mut clipped = false;
    let fixed = match source {
        WeightSource::Law(_) => None,
        WeightSource::Fixed(w) => Some(w.clone()),
        WeightSource::Ratio { ratio, clip } => {
            let mut values = calib
                .samples()
                .iter()
                .map(|z| ratio.evaluate(&z.features))
                .chain(std::iter::once(ratio.evaluate(&test.features)))
                .collect::<Result<Vec<_>>>()?;
            if let Some(c) = *clip {
                if !(c > 0.0 && c.is_finite()) {
                    return Err(domain(format!("clip level must be positive, got {c}")));
                }
                for v in &mut values {
                    if *v > c {
                        *v = c;
                        clipped = true;
                    }
                }
                if clipped {
                    log::warn!("density ratios clipped at {c}; weighted coverage is no longer guaranteed");
                }
            }
            Some(weights_from_ratios(&values)?)
        }
    };
    let pvalues = candidates
        .par_iter()
        .map(|y| match (&fixed, source) {
            (Some(w), _) => weighted_p(y, calib, test, score, w),
            (None, WeightSource::Law(law)) => {
                let bag = calib.augmented(test.hypothesize(*y));
                let w = permutation_weights_bruteforce(law, &bag)?;
                weighted_p(y, calib, test, score, &w)
            }
            (None, _) => unreachable!(),
        })
        .collect::<Result<Vec<_>>>()?;
    let kept = candidates
        .iter()
        .zip(&pvalues)
        .filter(|(_, &p)| p > alpha)
        .map(|(y, _)| *y)
        .collect();
    Ok(WeightedSet {
        set: PredictionSet::new(Region::Outcomes(kept), alpha),
        pvalues,
        clipped,
    })
}
