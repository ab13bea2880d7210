//! Conformal prediction for a categorical outcome with uninformative
//! features.
//!
//! The score of label `k` under the hypothesized bag `D(y)` is the negative
//! plug-in frequency of `k` in `D(y)`, minus a small tie-breaking term
//! driven by an auxiliary uniform `u`:
//!
//! ```text
//! s((u, k); D(y)) = -(n_k + 1{k = y}) / (n + 1) - (u / 2) / (n + 1)
//! ```
//!
//! This leads to a p-function with a closed form in the label counts, and
//! to the Good–Turing style rule for when an unseen label can enter the set.

use serde::{Deserialize, Serialize};

use crate::error::{check_alpha, domain, Result};
use crate::pvalue::{PValueResult, ScoreFunction};
use crate::set::PredictionSet;
use crate::types::{check_unit, floor_rank, LabeledSample};

/// Absolute tolerance on the total mass of a population PMF.
pub const PMF_SUM_TOLERANCE: f64 = 1e-12;

/// Label counts `n_1, ..., n_K` of an observed sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    counts: Vec<usize>,
    n: usize,
}

impl LabelCounts {
    /// Counts from 1-based labels in `1..=k`.
    pub fn from_labels(labels: &[usize], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(domain("number of categories must be positive"));
        }
        let mut counts = vec![0; k];
        for &l in labels {
            if l == 0 || l > k {
                return Err(domain(format!("label {l} outside 1..={k}")));
            }
            counts[l - 1] += 1;
        }
        Ok(LabelCounts {
            counts,
            n: labels.len(),
        })
    }

    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        if counts.is_empty() {
            return Err(domain("number of categories must be positive"));
        }
        let n = counts.iter().sum();
        Ok(LabelCounts { counts, n })
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// `n_label` for a 1-based label.
    pub fn count(&self, label: usize) -> usize {
        self.counts[label - 1]
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// `|Γ_c|`, the number of labels observed exactly `c` times.
    pub fn labels_seen(&self, c: usize) -> usize {
        self.counts.iter().filter(|&&n| n == c).count()
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label == 0 || label > self.k() {
            Err(domain(format!("label {label} outside 1..={}", self.k())))
        } else {
            Ok(())
        }
    }
}

/// Score of an observation with label `label_k` and uniform `u` against the
/// bag in which the test case is hypothesized to have label `hypothesized_y`.
/// `counts` are those of the `n` observed labels only.
pub fn multinomial_score(label_k: usize, u: f64, hypothesized_y: usize, counts: &LabelCounts) -> Result<f64> {
    counts.check_label(label_k)?;
    counts.check_label(hypothesized_y)?;
    check_unit(u)?;
    let in_bag = counts.count(label_k) + usize::from(label_k == hypothesized_y);
    Ok(frequency_score(in_bag, u, counts.n() + 1))
}

fn frequency_score(count_in_bag: usize, u: f64, bag_size: usize) -> f64 {
    let m = bag_size as f64;
    -(count_in_bag as f64) / m - (u / 2.0) / m
}

/// The same score as a full-mode [`ScoreFunction`], reading labels from the
/// outcomes and `u` from `tiebreak_u` (missing `u` is an error).
pub fn multinomial_score_function() -> ScoreFunction<'static> {
    ScoreFunction::try_full(|z: &LabeledSample, bag: &[LabeledSample]| {
        let label = z
            .outcome
            .as_label()
            .ok_or_else(|| domain("categorical score needs a categorical outcome"))?;
        let u = z
            .tiebreak_u
            .ok_or_else(|| domain("categorical score needs the auxiliary uniform u"))?;
        let in_bag = bag.iter().filter(|w| w.outcome.as_label() == Some(label)).count();
        Ok(frequency_score(in_bag, u, bag.len()))
    })
}

/// Closed-form conformal p-value of label `y`:
///
/// ```text
/// p(y) = (1 + Σ_{c=1}^{n_y} c |Γ_c| - n_y + Σ_{i ∈ I(y)} 1{u_test >= u_i}) / (n + 1)
/// ```
///
/// with `I(y)` the observations labeled `y` or carrying a label seen
/// `n_y + 1` times.
pub fn categorical_p_closed_form(
    candidate_y: usize,
    observed_labels: &[usize],
    u_values: &[f64],
    u_test: f64,
    k: usize,
) -> Result<PValueResult> {
    let counts = LabelCounts::from_labels(observed_labels, k)?;
    let at_most = counts_with_u_at_most(observed_labels, u_values, u_test, k)?;
    closed_form_from_counts(candidate_y, &counts, &at_most)
}

/// Per label, the number of observations with that label and `u_i <= u_test`.
fn counts_with_u_at_most(labels: &[usize], u_values: &[f64], u_test: f64, k: usize) -> Result<Vec<usize>> {
    if labels.len() != u_values.len() {
        return Err(domain(format!(
            "{} labels but {} auxiliary uniforms",
            labels.len(),
            u_values.len()
        )));
    }
    check_unit(u_test)?;
    let mut at_most = vec![0; k];
    for (&l, &u) in labels.iter().zip(u_values) {
        check_unit(u)?;
        if l == 0 || l > k {
            return Err(domain(format!("label {l} outside 1..={k}")));
        }
        if u_test >= u {
            at_most[l - 1] += 1;
        }
    }
    Ok(at_most)
}

fn closed_form_from_counts(y: usize, counts: &LabelCounts, at_most: &[usize]) -> Result<PValueResult> {
    counts.check_label(y)?;
    let n_y = counts.count(y);
    // Σ_{c=1}^{n_y} c |Γ_c| - n_y: observations whose label is not y and was
    // seen at most n_y times.
    let rarer: usize = counts.counts().iter().filter(|&&c| c >= 1 && c <= n_y).sum::<usize>() - n_y;
    let tied: usize = (1..=counts.k())
        .filter(|&l| l == y || counts.count(l) == n_y + 1)
        .map(|l| at_most[l - 1])
        .sum();
    PValueResult::new(rarer + tied, counts.n())
}

/// Closed-form p-values of all labels `1..=k`.
pub fn categorical_pvalues(
    observed_labels: &[usize],
    u_values: &[f64],
    u_test: f64,
    k: usize,
) -> Result<Vec<PValueResult>> {
    let counts = LabelCounts::from_labels(observed_labels, k)?;
    let at_most = counts_with_u_at_most(observed_labels, u_values, u_test, k)?;
    (1..=k).map(|y| closed_form_from_counts(y, &counts, &at_most)).collect()
}

/// Conformal prediction set `{y : p(y) > alpha}` over the labels `1..=k`.
pub fn categorical_conformal_set(
    observed_labels: &[usize],
    u_values: &[f64],
    u_test: f64,
    k: usize,
    alpha: f64,
) -> Result<PredictionSet> {
    check_alpha(alpha)?;
    let pvalues = categorical_pvalues(observed_labels, u_values, u_test, k)?;
    let labels = (1..=k).filter(|&y| pvalues[y - 1].exceeds(alpha)).collect();
    Ok(PredictionSet::labels(labels, k, alpha))
}

/// Whether an unseen label can enter the conformal set at level `alpha`:
/// `|Γ_1| >= floor(alpha (n + 1))`.
pub fn unseen_label_rule(observed_labels: &[usize], alpha: f64) -> Result<bool> {
    check_alpha(alpha)?;
    let k = observed_labels.iter().copied().max().unwrap_or(1);
    let counts = LabelCounts::from_labels(observed_labels, k)?;
    let singletons = counts.labels_seen(1);
    let needed = floor_rank(alpha * (counts.n() as f64 + 1.0));
    Ok(singletons as f64 >= needed)
}

/// A population distribution `(π_1, ..., π_K)` over labels `1..=K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PopulationPmf {
    probs: Vec<f64>,
    /// Label indices (0-based) sorted by decreasing probability, ties by index.
    #[serde(skip)]
    order: Vec<usize>,
}

impl PopulationPmf {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        validate_probs(&probs)?;
        let order = rank_order(&probs);
        if order.windows(2).any(|w| probs[w[0]] == probs[w[1]]) {
            log::warn!("population probabilities contain ties; ranking them by label index");
        }
        Ok(PopulationPmf { probs, order })
    }

    /// A PMF estimated from data, where ties between labels are routine and
    /// broken by label index without comment.
    pub fn from_estimate(probs: Vec<f64>) -> Result<Self> {
        validate_probs(&probs)?;
        let order = rank_order(&probs);
        Ok(PopulationPmf { probs, order })
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(domain("number of categories must be positive"));
        }
        PopulationPmf::new(vec![1.0 / k as f64; k])
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// 1-based labels in decreasing order of probability.
    pub fn ranked_labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.order.iter().map(|&i| i + 1)
    }

    /// Mass of the labels ranked strictly below each label, indexed 0-based.
    fn mass_below(&self) -> Vec<f64> {
        let mut below = vec![0.0; self.k()];
        let mut acc = 0.0;
        for &i in self.order.iter().rev() {
            below[i] = acc;
            acc += self.probs[i];
        }
        below
    }

    /// `p*(y, u) = Σ_{k > r(y)} π_(k) + π_y u`.
    pub fn oracle_p(&self, y: usize, u: f64) -> f64 {
        self.mass_below()[y - 1] + self.probs[y - 1] * u
    }

    /// Probability, over `u ~ Uniform(0, 1)`, that the randomized oracle
    /// includes each label (indexed 0-based).
    pub fn randomized_inclusion(&self, alpha: f64) -> Vec<f64> {
        self.mass_below()
            .iter()
            .zip(&self.probs)
            .map(|(&below, &p)| {
                if p == 0.0 {
                    f64::from(u8::from(below > alpha))
                } else {
                    ((below + p - alpha) / p).clamp(0.0, 1.0)
                }
            })
            .collect()
    }
}

fn validate_probs(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(domain("empty probability vector"));
    }
    if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(domain("probabilities must be finite and nonnegative"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > PMF_SUM_TOLERANCE {
        return Err(domain(format!("probabilities sum to {total}, not 1")));
    }
    Ok(())
}

fn rank_order(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

impl TryFrom<Vec<f64>> for PopulationPmf {
    type Error = crate::Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        PopulationPmf::new(probs)
    }
}

impl From<PopulationPmf> for Vec<f64> {
    fn from(pmf: PopulationPmf) -> Self {
        pmf.probs
    }
}

/// Oracle prediction set knowing the population PMF.
///
/// Randomized: `{y : p*(y, u) > alpha}`. Otherwise: the shortest prefix of
/// labels by decreasing probability whose mass reaches `1 - alpha`.
pub fn oracle_set(pmf: &PopulationPmf, alpha: f64, u: f64, randomized: bool) -> Result<PredictionSet> {
    check_alpha(alpha)?;
    let k = pmf.k();
    let mut labels: Vec<usize> = if randomized {
        check_unit(u)?;
        let below = pmf.mass_below();
        (1..=k)
            .filter(|&y| below[y - 1] + pmf.probs[y - 1] * u > alpha)
            .collect()
    } else {
        let target = 1.0 - alpha - PMF_SUM_TOLERANCE;
        let mut mass = 0.0;
        let mut chosen = Vec::new();
        for y in pmf.ranked_labels() {
            chosen.push(y);
            mass += pmf.probs[y - 1];
            if mass >= target {
                break;
            }
        }
        chosen
    };
    labels.sort_unstable();
    Ok(PredictionSet::labels(labels, k, alpha))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pvalue::conformal_p;
    use crate::types::{CalibrationSet, Outcome, TestPoint};
    use num_rational::Ratio;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn p_engine(y: usize, labels: &[usize], us: &[f64], u_test: f64, k: usize) -> PValueResult {
        let calib = CalibrationSet::new(
            labels
                .iter()
                .zip(us)
                .map(|(&l, &u)| {
                    LabeledSample::new(vec![], Outcome::Category { label: l, k })
                        .with_u(u)
                        .unwrap()
                })
                .collect(),
        )
        .unwrap();
        let test = TestPoint::default().with_u(u_test).unwrap();
        conformal_p(
            &Outcome::Category { label: y, k },
            &calib,
            &test,
            &multinomial_score_function(),
        )
        .unwrap()
    }

    #[test]
    fn score_examples() {
        let counts = LabelCounts::from_labels(&[1, 1], 2).unwrap();
        assert_eq!(multinomial_score(1, 0.0, 2, &counts).unwrap(), -2.0 / 3.0);
        assert_eq!(multinomial_score(2, 0.0, 2, &counts).unwrap(), -1.0 / 3.0);
        let counts = LabelCounts::from_labels(&[1, 1], 3).unwrap();
        assert_eq!(multinomial_score(3, 0.0, 2, &counts).unwrap(), 0.0);
        assert!(multinomial_score(4, 0.0, 2, &counts).is_err());
        assert!(multinomial_score(1, 0.0, 0, &counts).is_err());
    }

    #[test]
    fn closed_form_examples() {
        for u_test in [0.0, 0.3, 1.0] {
            let p = categorical_p_closed_form(2, &[1, 1], &[0.4, 0.9], u_test, 2).unwrap();
            assert_eq!((p.numerator(), p.denominator()), (1, 3));
        }
        let us = [0.2, 0.5, 0.8];
        let p = categorical_p_closed_form(1, &[1, 1, 1], &us, 0.1, 1).unwrap();
        assert_eq!((p.numerator(), p.denominator()), (1, 4));
        assert_eq!(p, p_engine(1, &[1, 1, 1], &us, 0.1, 1));
        let p = categorical_p_closed_form(1, &[1, 1, 1], &us, 0.9, 1).unwrap();
        assert_eq!(p.value(), 1.0);
        assert_eq!(p, p_engine(1, &[1, 1, 1], &us, 0.9, 1));

        assert!(categorical_p_closed_form(1, &[1, 2], &[0.5], 0.5, 2).is_err());
        assert!(categorical_p_closed_form(1, &[1, 2], &[0.5, 1.5], 0.5, 2).is_err());
    }

    #[test]
    fn closed_form_agrees_with_engine_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let k = rng.random_range(1..=6);
            let n = rng.random_range(1..=15);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(1..=k)).collect();
            let us: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let u_test = rng.random::<f64>();
            for y in 1..=k {
                assert_eq!(
                    categorical_p_closed_form(y, &labels, &us, u_test, k).unwrap(),
                    p_engine(y, &labels, &us, u_test, k)
                );
            }
        }
    }

    #[test]
    fn unseen_label_rule_examples() {
        // n = 9, no singletons.
        assert!(!unseen_label_rule(&[1, 1, 1, 2, 2, 2, 3, 3, 3], 0.2).unwrap());
        // n = 9, two singletons.
        assert!(unseen_label_rule(&[1, 1, 1, 1, 2, 2, 2, 3, 4], 0.2).unwrap());
        // alpha (n + 1) < 1.
        assert!(unseen_label_rule(&[1, 1, 1], 0.2).unwrap());
    }

    #[test]
    fn unseen_label_rule_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let n = rng.random_range(1..=20);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(1..=6)).collect();
            let us: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let alpha = rng.random_range(0.01..0.6);
            // Label 7 is unseen; u_test = 1 gives its largest possible p-value.
            let p = categorical_p_closed_form(7, &labels, &us, 1.0, 7).unwrap();
            assert_eq!(p.exceeds(alpha), unseen_label_rule(&labels, alpha).unwrap());
        }
    }

    #[test]
    fn unseen_label_pvalue_is_uniform_over_uniforms() {
        // Labels 3, 4 and 5 are singletons, label 2 unseen.
        let labels = [1, 1, 1, 3, 4, 5];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let draws = 100_000;
        let singletons = 3;
        let mut hist = vec![0usize; singletons + 1];
        for _ in 0..draws {
            let us: Vec<f64> = labels.iter().map(|_| rng.random::<f64>()).collect();
            let p = categorical_p_closed_form(2, &labels, &us, rng.random(), 5).unwrap();
            hist[p.numerator() - 1] += 1;
        }
        let expected = draws as f64 / (singletons + 1) as f64;
        let chi2: f64 = hist.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        let critical = ChiSquared::new(singletons as f64).unwrap().inverse_cdf(1.0 - 1e-3);
        assert!(chi2 < critical, "chi2 = {chi2}, critical = {critical}, hist = {hist:?}");
    }

    #[test]
    fn pmf_validation() {
        assert!(PopulationPmf::new(vec![0.5, 0.6]).is_err());
        assert!(PopulationPmf::new(vec![-0.5, 1.5]).is_err());
        assert!(PopulationPmf::new(vec![]).is_err());
        let pmf = PopulationPmf::new(vec![0.2, 0.5, 0.3]).unwrap();
        assert_eq!(pmf.ranked_labels().collect::<Vec<_>>(), vec![2, 3, 1]);
        let tied = PopulationPmf::uniform(3).unwrap();
        assert_eq!(tied.ranked_labels().collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn oracle_examples() {
        let pmf = PopulationPmf::new(vec![0.5, 0.3, 0.2]).unwrap();
        assert_eq!(
            oracle_set(&pmf, 0.1, 0.0, false).unwrap(),
            PredictionSet::labels(vec![1, 2, 3], 3, 0.1)
        );
        assert_eq!(
            oracle_set(&pmf, 0.25, 0.0, false).unwrap(),
            PredictionSet::labels(vec![1, 2], 3, 0.25)
        );
        assert!((pmf.oracle_p(2, 0.5) - 0.35).abs() < 1e-15);
        let set = oracle_set(&pmf, 0.3, 0.5, true).unwrap();
        assert!(set.contains(&Outcome::Category { label: 2, k: 3 }));
        let set = oracle_set(&pmf, 0.36, 0.5, true).unwrap();
        assert!(!set.contains(&Outcome::Category { label: 2, k: 3 }));
    }

    /// Exact rational check that the randomized oracle covers exactly 1 - alpha:
    /// coverage = Σ_y π_y P[below_y + π_y U > alpha].
    #[test]
    fn randomized_oracle_coverage_is_exact() {
        let pmfs: [&[i64]; 4] = [
            &[20, 20, 20, 20, 20],
            &[40, 25, 15, 12, 8],
            &[75, 15, 9, 1, 0],
            &[50, 30, 20, 0, 0],
        ];
        for weights in pmfs {
            let pi: Vec<Ratio<i64>> = weights.iter().map(|&w| Ratio::new(w, 100)).collect();
            let probs: Vec<f64> = weights.iter().map(|&w| w as f64 / 100.0).collect();
            let pmf = PopulationPmf::new(probs).unwrap();
            for alpha_pct in [1i64, 5, 10, 25, 50, 90] {
                let alpha = Ratio::new(alpha_pct, 100);
                let order: Vec<usize> = pmf.ranked_labels().map(|l| l - 1).collect();
                let mut below = vec![Ratio::from_integer(0); pi.len()];
                let mut acc = Ratio::from_integer(0);
                for &i in order.iter().rev() {
                    below[i] = acc;
                    acc += pi[i];
                }
                let zero = Ratio::from_integer(0);
                let coverage: Ratio<i64> = (0..pi.len())
                    .map(|i| {
                        let gain = below[i] + pi[i] - alpha;
                        gain.max(zero).min(pi[i])
                    })
                    .sum();
                assert_eq!(coverage, Ratio::from_integer(1) - alpha);

                let incl = pmf.randomized_inclusion(alpha_pct as f64 / 100.0);
                let float_cov: f64 = incl.iter().zip(pmf.probs()).map(|(a, b)| a * b).sum();
                assert!((float_cov - (1.0 - alpha_pct as f64 / 100.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn randomized_oracle_is_no_larger() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..300 {
            let k = rng.random_range(2..7);
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let pmf = PopulationPmf::new(raw.iter().map(|v| v / total).collect()).unwrap();
            let alpha = rng.random_range(0.01..0.5);
            let fixed = oracle_set(&pmf, alpha, 0.0, false).unwrap();
            let expected_size: f64 = pmf.randomized_inclusion(alpha).iter().sum();
            assert!(expected_size <= fixed.size().unwrap() as f64 + 1e-12);
            let u = rng.random::<f64>();
            let rand_set = oracle_set(&pmf, alpha, u, true).unwrap();
            let extra: Vec<usize> = match &rand_set.region {
                crate::set::Region::Labels { labels, .. } => labels
                    .iter()
                    .copied()
                    .filter(|&l| !fixed.contains(&Outcome::Category { label: l, k }))
                    .collect(),
                _ => unreachable!(),
            };
            assert!(extra.len() <= 1, "randomized set adds {extra:?}");
        }
    }
}
