use crate::categorical::{LabelCounts, PopulationPmf};
use crate::error::{check_alpha, domain, Result};
use crate::set::{PredictionSet, Region};
use crate::special::student_t_quantile;
use crate::types::{empirical_quantile, ExtendedReal, ScoreBag};

fn mean_and_sd(y: &ScoreBag) -> Result<(f64, f64)> {
    let n = y.len();
    if n < 2 {
        return Err(domain("the normal prediction bound needs at least two observations"));
    }
    let sorted = y.sorted();
    if sorted[0] == sorted[n - 1] {
        return Ok((sorted[0], 0.0));
    }
    let mean = y.values().iter().sum::<f64>() / n as f64;
    let ss: f64 = y.values().iter().map(|v| (v - mean).powi(2)).sum();
    Ok((mean, (ss / (n - 1) as f64).sqrt()))
}

/// `Ȳ + t_{1-alpha, n-1} sd(Y) sqrt(1 + 1/n)`.
pub fn parametric_normal_bound(y_values: &ScoreBag, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let (mean, sd) = mean_and_sd(y_values)?;
    if sd == 0.0 {
        return Ok(mean);
    }
    let n = y_values.len() as f64;
    let t = student_t_quantile(1.0 - alpha, n - 1.0)?;
    Ok(mean + t * sd * (1.0 + 1.0 / n).sqrt())
}

/// Empirical `Q(P̂; 1 - alpha)`, without the finite-sample inflation.
pub fn plugin_bound(y_values: &ScoreBag, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    match empirical_quantile(y_values, 1.0 - alpha)? {
        ExtendedReal::Finite(v) => Ok(v),
        other => Err(domain(format!("plug-in quantile is {other}"))),
    }
}

/// Posterior predictive `(1 + n_k) / (K + n)` under a uniform Dirichlet prior.
pub fn dirichlet_bayes_predictive(counts: &LabelCounts) -> Result<PopulationPmf> {
    let denom = (counts.k() + counts.n()) as f64;
    PopulationPmf::from_estimate(counts.counts().iter().map(|&c| (1 + c) as f64 / denom).collect())
}

/// Multinomial maximum-likelihood estimate `n_k / n`.
pub fn plugin_pmf(counts: &LabelCounts) -> Result<PopulationPmf> {
    if counts.n() == 0 {
        return Err(domain("plug-in estimate needs at least one observation"));
    }
    let n = counts.n() as f64;
    PopulationPmf::from_estimate(counts.counts().iter().map(|&c| c as f64 / n).collect())
}

/// The whole outcome space when `u <= 1 - alpha`, otherwise nothing.
pub fn trivial_randomized_set(u: f64, alpha: f64) -> Result<PredictionSet> {
    check_alpha(alpha)?;
    crate::types::check_unit(u)?;
    Ok(PredictionSet::new(Region::Randomized { full: u <= 1.0 - alpha }, alpha))
}
