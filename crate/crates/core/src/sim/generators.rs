use serde::{Deserialize, Serialize};

use crate::categorical::PopulationPmf;
use crate::error::{domain, Error, Result};
use crate::special::{normal_cdf, normal_quantile, student_t_quantile};

/// Absolute tolerance on the total weight of mixture components.
pub const MIXTURE_WEIGHT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub mu: f64,
    /// Variance, not standard deviation.
    pub var: f64,
    pub weight: f64,
}

/// Data-generating distribution of a simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    Normal { mu: f64, sigma: f64 },
    StudentT { nu: f64 },
    NormalMixture { components: Vec<MixtureComponent> },
    Multinomial { pmf: PopulationPmf },
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            GeneratorSpec::Normal { mu, sigma } => {
                if !mu.is_finite() || !(sigma.is_finite() && *sigma > 0.0) {
                    return Err(domain(format!(
                        "normal needs finite mu and sigma > 0, got ({mu}, {sigma})"
                    )));
                }
            }
            GeneratorSpec::StudentT { nu } => {
                if !(nu.is_finite() && *nu > 0.0) {
                    return Err(domain(format!("degrees of freedom must be positive, got {nu}")));
                }
            }
            GeneratorSpec::NormalMixture { components } => {
                if components.is_empty() {
                    return Err(domain("mixture needs at least one component"));
                }
                for c in components {
                    if !c.mu.is_finite() || !(c.var.is_finite() && c.var > 0.0) || c.weight.is_nan() || c.weight < 0.0 {
                        return Err(domain(format!("invalid mixture component {c:?}")));
                    }
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if (total - 1.0).abs() > MIXTURE_WEIGHT_TOLERANCE {
                    return Err(domain(format!("mixture weights sum to {total}, not 1")));
                }
            }
            GeneratorSpec::Multinomial { .. } => {}
        }
        Ok(())
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self, GeneratorSpec::Multinomial { .. })
    }

    /// Inverse-CDF draw of a continuous outcome from a uniform in (0, 1).
    pub fn sample_continuous(&self, u: f64) -> Result<f64> {
        match self {
            GeneratorSpec::Normal { mu, sigma } => Ok(mu + sigma * normal_quantile(u)),
            GeneratorSpec::StudentT { nu } => student_t_quantile(u, *nu),
            GeneratorSpec::NormalMixture { components } => {
                // The uniform picks the component, then is rescaled to a fresh
                // uniform within that component's slice of (0, 1).
                let mut start = 0.0;
                let last = components.iter().rposition(|c| c.weight > 0.0).unwrap_or(0);
                for (j, c) in components.iter().enumerate() {
                    let end = start + c.weight;
                    if c.weight > 0.0 && (u < end || j == last) {
                        let v = ((u - start) / c.weight).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
                        return Ok(c.mu + c.var.sqrt() * normal_quantile(v));
                    }
                    start = end;
                }
                Err(Error::Numerical("mixture has no positive weight".into()))
            }
            GeneratorSpec::Multinomial { .. } => Err(domain("multinomial generator has no continuous draw")),
        }
    }

    /// Inverse-CDF draw of a 1-based label from a uniform in (0, 1).
    pub fn sample_label(&self, u: f64) -> Result<usize> {
        match self {
            GeneratorSpec::Multinomial { pmf } => Ok(sample_label(pmf, u)),
            _ => Err(domain("only the multinomial generator draws labels")),
        }
    }

    /// `Q(P*; tau)` of a continuous generator.
    pub fn population_quantile(&self, tau: f64) -> Result<f64> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(domain(format!("quantile level must lie in (0, 1), got {tau}")));
        }
        match self {
            GeneratorSpec::Normal { mu, sigma } => Ok(mu + sigma * normal_quantile(tau)),
            GeneratorSpec::StudentT { nu } => student_t_quantile(tau, *nu),
            GeneratorSpec::NormalMixture { components } => mixture_quantile(components, tau),
            GeneratorSpec::Multinomial { .. } => Err(domain("multinomial generator has no continuous quantile")),
        }
    }
}

pub(crate) fn sample_label(pmf: &PopulationPmf, u: f64) -> usize {
    let probs = pmf.probs();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if p > 0.0 && u < cum {
            return i + 1;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) + 1
}

pub fn mixture_cdf(components: &[MixtureComponent], x: f64) -> f64 {
    components
        .iter()
        .map(|c| c.weight * normal_cdf((x - c.mu) / c.var.sqrt()))
        .sum()
}

/// Mixture quantile by bisection on the mixture CDF.
pub fn mixture_quantile(components: &[MixtureComponent], tau: f64) -> Result<f64> {
    let spread = components.iter().map(|c| c.var.sqrt()).fold(0.0, f64::max);
    let mut lo = components.iter().map(|c| c.mu).fold(f64::INFINITY, f64::min) - 40.0 * spread;
    let mut hi = components.iter().map(|c| c.mu).fold(f64::NEG_INFINITY, f64::max) + 40.0 * spread;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mixture_cdf(components, mid) < tau {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x = 0.5 * (lo + hi);
    if !x.is_finite() {
        return Err(Error::Numerical(format!("mixture quantile at {tau} did not converge")));
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn appendix_mixture() -> Vec<MixtureComponent> {
        vec![
            MixtureComponent {
                mu: -2.0,
                var: 0.01,
                weight: 0.09,
            },
            MixtureComponent {
                mu: 0.0,
                var: 1.0,
                weight: 0.82,
            },
            MixtureComponent {
                mu: 2.0,
                var: 0.01,
                weight: 0.09,
            },
        ]
    }

    #[test]
    fn mixture_quantile_inverts_the_cdf() {
        let comps = appendix_mixture();
        for i in 1..200 {
            let tau = i as f64 / 200.0;
            let x = mixture_quantile(&comps, tau).unwrap();
            assert!((mixture_cdf(&comps, x) - tau).abs() < 1e-8, "tau = {tau}");
        }
    }

    #[test]
    fn validation() {
        assert!(GeneratorSpec::Normal { mu: 0.0, sigma: 0.0 }.validate().is_err());
        assert!(GeneratorSpec::StudentT { nu: -1.0 }.validate().is_err());
        let mut comps = appendix_mixture();
        assert!(GeneratorSpec::NormalMixture {
            components: comps.clone()
        }
        .validate()
        .is_ok());
        comps[0].weight = 0.1;
        assert!(GeneratorSpec::NormalMixture { components: comps }.validate().is_err());
    }

    #[test]
    fn label_sampling_respects_zero_mass() {
        let pmf = PopulationPmf::new(vec![0.75, 0.15, 0.09, 0.01, 0.0]).unwrap();
        assert_eq!(sample_label(&pmf, 0.0), 1);
        assert_eq!(sample_label(&pmf, 0.7499), 1);
        assert_eq!(sample_label(&pmf, 0.75), 2);
        assert_eq!(sample_label(&pmf, 0.995), 4);
        assert_eq!(sample_label(&pmf, 1.0 - 1e-17), 4);
        let pmf = PopulationPmf::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(sample_label(&pmf, 0.0), 2);
    }

    #[test]
    fn json_shape() {
        let g: GeneratorSpec = serde_json::from_str(r#"{"kind":"student_t","nu":3}"#).unwrap();
        assert_eq!(g, GeneratorSpec::StudentT { nu: 3.0 });
        let g: GeneratorSpec = serde_json::from_str(r#"{"kind":"multinomial","pmf":[0.5,0.5]}"#).unwrap();
        assert!(g.is_categorical());
        assert!(serde_json::from_str::<GeneratorSpec>(r#"{"kind":"multinomial","pmf":[0.5,0.6]}"#).is_err());
    }

    #[test]
    fn quantiles() {
        let n = GeneratorSpec::Normal { mu: 1.0, sigma: 2.0 };
        assert!((n.population_quantile(0.9).unwrap() - (1.0 + 2.0 * 1.2815515655446004)).abs() < 1e-9);
        let t = GeneratorSpec::StudentT { nu: 3.0 };
        assert!((t.population_quantile(0.9).unwrap() - 1.6377443536962102).abs() < 1e-9);
        assert!(n.population_quantile(1.0).is_err());
    }
}
