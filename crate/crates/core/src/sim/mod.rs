//! Monte Carlo coverage experiments for one-sided prediction bounds and for
//! categorical prediction sets.
//!
//! Each replicate draws its data from a substream of ChaCha8 fixed by the
//! seed, the sample size and the replicate index, so results do not depend
//! on how replicates are scheduled across threads.

mod baselines;
mod generators;

pub use baselines::{
    dirichlet_bayes_predictive, parametric_normal_bound, plugin_bound, plugin_pmf, trivial_randomized_set,
};
pub use generators::{mixture_cdf, mixture_quantile, GeneratorSpec, MixtureComponent};

use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::categorical::{categorical_conformal_set, oracle_set, LabelCounts};
use crate::error::{check_alpha, Error, Result};
use crate::split::one_sided_upper_bound;
use crate::types::{ExtendedReal, ScoreBag};

pub const DEFAULT_REPLICATES: usize = 10_000;
pub const FAST_REPLICATES: usize = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Conformal,
    Oracle,
    Plugin,
    ParametricNormal,
    DirichletBayes,
    TrivialRandomized,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Conformal => "conformal",
            Method::Oracle => "oracle",
            Method::Plugin => "plugin",
            Method::ParametricNormal => "parametric_normal",
            Method::DirichletBayes => "dirichlet_bayes",
            Method::TrivialRandomized => "trivial_randomized",
        }
    }

    fn valid_for(self, categorical: bool) -> bool {
        match self {
            Method::ParametricNormal => !categorical,
            Method::DirichletBayes => categorical,
            // As a bound it is +inf or -inf, so the excess has no mean.
            Method::TrivialRandomized => categorical,
            _ => true,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub generator: GeneratorSpec,
    pub n_grid: Vec<usize>,
    pub alpha: f64,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    pub methods: Vec<Method>,
}

fn default_replicates() -> usize {
    DEFAULT_REPLICATES
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        check_alpha(self.alpha)?;
        if self.replicates == 0 {
            return Err(config("replicates must be at least 1"));
        }
        if self.n_grid.is_empty() || self.methods.is_empty() {
            return Err(config("n_grid and methods must be non-empty"));
        }
        let categorical = self.generator.is_categorical();
        for m in &self.methods {
            if !m.valid_for(categorical) {
                let kind = if categorical { "categorical" } else { "continuous" };
                return Err(config(format!("method {m} is not available for a {kind} generator")));
            }
        }
        let min_n = if self.methods.contains(&Method::ParametricNormal) {
            2
        } else {
            1
        };
        if let Some(n) = self.n_grid.iter().find(|&&n| n < min_n) {
            return Err(config(format!("sample size {n} is below the minimum of {min_n}")));
        }
        Ok(())
    }
}

fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Coverage and excess of one method at one sample size. The excess is the
/// bound minus the oracle bound for continuous outcomes, and the set size
/// minus the randomized-oracle set size for categorical ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: Method,
    pub n: usize,
    pub coverage: f64,
    pub coverage_se: f64,
    pub excess: f64,
    pub excess_se: f64,
}

/// Substream for replicate `replicate` of the cell with sample size `n`.
pub fn replicate_rng(seed: u64, n: usize, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n as u64);
    rng.set_word_pos((replicate as u128) << 40);
    rng
}

/// Uniform on the open interval (0, 1).
pub fn open_uniform(rng: &mut impl RngCore) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Summation by recursive halving; order-fixed, with error growing like log n.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

fn summarize(method: Method, n: usize, covered: &[f64], excess: &[f64]) -> MetricRow {
    let reps = covered.len() as f64;
    let coverage = pairwise_sum(covered) / reps;
    let mean_excess = pairwise_sum(excess) / reps;
    let excess_se = if covered.len() > 1 {
        let dev: Vec<f64> = excess.iter().map(|e| (e - mean_excess).powi(2)).collect();
        (pairwise_sum(&dev) / (reps - 1.0) / reps).sqrt()
    } else {
        0.0
    };
    MetricRow {
        method,
        n,
        coverage,
        coverage_se: (coverage * (1.0 - coverage) / reps).sqrt(),
        excess: mean_excess,
        excess_se,
    }
}

/// Runs every replicate of every cell and aggregates per method, in the
/// order of `n_grid` then `methods`.
fn run_cells<F>(config: &ExperimentConfig, replicate: F) -> Result<Vec<MetricRow>>
where
    F: Fn(usize, &mut ChaCha8Rng) -> Result<Vec<(bool, f64)>> + Sync,
{
    let mut rows = Vec::new();
    for &n in &config.n_grid {
        let outcomes: Vec<Vec<(bool, f64)>> = (0..config.replicates)
            .into_par_iter()
            .map(|k| replicate(n, &mut replicate_rng(config.seed, n, k)))
            .collect::<Result<_>>()?;
        for (j, &method) in config.methods.iter().enumerate() {
            let covered: Vec<f64> = outcomes.iter().map(|o| f64::from(u8::from(o[j].0))).collect();
            let excess: Vec<f64> = outcomes.iter().map(|o| o[j].1).collect();
            rows.push(summarize(method, n, &covered, &excess));
        }
    }
    Ok(rows)
}

/// One-sided upper prediction bounds for a continuous outcome.
pub fn run_continuous_experiment(config: &ExperimentConfig) -> Result<Vec<MetricRow>> {
    config.validate()?;
    if config.generator.is_categorical() {
        return Err(config_err_kind("continuous", "categorical"));
    }
    let alpha = config.alpha;
    let gen = &config.generator;
    let oracle = gen.population_quantile(1.0 - alpha)?;
    run_cells(config, |n, rng| {
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            y.push(gen.sample_continuous(open_uniform(rng))?);
        }
        let y_new = gen.sample_continuous(open_uniform(rng))?;
        let bag = ScoreBag::new(y)?;
        config
            .methods
            .iter()
            .map(|m| {
                let bound = match m {
                    Method::Conformal => one_sided_upper_bound(&bag, alpha)?,
                    Method::Oracle => ExtendedReal::Finite(oracle),
                    Method::Plugin => ExtendedReal::Finite(plugin_bound(&bag, alpha)?),
                    Method::ParametricNormal => ExtendedReal::Finite(parametric_normal_bound(&bag, alpha)?),
                    _ => unreachable!("rejected by validate"),
                };
                Ok((ExtendedReal::Finite(y_new) <= bound, bound.to_f64() - oracle))
            })
            .collect()
    })
}

/// Prediction sets for a categorical outcome without features.
pub fn run_categorical_experiment(config: &ExperimentConfig) -> Result<Vec<MetricRow>> {
    config.validate()?;
    let pmf = match &config.generator {
        GeneratorSpec::Multinomial { pmf } => pmf,
        _ => return Err(config_err_kind("categorical", "continuous")),
    };
    let alpha = config.alpha;
    let k = pmf.k();
    run_cells(config, |n, rng| {
        let labels: Vec<usize> = (0..n)
            .map(|_| generators::sample_label(pmf, open_uniform(rng)))
            .collect();
        let y_new = generators::sample_label(pmf, open_uniform(rng));
        let u_new = open_uniform(rng);
        let us: Vec<f64> = (0..n).map(|_| open_uniform(rng)).collect();
        let counts = LabelCounts::from_labels(&labels, k)?;
        let oracle = oracle_set(pmf, alpha, u_new, true)?;
        let oracle_size = oracle.size().unwrap_or(0) as f64;
        config
            .methods
            .iter()
            .map(|m| {
                let (covered, size) = match m {
                    Method::Conformal => {
                        let set = categorical_conformal_set(&labels, &us, u_new, k, alpha)?;
                        label_outcome(&set, y_new, k)
                    }
                    Method::Oracle => label_outcome(&oracle, y_new, k),
                    Method::Plugin => label_outcome(&oracle_set(&plugin_pmf(&counts)?, alpha, u_new, true)?, y_new, k),
                    Method::DirichletBayes => {
                        let predictive = dirichlet_bayes_predictive(&counts)?;
                        label_outcome(&oracle_set(&predictive, alpha, u_new, true)?, y_new, k)
                    }
                    Method::TrivialRandomized => {
                        let full = !trivial_randomized_set(u_new, alpha)?.is_empty();
                        (full, if full { k } else { 0 })
                    }
                    Method::ParametricNormal => unreachable!("rejected by validate"),
                };
                Ok((covered, size as f64 - oracle_size))
            })
            .collect()
    })
}

fn label_outcome(set: &crate::set::PredictionSet, y: usize, k: usize) -> (bool, usize) {
    (
        set.contains(&crate::types::Outcome::Category { label: y, k }),
        set.size().unwrap_or(0),
    )
}

fn config_err_kind(wanted: &str, got: &str) -> Error {
    config(format!("a {wanted} experiment was given a {got} generator"))
}

/// Dispatches on the generator kind.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<MetricRow>> {
    if config.generator.is_categorical() {
        run_categorical_experiment(config)
    } else {
        run_continuous_experiment(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::categorical::PopulationPmf;

    fn normal_config(methods: Vec<Method>, n_grid: Vec<usize>, replicates: usize) -> ExperimentConfig {
        ExperimentConfig {
            generator: GeneratorSpec::Normal { mu: 0.0, sigma: 1.0 },
            n_grid,
            alpha: 0.1,
            replicates,
            seed: 7,
            methods,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = normal_config(vec![Method::DirichletBayes], vec![10], 10);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.methods = vec![Method::TrivialRandomized];
        assert!(c.validate().is_err());
        c.methods = vec![Method::ParametricNormal];
        c.n_grid = vec![1];
        assert!(c.validate().is_err());
        c.n_grid = vec![2];
        assert!(c.validate().is_ok());
        c.replicates = 0;
        assert!(c.validate().is_err());
        let cat = ExperimentConfig {
            generator: GeneratorSpec::Multinomial {
                pmf: PopulationPmf::new(vec![0.5, 0.5]).unwrap(),
            },
            methods: vec![Method::ParametricNormal],
            ..normal_config(vec![], vec![5], 5)
        };
        assert!(cat.validate().is_err());
        assert!(run_continuous_experiment(&ExperimentConfig {
            methods: vec![Method::Oracle],
            ..cat
        })
        .is_err());
    }

    #[test]
    fn config_json_defaults() {
        let c: ExperimentConfig = serde_json::from_str(
            r#"{"generator":{"kind":"normal","mu":0,"sigma":1},"n_grid":[10],"alpha":0.1,"methods":["conformal","parametric_normal"]}"#,
        )
        .unwrap();
        assert_eq!(c.replicates, DEFAULT_REPLICATES);
        assert_eq!(c.seed, 0);
        assert_eq!(c.methods, vec![Method::Conformal, Method::ParametricNormal]);
    }

    #[test]
    fn substreams_are_distinct_and_reproducible() {
        let a = open_uniform(&mut replicate_rng(1, 10, 0));
        assert_eq!(a, open_uniform(&mut replicate_rng(1, 10, 0)));
        assert_ne!(a, open_uniform(&mut replicate_rng(1, 10, 1)));
        assert_ne!(a, open_uniform(&mut replicate_rng(1, 11, 0)));
        assert_ne!(a, open_uniform(&mut replicate_rng(2, 10, 0)));
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let c = normal_config(
            vec![Method::Conformal, Method::Plugin, Method::ParametricNormal],
            vec![5, 30],
            400,
        );
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run_experiment(&c).unwrap())
        };
        let one = run(1);
        let four = run(4);
        assert_eq!(format!("{one:?}"), format!("{four:?}"));
    }

    #[test]
    fn continuous_cells() {
        let c = normal_config(
            vec![Method::Conformal, Method::Oracle, Method::Plugin],
            vec![10, 100],
            10_000,
        );
        let rows = run_continuous_experiment(&c).unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            let band = 3.0 * r.coverage_se;
            match r.method {
                Method::Conformal => {
                    assert!(
                        r.coverage >= 0.9 - band && r.coverage <= 0.9 + 1.0 / (r.n + 1) as f64 + band,
                        "{r:?}"
                    )
                }
                Method::Oracle => {
                    assert!((r.coverage - 0.9).abs() <= band, "{r:?}");
                    assert_eq!(r.excess, 0.0);
                }
                Method::Plugin if r.n == 10 => assert!(r.coverage < 0.9 - band, "{r:?}"),
                _ => {}
            }
        }
    }

    #[test]
    fn categorical_cells() {
        let c = ExperimentConfig {
            generator: GeneratorSpec::Multinomial {
                pmf: PopulationPmf::uniform(5).unwrap(),
            },
            n_grid: vec![20],
            alpha: 0.1,
            replicates: 10_000,
            seed: 3,
            methods: vec![
                Method::Conformal,
                Method::Oracle,
                Method::Plugin,
                Method::TrivialRandomized,
            ],
        };
        let rows = run_categorical_experiment(&c).unwrap();
        let get = |m| rows.iter().find(|r| r.method == m).unwrap();
        assert!(get(Method::Conformal).coverage >= 0.9 - 3.0 * get(Method::Conformal).coverage_se);
        assert!(get(Method::Plugin).coverage < 0.9 - 3.0 * get(Method::Plugin).coverage_se);
        assert_eq!(get(Method::Oracle).excess, 0.0);
        assert!(
            (get(Method::TrivialRandomized).coverage - 0.9).abs() < 3.0 * get(Method::TrivialRandomized).coverage_se
        );
    }

    #[test]
    fn pairwise_sum_is_exact_on_integers() {
        let v: Vec<f64> = (0..10_001).map(|i| (i % 2) as f64).collect();
        assert_eq!(pairwise_sum(&v), 5000.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }
}
