//! Model artifacts: small JSON descriptions of fitted linear models, so that
//! calibration and prediction can run without bindings to a training stack.
//!
//! ```json
//! {"kind": "linear", "mean": {"intercept": 0.5, "coef": [2.0]}}
//! {"kind": "linear", "q_lo": {...}, "q_hi": {...}}
//! {"kind": "softmax", "intercepts": [0, 1, -1], "coef": [[1.0], [0.0], [-1.0]]}
//! ```

use std::path::Path;

use conformal_core::split::{Classifier, RegressionModels};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub intercept: f64,
    pub coef: Vec<f64>,
}

impl Linear {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelArtifact {
    Linear {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mean: Option<Linear>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        q_lo: Option<Linear>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        q_hi: Option<Linear>,
    },
    Softmax {
        intercepts: Vec<f64>,
        coef: Vec<Vec<f64>>,
    },
}

impl ModelArtifact {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    /// Checks that every coefficient vector matches the feature dimension.
    pub fn check_dimension(&self, d: usize) -> Result<(), CliError> {
        let bad = |what: &str, got: usize| {
            Err(CliError::Input(format!(
                "model {what} has {got} coefficients for {d} features"
            )))
        };
        match self {
            ModelArtifact::Linear { mean, q_lo, q_hi } => {
                for (what, m) in [("mean", mean), ("q_lo", q_lo), ("q_hi", q_hi)] {
                    if let Some(m) = m {
                        if m.coef.len() != d {
                            return bad(what, m.coef.len());
                        }
                    }
                }
            }
            ModelArtifact::Softmax { intercepts, coef } => {
                if intercepts.is_empty() || coef.len() != intercepts.len() {
                    return Err(CliError::Input(
                        "softmax model needs one coefficient row per class".into(),
                    ));
                }
                if let Some(row) = coef.iter().find(|r| r.len() != d) {
                    return bad("softmax row", row.len());
                }
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> Option<usize> {
        match self {
            ModelArtifact::Softmax { intercepts, .. } => Some(intercepts.len()),
            ModelArtifact::Linear { .. } => None,
        }
    }

    pub fn regression(&self) -> Result<RegressionModels<'_>, CliError> {
        let ModelArtifact::Linear { mean, q_lo, q_hi } = self else {
            return Err(CliError::Input("regression methods need a linear model".into()));
        };
        let mut models = match mean {
            Some(m) => RegressionModels::with_mean(move |x: &[f64]| m.eval(x)),
            None => RegressionModels::default(),
        };
        if let (Some(lo), Some(hi)) = (q_lo, q_hi) {
            models.q_lo = Some(Box::new(move |x: &[f64]| lo.eval(x)));
            models.q_hi = Some(Box::new(move |x: &[f64]| hi.eval(x)));
        }
        Ok(models.concurrent())
    }

    pub fn classifier(&self) -> Result<Classifier<'_>, CliError> {
        let ModelArtifact::Softmax { intercepts, coef } = self else {
            return Err(CliError::Input("classification methods need a softmax model".into()));
        };
        Ok(Classifier::new(move |x: &[f64]| softmax(intercepts, coef, x)).concurrent())
    }
}

fn softmax(intercepts: &[f64], coef: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = intercepts
        .iter()
        .zip(coef)
        .map(|(b, w)| b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}
