use std::path::Path;

use clap::ValueEnum;
use conformal_core::split::{calibrated_quantile, one_sided_upper_bound};
use conformal_core::{ExtendedReal, ScoreBag};
use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::model::ModelArtifact;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum CalibMethod {
    /// `|y - m(x)|` around a mean model.
    MeanResidual,
    /// Conformalized quantile regression.
    Cqr,
    /// `-π̂_y(x)` against a probability threshold.
    ClassThreshold,
    /// Cumulative probability mass of the labels ranked at or above `y`.
    ClassCumulative,
    /// Upper bound on `y` itself, without features.
    OneSided,
}

impl CalibMethod {
    pub fn is_classification(self) -> bool {
        matches!(self, CalibMethod::ClassThreshold | CalibMethod::ClassCumulative)
    }
}

/// Everything prediction needs: the sorted calibration scores and the
/// threshold derived from them, plus the model when it was not external.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub method: CalibMethod,
    pub alpha: f64,
    pub n: usize,
    pub scores: Vec<f64>,
    pub threshold: ExtendedReal,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default)]
    pub randomize: bool,
    /// `None` when scores were computed outside this tool.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelArtifact>,
}

pub fn threshold(method: CalibMethod, scores: &ScoreBag, alpha: f64) -> Result<ExtendedReal, CliError> {
    Ok(match method {
        CalibMethod::OneSided => one_sided_upper_bound(scores, alpha)?,
        _ => calibrated_quantile(scores, alpha)?,
    })
}

impl Snapshot {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let snap: Snapshot =
            serde_json::from_str(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        if snap.scores.len() != snap.n || snap.n == 0 {
            return Err(CliError::Input(format!(
                "{}: snapshot score count does not match n",
                path.display()
            )));
        }
        Ok(snap)
    }

    /// The same calibration at a different level.
    pub fn at_level(mut self, alpha: f64) -> Result<Self, CliError> {
        let bag = ScoreBag::new(self.scores.clone())?;
        self.threshold = threshold(self.method, &bag, alpha)?;
        self.alpha = alpha;
        Ok(self)
    }
}
