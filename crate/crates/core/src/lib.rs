//! Distribution-free predictive inference.
//!
//! Conformal p-values and prediction sets for regression and classification,
//! weighted conformal prediction under covariate shift, PAC (tolerance)
//! calibration, conformal outlier screening with Benjamini–Hochberg, and a
//! Monte Carlo harness for coverage experiments.

pub mod categorical;
pub mod error;
pub mod outlier;
pub mod pac;
pub mod pvalue;
pub mod set;
pub mod sim;
pub mod special;
pub mod split;
pub mod types;
pub mod weighted;

pub use error::{Error, Result};
pub use pvalue::{conformal_p, prediction_set_by_inversion, PValueResult, ScoreFunction};
pub use set::{PredictionSet, Region};
pub use types::{
    empirical_quantile, order_statistic, CalibrationSet, ExtendedReal, LabeledSample, Outcome, ScoreBag, TestPoint,
};
