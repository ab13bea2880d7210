//! Data model shared by every conformal procedure: samples, calibration
//! snapshots, score multisets and extended-real thresholds.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{domain, Result};

/// Outcome of a labeled case: a real response or one of `k` categories.
///
/// Category labels are 1-based, matching the `label` column of the CSV
/// schema.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Real(f64),
    Category { label: usize, k: usize },
}

impl Outcome {
    pub fn real(value: f64) -> Result<Self> {
        if value.is_nan() {
            return Err(domain("real outcome is NaN"));
        }
        Ok(Outcome::Real(value))
    }

    pub fn category(label: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(domain("number of categories must be positive"));
        }
        if label == 0 || label > k {
            return Err(domain(format!("label {label} outside 1..={k}")));
        }
        Ok(Outcome::Category { label, k })
    }

    pub fn as_real(&self) -> Option<f64> {
        match *self {
            Outcome::Real(v) => Some(v),
            Outcome::Category { .. } => None,
        }
    }

    pub fn as_label(&self) -> Option<usize> {
        match *self {
            Outcome::Category { label, .. } => Some(label),
            Outcome::Real(_) => None,
        }
    }
}

/// A case `(x, y)` with an optional auxiliary uniform used for tie-breaking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub tiebreak_u: Option<f64>,
    pub outcome: Outcome,
}

impl LabeledSample {
    pub fn new(features: Vec<f64>, outcome: Outcome) -> Self {
        LabeledSample {
            features,
            tiebreak_u: None,
            outcome,
        }
    }

    pub fn with_u(mut self, u: f64) -> Result<Self> {
        check_unit(u)?;
        self.tiebreak_u = Some(u);
        Ok(self)
    }
}

/// An unlabeled test point. The outcome is supplied per candidate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TestPoint {
    pub features: Vec<f64>,
    pub tiebreak_u: Option<f64>,
}

impl TestPoint {
    pub fn new(features: Vec<f64>) -> Self {
        TestPoint {
            features,
            tiebreak_u: None,
        }
    }

    pub fn with_u(mut self, u: f64) -> Result<Self> {
        check_unit(u)?;
        self.tiebreak_u = Some(u);
        Ok(self)
    }

    /// The labeled sample obtained by hypothesizing `outcome` for this point.
    pub fn hypothesize(&self, outcome: Outcome) -> LabeledSample {
        LabeledSample {
            features: self.features.clone(),
            tiebreak_u: self.tiebreak_u,
            outcome,
        }
    }
}

impl From<Vec<f64>> for TestPoint {
    fn from(features: Vec<f64>) -> Self {
        TestPoint::new(features)
    }
}

pub(crate) fn check_unit(u: f64) -> Result<()> {
    if (0.0..=1.0).contains(&u) {
        Ok(())
    } else {
        Err(domain(format!("auxiliary uniform {u} outside [0, 1]")))
    }
}

/// Immutable snapshot of the `n >= 1` calibration cases.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    samples: Arc<[LabeledSample]>,
}

impl CalibrationSet {
    pub fn new(samples: Vec<LabeledSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(domain("empty calibration set"));
        }
        for s in &samples {
            if let Some(u) = s.tiebreak_u {
                check_unit(u)?;
            }
            if let Outcome::Real(v) = s.outcome {
                if v.is_nan() {
                    return Err(domain("calibration outcome is NaN"));
                }
            }
        }
        Ok(CalibrationSet {
            samples: samples.into(),
        })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The calibration cases followed by the hypothesized test case, i.e. the
    /// augmented sample whose last position is the test role.
    pub fn augmented(&self, test: LabeledSample) -> Vec<LabeledSample> {
        let mut bag = Vec::with_capacity(self.len() + 1);
        bag.extend_from_slice(&self.samples);
        bag.push(test);
        bag
    }
}

/// A multiset of finite scores. Keeps the insertion order and a sorted copy.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBag {
    values: Vec<f64>,
    sorted: Vec<f64>,
}

impl ScoreBag {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(domain(format!("score {bad} is not a finite real")));
        }
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        Ok(ScoreBag { values, sorted })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sorted(&self) -> &[f64] {
        &self.sorted
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of scores `>= s`.
    pub fn count_at_least(&self, s: f64) -> usize {
        self.sorted.len() - self.sorted.partition_point(|&v| v < s)
    }
}

impl TryFrom<Vec<f64>> for ScoreBag {
    type Error = crate::Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ScoreBag::new(values)
    }
}

/// A real number or one of the two infinities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtendedReal {
    NegInf,
    Finite(f64),
    PosInf,
}

impl ExtendedReal {
    pub fn from_f64(v: f64) -> Result<Self> {
        if v.is_nan() {
            Err(domain("NaN is not an extended real"))
        } else if v == f64::INFINITY {
            Ok(ExtendedReal::PosInf)
        } else if v == f64::NEG_INFINITY {
            Ok(ExtendedReal::NegInf)
        } else {
            Ok(ExtendedReal::Finite(v))
        }
    }

    pub fn to_f64(self) -> f64 {
        match self {
            ExtendedReal::NegInf => f64::NEG_INFINITY,
            ExtendedReal::Finite(v) => v,
            ExtendedReal::PosInf => f64::INFINITY,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, ExtendedReal::Finite(_))
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            ExtendedReal::Finite(v) => Some(v),
            _ => None,
        }
    }

    /// `self + delta` with infinities absorbing.
    pub fn shift(self, delta: f64) -> Self {
        match self {
            ExtendedReal::Finite(v) => ExtendedReal::Finite(v + delta),
            other => other,
        }
    }
}

impl std::ops::Neg for ExtendedReal {
    type Output = Self;

    fn neg(self) -> Self {
        match self {
            ExtendedReal::NegInf => ExtendedReal::PosInf,
            ExtendedReal::Finite(v) => ExtendedReal::Finite(-v),
            ExtendedReal::PosInf => ExtendedReal::NegInf,
        }
    }
}

impl Eq for ExtendedReal {}

impl Ord for ExtendedReal {
    fn cmp(&self, other: &Self) -> Ordering {
        use ExtendedReal::*;
        match (self, other) {
            (NegInf, NegInf) | (PosInf, PosInf) => Ordering::Equal,
            (NegInf, _) | (_, PosInf) => Ordering::Less,
            (_, NegInf) | (PosInf, _) => Ordering::Greater,
            (Finite(a), Finite(b)) => a.total_cmp(b),
        }
    }
}

impl PartialOrd for ExtendedReal {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for ExtendedReal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtendedReal::NegInf => f.write_str("-inf"),
            ExtendedReal::Finite(v) => write!(f, "{v}"),
            ExtendedReal::PosInf => f.write_str("inf"),
        }
    }
}

// JSON has no infinities: they travel as the strings "inf" / "-inf".
impl Serialize for ExtendedReal {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ExtendedReal::Finite(v) => serializer.serialize_f64(*v),
            ExtendedReal::PosInf => serializer.serialize_str("inf"),
            ExtendedReal::NegInf => serializer.serialize_str("-inf"),
        }
    }
}

impl<'de> Deserialize<'de> for ExtendedReal {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Num(v) => ExtendedReal::from_f64(v).map_err(serde::de::Error::custom),
            Repr::Text(s) => match s.as_str() {
                "inf" | "+inf" | "Infinity" => Ok(ExtendedReal::PosInf),
                "-inf" | "-Infinity" => Ok(ExtendedReal::NegInf),
                other => Err(serde::de::Error::custom(format!(
                    "expected a number, \"inf\" or \"-inf\", got {other:?}"
                ))),
            },
        }
    }
}

/// Relative slack used when a real-valued rank lands within rounding error of
/// an integer, e.g. `(1 - 0.1) * 10 = 9.000000000000002`.
const RANK_SNAP: f64 = 1e-9;

/// `ceil(x)` that treats values within float dust of an integer as that integer.
pub fn ceil_rank(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= RANK_SNAP * x.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// `floor(x)` with the same snapping as [`ceil_rank`].
pub fn floor_rank(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= RANK_SNAP * x.abs().max(1.0) {
        r
    } else {
        x.floor()
    }
}

/// The `tau`-quantile `inf{u : F(u) >= tau}` of the empirical distribution.
///
/// Returns the `ceil(tau * n)`-th smallest value for `tau` in `(0, 1]`, the
/// minimum for `tau = 0`, and `+inf` for `tau > 1`.
pub fn empirical_quantile(values: &ScoreBag, tau: f64) -> Result<ExtendedReal> {
    if values.is_empty() {
        return Err(domain("quantile of an empty bag"));
    }
    if tau.is_nan() || tau < 0.0 {
        return Err(domain(format!("quantile level must be >= 0, got {tau}")));
    }
    if tau > 1.0 {
        return Ok(ExtendedReal::PosInf);
    }
    let n = values.len();
    let rank = (ceil_rank(tau * n as f64) as usize).clamp(1, n);
    Ok(ExtendedReal::Finite(values.sorted()[rank - 1]))
}

/// The `k`-th smallest value (1-based), counting multiplicity.
pub fn order_statistic(values: &ScoreBag, k: usize) -> Result<f64> {
    if k == 0 || k > values.len() {
        return Err(domain(format!("order statistic rank {k} outside 1..={}", values.len())));
    }
    Ok(values.sorted()[k - 1])
}
