use serde::{Deserialize, Serialize};

use crate::types::{ExtendedReal, Outcome};

/// Shape of a prediction set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// Finite subset of an explicit candidate list.
    Outcomes(Vec<Outcome>),
    /// Subset of the labels `1..=k`, ascending.
    Labels { labels: Vec<usize>, k: usize },
    /// Closed interval `[lower, upper]`; empty when `lower > upper`.
    Interval { lower: ExtendedReal, upper: ExtendedReal },
    /// Either the whole outcome space or nothing.
    Randomized { full: bool },
}

/// A prediction set together with the miscoverage level it was built for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub region: Region,
    pub alpha: f64,
}

impl PredictionSet {
    pub fn new(region: Region, alpha: f64) -> Self {
        PredictionSet { region, alpha }
    }

    pub fn interval(lower: ExtendedReal, upper: ExtendedReal, alpha: f64) -> Self {
        PredictionSet::new(Region::Interval { lower, upper }, alpha)
    }

    pub fn labels(labels: Vec<usize>, k: usize, alpha: f64) -> Self {
        PredictionSet::new(Region::Labels { labels, k }, alpha)
    }

    pub fn is_empty(&self) -> bool {
        match &self.region {
            Region::Outcomes(v) => v.is_empty(),
            Region::Labels { labels, .. } => labels.is_empty(),
            Region::Interval { lower, upper } => lower > upper,
            Region::Randomized { full } => !full,
        }
    }

    /// Number of members for finite sets; `None` for intervals and the
    /// randomized full space.
    pub fn size(&self) -> Option<usize> {
        match &self.region {
            Region::Outcomes(v) => Some(v.len()),
            Region::Labels { labels, .. } => Some(labels.len()),
            Region::Interval { .. } => {
                if self.is_empty() {
                    Some(0)
                } else {
                    None
                }
            }
            Region::Randomized { full } => (!full).then_some(0),
        }
    }

    pub fn contains(&self, y: &Outcome) -> bool {
        match &self.region {
            Region::Outcomes(v) => v.contains(y),
            Region::Labels { labels, .. } => y.as_label().is_some_and(|l| labels.binary_search(&l).is_ok()),
            Region::Interval { lower, upper } => y.as_real().is_some_and(|v| {
                let v = ExtendedReal::Finite(v);
                *lower <= v && v <= *upper
            }),
            Region::Randomized { full } => *full,
        }
    }

    /// Interval endpoints, if this is an interval.
    pub fn bounds(&self) -> Option<(ExtendedReal, ExtendedReal)> {
        match self.region {
            Region::Interval { lower, upper } => Some((lower, upper)),
            _ => None,
        }
    }

    /// Width of a nonempty interval (`+inf` if unbounded).
    pub fn width(&self) -> Option<f64> {
        let (lo, hi) = self.bounds()?;
        if lo > hi {
            return Some(0.0);
        }
        Some(hi.to_f64() - lo.to_f64())
    }
}
