//! Tolerance sets `T_r = {y : s(x, y) <= S_(n-r)}` and the choice of `r`.
//!
//! For i.i.d. continuous scores the calibration-conditional miscoverage of
//! `T_r` is exactly `Beta(r + 1, n - r)`, so `r` can be chosen for a marginal
//! target (mean miscoverage at most `alpha`) or a PAC target (miscoverage at
//! most `alpha` with probability at least `1 - delta`).

use serde::{Deserialize, Serialize};

use crate::error::{check_alpha, domain, Result};
use crate::types::{ceil_rank, order_statistic, ExtendedReal, ScoreBag};

pub use crate::special::regularized_incomplete_beta;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PacTarget {
    pub alpha: f64,
    pub delta: f64,
}

impl PacTarget {
    pub fn new(alpha: f64, delta: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if !(delta > 0.0 && delta < 1.0) {
            return Err(domain(format!("delta must lie in (0, 1), got {delta}")));
        }
        Ok(PacTarget { alpha, delta })
    }
}

/// Which order statistic bounds the tolerance set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RSelection {
    /// Use `S_(n-r)`.
    Rank(usize),
    /// No `r` meets the target; the set is the whole outcome space.
    Infeasible,
}

impl RSelection {
    pub fn r(self) -> Option<usize> {
        match self {
            RSelection::Rank(r) => Some(r),
            RSelection::Infeasible => None,
        }
    }

    pub fn is_infeasible(self) -> bool {
        self == RSelection::Infeasible
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToleranceThreshold {
    pub selection: RSelection,
    pub threshold: ExtendedReal,
}

impl ToleranceThreshold {
    /// Whether a candidate score falls inside the tolerance set.
    pub fn admits(&self, score: f64) -> bool {
        ExtendedReal::Finite(score) <= self.threshold
    }
}

/// `S_(n-r)`, the `(n - r)`-th smallest calibration score.
pub fn tolerance_threshold(scores: &ScoreBag, r: usize) -> Result<ToleranceThreshold> {
    let n = scores.len();
    if r >= n {
        return Err(domain(format!("r = {r} outside 0..={}", n.saturating_sub(1))));
    }
    Ok(ToleranceThreshold {
        selection: RSelection::Rank(r),
        threshold: ExtendedReal::Finite(order_statistic(scores, n - r)?),
    })
}

/// Threshold for an already-made selection; infeasible maps to `+inf`.
pub fn threshold_for(scores: &ScoreBag, selection: RSelection) -> Result<ToleranceThreshold> {
    match selection {
        RSelection::Rank(r) => tolerance_threshold(scores, r),
        RSelection::Infeasible => Ok(ToleranceThreshold {
            selection,
            threshold: ExtendedReal::PosInf,
        }),
    }
}

/// The `r` that reproduces the split-conformal set at level `alpha`:
/// `r = n - ceil((1 - alpha)(n + 1))`.
pub fn select_r_marginal(n: usize, alpha: f64) -> Result<RSelection> {
    check_alpha(alpha)?;
    if n == 0 {
        return Err(domain("n must be at least 1"));
    }
    let rank = ceil_rank((1.0 - alpha) * (n as f64 + 1.0)) as usize;
    Ok(if rank <= n {
        RSelection::Rank(n - rank)
    } else {
        RSelection::Infeasible
    })
}

/// `P[Beta(r + 1, n - r) <= alpha]`, the probability that `T_r` has
/// calibration-conditional coverage at least `1 - alpha`.
pub fn pac_confidence(n: usize, r: usize, alpha: f64) -> Result<f64> {
    if r >= n {
        return Err(domain(format!("r = {r} outside 0..={}", n.saturating_sub(1))));
    }
    regularized_incomplete_beta(alpha, r as f64 + 1.0, (n - r) as f64)
}

/// Largest `r` with `P[Beta(r + 1, n - r) <= alpha] >= 1 - delta`.
pub fn select_r_pac(n: usize, target: PacTarget) -> Result<RSelection> {
    if n == 0 {
        return Err(domain("n must be at least 1"));
    }
    // The confidence is decreasing in r: larger r removes more of the top
    // scores and raises the miscoverage.
    let ok = |r: usize| -> Result<bool> { Ok(pac_confidence(n, r, target.alpha)? >= 1.0 - target.delta) };
    if !ok(0)? {
        return Ok(RSelection::Infeasible);
    }
    let (mut lo, mut hi) = (0usize, n - 1);
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if ok(mid)? {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok(RSelection::Rank(lo))
}

/// Typical size of calibration-conditional coverage fluctuations,
/// `sqrt(alpha (1 - alpha) / n)`.
pub fn coverage_fluctuation_sd(n: usize, alpha: f64) -> Result<f64> {
    if n == 0 {
        return Err(domain("n must be at least 1"));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(domain(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok((alpha * (1.0 - alpha) / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::ln_gamma;
    use crate::split::one_sided_upper_bound;
    use proptest::prelude::*;

    /// `P[Bin(n, p) >= k]` by summing the mass function.
    fn binomial_at_least(n: usize, k: usize, p: f64) -> f64 {
        (k..=n)
            .map(|j| {
                let ln_c = ln_gamma(n as f64 + 1.0) - ln_gamma(j as f64 + 1.0) - ln_gamma((n - j) as f64 + 1.0);
                (ln_c + j as f64 * p.ln() + (n - j) as f64 * (1.0 - p).ln()).exp()
            })
            .sum()
    }

    fn brute_force_pac(n: usize, alpha: f64, delta: f64) -> Option<usize> {
        (0..n)
            .rev()
            .find(|&r| binomial_at_least(n, r + 1, alpha) >= 1.0 - delta)
    }

    #[test]
    fn threshold_examples() {
        let s = ScoreBag::new(vec![3.0, 1.0, 5.0, 2.0, 4.0]).unwrap();
        assert_eq!(tolerance_threshold(&s, 1).unwrap().threshold, ExtendedReal::Finite(4.0));
        assert_eq!(tolerance_threshold(&s, 0).unwrap().threshold, ExtendedReal::Finite(5.0));
        assert_eq!(tolerance_threshold(&s, 4).unwrap().threshold, ExtendedReal::Finite(1.0));
        assert!(tolerance_threshold(&s, 5).is_err());
        let inf = threshold_for(&s, RSelection::Infeasible).unwrap();
        assert!(inf.admits(1e300));
    }

    #[test]
    fn marginal_examples() {
        assert_eq!(select_r_marginal(9, 0.1).unwrap(), RSelection::Rank(0));
        assert_eq!(select_r_marginal(19, 0.1).unwrap(), RSelection::Rank(1));
        assert_eq!(select_r_marginal(4, 0.05).unwrap(), RSelection::Infeasible);
    }

    #[test]
    fn pac_examples() {
        let target = PacTarget::new(0.1, 0.05).unwrap();
        assert_eq!(select_r_pac(100, target).unwrap(), RSelection::Rank(4));
        assert!(binomial_at_least(100, 5, 0.1) >= 0.95);
        assert!(binomial_at_least(100, 6, 0.1) < 0.95);
        assert_eq!(brute_force_pac(100, 0.1, 0.05), Some(4));

        assert_eq!(select_r_pac(1, target).unwrap(), RSelection::Infeasible);
        assert!((binomial_at_least(1, 1, 0.1) - 0.1).abs() < 1e-15);

        let loose = select_r_pac(100, PacTarget::new(0.1, 0.999).unwrap()).unwrap();
        assert_eq!(loose.r(), brute_force_pac(100, 0.1, 0.999));
        assert!(loose.r().unwrap() >= 4);
        assert!(PacTarget::new(0.1, 1.0).is_err());
    }

    #[test]
    fn fluctuation_examples() {
        assert!((coverage_fluctuation_sd(400, 0.05).unwrap() - 0.0109).abs() < 1e-4);
        assert_eq!(coverage_fluctuation_sd(1, 0.5).unwrap(), 0.5);
        assert_eq!(coverage_fluctuation_sd(10, 0.0).unwrap(), 0.0);
        assert!(coverage_fluctuation_sd(0, 0.5).is_err());
    }

    #[test]
    fn pac_selector_matches_binomial_oracle_on_a_grid() {
        for n in [1, 2, 5, 20, 57, 100, 300] {
            for alpha in [0.01, 0.05, 0.1, 0.3] {
                for delta in [0.01, 0.05, 0.2, 0.9] {
                    let got = select_r_pac(n, PacTarget::new(alpha, delta).unwrap()).unwrap();
                    assert_eq!(
                        got.r(),
                        brute_force_pac(n, alpha, delta),
                        "n={n} alpha={alpha} delta={delta}"
                    );
                }
            }
        }
    }

    #[test]
    fn pac_selector_is_monotone() {
        let alphas = [0.02, 0.05, 0.1, 0.2];
        let deltas = [0.01, 0.05, 0.1, 0.5];
        let r_of = |n, a, d| {
            select_r_pac(n, PacTarget::new(a, d).unwrap())
                .unwrap()
                .r()
                .map_or(-1, |r| r as i64)
        };
        for &a in &alphas {
            for &d in &deltas {
                let mut prev = -1;
                for n in 1..200 {
                    let r = r_of(n, a, d);
                    assert!(r >= prev, "n={n} alpha={a} delta={d}");
                    prev = r;
                }
            }
        }
        for n in [10, 50, 200] {
            for w in alphas.windows(2) {
                for &d in &deltas {
                    assert!(r_of(n, w[0], d) <= r_of(n, w[1], d));
                }
            }
            for w in deltas.windows(2) {
                for &a in &alphas {
                    assert!(r_of(n, a, w[0]) <= r_of(n, a, w[1]));
                }
            }
        }
    }

    proptest! {
        #[test]
        fn marginal_selection_reproduces_split_conformal(
            ys in prop::collection::vec(-1e3f64..1e3, 1..40),
            alpha in 0.01f64..0.99,
        ) {
            let bag = ScoreBag::new(ys).unwrap();
            let sel = select_r_marginal(bag.len(), alpha).unwrap();
            let t = threshold_for(&bag, sel).unwrap();
            prop_assert_eq!(t.threshold, one_sided_upper_bound(&bag, alpha).unwrap());
        }

        #[test]
        fn threshold_nonincreasing_in_r(ys in prop::collection::vec(-1e3f64..1e3, 2..30)) {
            let bag = ScoreBag::new(ys).unwrap();
            for r in 1..bag.len() {
                prop_assert!(tolerance_threshold(&bag, r).unwrap().threshold
                    <= tolerance_threshold(&bag, r - 1).unwrap().threshold);
            }
        }

        #[test]
        fn incomplete_beta_reflection(x in 0.0f64..=1.0, a in 0.05f64..200.0, b in 0.05f64..200.0) {
            let lhs = regularized_incomplete_beta(x, a, b).unwrap()
                + regularized_incomplete_beta(1.0 - x, b, a).unwrap();
            prop_assert!((lhs - 1.0).abs() < 1e-12, "{}", lhs);
        }
    }
}
