//! Special functions: log-gamma, log-beta, the regularized incomplete beta
//! function and the Student-t distribution built on it.

use std::f64::consts::PI;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{domain, Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Remainder of Stirling's series, `ln Γ(x) - [(x - 1/2) ln x - x + ln √(2π)]`,
/// accurate for `x >= 10`.
fn stirling_remainder(x: f64) -> f64 {
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    inv * (1.0 / 12.0
        - inv2
            * (1.0 / 360.0
                - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 * (1.0 / 1188.0 - inv2 * 691.0 / 360_360.0)))))
}

/// `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x >= 10.0 {
        return (x - 0.5) * x.ln() - x + HALF_LN_2PI + stirling_remainder(x);
    }
    if x < 0.5 {
        // Reflection: Γ(x) Γ(1 - x) = π / sin(πx)
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    HALF_LN_2PI + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `ln B(a, b)`, organised to avoid cancellation when either argument is large.
pub fn ln_beta(a: f64, b: f64) -> f64 {
    let (p, q) = if a <= b { (a, b) } else { (b, a) };
    let s = p + q;
    if p >= 10.0 {
        let corr = stirling_remainder(p) + stirling_remainder(q) - stirling_remainder(s);
        HALF_LN_2PI - 0.5 * q.ln() + corr + (p - 0.5) * (p / s).ln() + q * (-p / s).ln_1p()
    } else if q >= 10.0 {
        // ln Γ(q) - ln Γ(q + p) through the Stirling difference.
        let corr = stirling_remainder(q) - stirling_remainder(s);
        ln_gamma(p) + corr - (q - 0.5) * (p / q).ln_1p() - p * s.ln() + p
    } else {
        ln_gamma(p) + ln_gamma(q) - ln_gamma(s)
    }
}

const CF_TOLERANCE: f64 = 1e-15;
const CF_MAX_ITER: usize = 500;
const TINY: f64 = 1e-300;

/// Continued fraction for `I_x(a, b)` (modified Lentz), converging quickly
/// when `x` is below the mean `a / (a + b)`.
fn beta_continued_fraction(x: f64, a: f64, b: f64) -> Result<f64> {
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;

        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;

        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < CF_TOLERANCE {
            return Ok(h);
        }
    }
    Err(Error::Numerical(format!(
        "incomplete beta continued fraction did not converge for x={x}, a={a}, b={b}"
    )))
}

/// Regularized incomplete beta function `I_x(a, b)`, the CDF of
/// `Beta(a, b)` at `x`.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(domain(format!("incomplete beta argument {x} outside [0, 1]")));
    }
    if !(a > 0.0 && a.is_finite() && b > 0.0 && b.is_finite()) {
        return Err(domain(format!(
            "incomplete beta shapes must be positive, got a={a}, b={b}"
        )));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_front = a * x.ln() + b * (-x).ln_1p() - ln_beta(a, b);
    let front = ln_front.exp();
    if x < a / (a + b) {
        let v = front * beta_continued_fraction(x, a, b)? / a;
        Ok(v.clamp(0.0, 1.0))
    } else {
        let v = 1.0 - front * beta_continued_fraction(1.0 - x, b, a)? / b;
        Ok(v.clamp(0.0, 1.0))
    }
}

/// CDF of `Beta(a, b)`.
pub fn beta_cdf(x: f64, a: f64, b: f64) -> Result<f64> {
    regularized_incomplete_beta(x.clamp(0.0, 1.0), a, b)
}

fn standard_normal() -> Normal {
    Normal::standard()
}

pub fn normal_cdf(x: f64) -> f64 {
    standard_normal().cdf(x)
}

pub fn normal_quantile(p: f64) -> f64 {
    standard_normal().inverse_cdf(p)
}

/// Density of Student's t with `nu` degrees of freedom.
pub fn student_t_pdf(t: f64, nu: f64) -> f64 {
    let ln_norm = ln_gamma(0.5 * (nu + 1.0)) - ln_gamma(0.5 * nu) - 0.5 * (nu * PI).ln();
    (ln_norm - 0.5 * (nu + 1.0) * (t * t / nu).ln_1p()).exp()
}

/// Upper tail `P[T > t]` for `t >= 0`.
fn student_t_upper_tail(t: f64, nu: f64) -> Result<f64> {
    let t2 = t * t;
    if t2 < nu {
        // Near zero, nu / (nu + t^2) rounds toward 1 where I_x(nu/2, 1/2) is
        // steep; the complementary argument keeps full precision.
        let x = t2 / (nu + t2);
        return Ok(0.5 - 0.5 * regularized_incomplete_beta(x, 0.5, 0.5 * nu)?);
    }
    let x = nu / (nu + t2);
    Ok(0.5 * regularized_incomplete_beta(x, 0.5 * nu, 0.5)?)
}

/// CDF of Student's t with `nu > 0` degrees of freedom.
pub fn student_t_cdf(t: f64, nu: f64) -> Result<f64> {
    if nu.is_nan() || nu <= 0.0 {
        return Err(domain(format!("degrees of freedom must be positive, got {nu}")));
    }
    if t.is_nan() {
        return Err(domain("t is NaN"));
    }
    let tail = student_t_upper_tail(t.abs(), nu)?;
    Ok(if t >= 0.0 { 1.0 - tail } else { tail })
}

/// Quantile of Student's t: the `t` with `P[T <= t] = p`, for `p` in `(0, 1)`.
pub fn student_t_quantile(p: f64, nu: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(domain(format!("t quantile level must lie in (0, 1), got {p}")));
    }
    if !(nu > 0.0 && nu.is_finite()) {
        return Err(domain(format!("degrees of freedom must be positive, got {nu}")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // Solve on the upper tail for accuracy when p is close to 1.
    let (q, sign) = if p > 0.5 { (1.0 - p, 1.0) } else { (p, -1.0) };

    // Cornish-Fisher start from the normal quantile.
    let z = normal_quantile(1.0 - q);
    let mut t = z + (z.powi(3) + z) / (4.0 * nu) + (5.0 * z.powi(5) + 16.0 * z.powi(3) + 3.0 * z) / (96.0 * nu * nu);
    let mut lo = 0.0;
    let mut hi = f64::INFINITY;
    if !(t > 0.0 && t.is_finite()) {
        t = 1.0;
    }
    for _ in 0..200 {
        let g = student_t_upper_tail(t, nu)? - q;
        if g > 0.0 {
            lo = t;
        } else {
            hi = t;
        }
        let step = g / student_t_pdf(t, nu);
        let mut next = t + step;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() {
                0.5 * (lo + hi)
            } else {
                2.0 * t.max(1.0)
            };
        }
        if (next - t).abs() <= 1e-14 * next.abs() {
            return Ok(sign * next);
        }
        t = next;
    }
    Err(Error::Numerical(format!(
        "t quantile did not converge for p={p}, nu={nu}"
    )))
}
