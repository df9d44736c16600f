//! Special functions and log-domain helpers shared by the inference code.
//!
//! `digamma` and `log_gamma` shift the argument upward with the recurrence
//! until it reaches [`ASYMPTOTIC_THRESHOLD`], then evaluate the Bernoulli
//! asymptotic series. Both are accurate to ~1e-13 over `x >= 1e-6`.

use crate::error::{domain, Result};

const ASYMPTOTIC_THRESHOLD: f64 = 6.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// The digamma function ψ(x) = d/dx ln Γ(x), for x > 0.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(domain("digamma", format!("x = {x}, expected x > 0")));
    }
    let mut x = x;
    let mut shift = 0.0;
    while x < ASYMPTOTIC_THRESHOLD {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Σ B_2n / (2n x^2n), n = 1..7
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32760.0 - inv2 / 12.0))))));
    Ok(shift + x.ln() - 0.5 * inv - series)
}

/// ln Γ(x) for x > 0.
pub fn log_gamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(domain("log_gamma", format!("x = {x}, expected x > 0")));
    }
    let mut x = x;
    let mut prod = 1.0;
    while x < ASYMPTOTIC_THRESHOLD {
        prod *= x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            - inv2
                * (1.0 / 360.0
                    - inv2
                        * (1.0 / 1260.0
                            - inv2
                                * (1.0 / 1680.0
                                    - inv2
                                        * (1.0 / 1188.0
                                            - inv2 * (691.0 / 360_360.0 - inv2 / 156.0))))));
    Ok((x - 0.5) * x.ln() - x + HALF_LN_2PI + series - prod.ln())
}

/// ln B(a, b) = ln Γ(a) + ln Γ(b) − ln Γ(a + b).
pub fn log_beta(a: f64, b: f64) -> Result<f64> {
    Ok(log_gamma(a)? + log_gamma(b)? - log_gamma(a + b)?)
}

/// Numerically stable log Σ exp(vᵢ).
pub fn log_sum_exp(values: &[f64]) -> Result<f64> {
    let max = values
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() {
        return Err(domain("log_sum_exp", "empty input"));
    }
    if max == f64::NEG_INFINITY || !max.is_finite() {
        return Ok(max);
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

/// Unnormalized log weights, e.g. per-cluster log responsibilities of one datum.
#[derive(Debug, Clone, PartialEq)]
pub struct LogWeightVector {
    pub values: Vec<f64>,
}

impl LogWeightVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn log_normalizer(&self) -> Result<f64> {
        log_sum_exp(&self.values)
    }

    /// Shift entries so that exponentiated values sum to one.
    pub fn normalize(&mut self) -> Result<()> {
        let lse = self.log_normalizer()?;
        for v in &mut self.values {
            *v -= lse;
        }
        Ok(())
    }

    /// Normalized probabilities, exp(vᵢ − lse(v)).
    pub fn probabilities(&self) -> Result<Vec<f64>> {
        let lse = self.log_normalizer()?;
        Ok(self.values.iter().map(|v| (v - lse).exp()).collect())
    }
}
