//! Streaming moment accumulators, confidence intervals and oracle comparisons.

use std::fmt;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Single-pass central moments up to order four with an exact pairwise merge
/// (Chan/Pébay update formulas).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        let n1 = self.n as f64;
        self.n += 1;
        let n = self.n as f64;
        let delta = x - self.mean;
        let delta_n = delta / n;
        let delta_n2 = delta_n * delta_n;
        let term1 = delta * delta_n * n1;
        self.mean += delta_n;
        self.m4 += term1 * delta_n2 * (n * n - 3.0 * n + 3.0) + 6.0 * delta_n2 * self.m2 - 4.0 * delta_n * self.m3;
        self.m3 += term1 * delta_n * (n - 2.0) - 3.0 * delta_n * self.m2;
        self.m2 += term1;
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let na = self.n as f64;
        let nb = other.n as f64;
        let n = na + nb;
        let delta = other.mean - self.mean;
        let d2 = delta * delta;
        let d3 = d2 * delta;
        let d4 = d2 * d2;
        let mean = self.mean + delta * nb / n;
        let m2 = self.m2 + other.m2 + d2 * na * nb / n;
        let m3 = self.m3 + other.m3 + d3 * na * nb * (na - nb) / (n * n) + 3.0 * delta * (na * other.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + other.m4
            + d4 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * delta * (na * other.m3 - nb * self.m3) / n;
        *self = Moments {
            n: self.n + other.n,
            mean,
            m2,
            m3,
            m4,
        };
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance.
    pub fn sample_variance(&self) -> f64 {
        if self.n < 2 {
            return f64::NAN;
        }
        self.m2 / (self.n as f64 - 1.0)
    }

    /// Large-sample standard error of the sample variance,
    /// `√((μ₄ − σ⁴)/n)`.
    pub fn variance_std_error(&self) -> f64 {
        let n = self.n as f64;
        let mu2 = self.m2 / n;
        let mu4 = self.m4 / n;
        ((mu4 - mu2 * mu2).max(0.0) / n).sqrt()
    }

    pub fn summary(&self) -> Result<EstimateSummary> {
        if self.n < 2 {
            return Err(Error::InsufficientSamples(self.n));
        }
        Ok(EstimateSummary {
            n: self.n,
            mean: self.mean,
            std_error: (self.sample_variance() / self.n as f64).sqrt(),
        })
    }

    /// Summary of the sample variance as an estimator.
    pub fn variance_summary(&self) -> Result<EstimateSummary> {
        if self.n < 2 {
            return Err(Error::InsufficientSamples(self.n));
        }
        Ok(EstimateSummary {
            n: self.n,
            mean: self.sample_variance(),
            std_error: self.variance_std_error(),
        })
    }
}

impl Extend<f64> for Moments {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.push(x);
        }
    }
}

/// Exact integer tally for integer-valued samples (crossing counts,
/// indicators). Merging is exactly associative and commutative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegerTally {
    pub n: u64,
    pub sum: i64,
    pub sum_sq: u128,
}

impl IntegerTally {
    pub fn push(&mut self, x: i64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += (x as i128 * x as i128) as u128;
    }

    pub fn merge(&mut self, other: &IntegerTally) {
        self.n += other.n;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn summary(&self) -> Result<EstimateSummary> {
        if self.n < 2 {
            return Err(Error::InsufficientSamples(self.n));
        }
        let n = self.n as i128;
        let s = self.sum as i128;
        // n·Σx² − (Σx)² is exact in i128 for any realistic run size
        let num = n * self.sum_sq as i128 - s * s;
        let variance = num as f64 / (self.n as f64 * (self.n as f64 - 1.0));
        Ok(EstimateSummary {
            n: self.n,
            mean: self.sum as f64 / self.n as f64,
            std_error: (variance.max(0.0) / self.n as f64).sqrt(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Confidence {
    /// Half-width of `k` standard errors.
    Sigmas(f64),
    /// Two-sided normal interval with the given coverage.
    Level(f64),
}

impl Default for Confidence {
    fn default() -> Self {
        Confidence::Sigmas(3.0)
    }
}

impl Confidence {
    pub fn quantile(&self) -> f64 {
        match *self {
            Confidence::Sigmas(k) => k,
            Confidence::Level(p) => {
                let normal = Normal::new(0.0, 1.0).expect("standard normal");
                normal.inverse_cdf(0.5 + 0.5 * p)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateSummary {
    pub n: u64,
    pub mean: f64,
    pub std_error: f64,
}

impl EstimateSummary {
    pub fn ci_halfwidth(&self, level: Confidence) -> f64 {
        level.quantile() * self.std_error
    }
}

/// Mean and standard error of a sample stream (`n ≥ 2`).
pub fn summarize<I: IntoIterator<Item = f64>>(samples: I) -> Result<EstimateSummary> {
    let mut m = Moments::default();
    m.extend(samples);
    m.summary()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

impl Outcome {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Outcome::Pass
        } else {
            Outcome::Fail
        }
    }

    pub fn passed(self) -> bool {
        self == Outcome::Pass
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Pass => "PASS",
            Outcome::Fail => "FAIL",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub outcome: Outcome,
    pub estimate: EstimateSummary,
    pub oracle: f64,
    pub abs_diff: f64,
    pub ci_halfwidth: f64,
    pub extra_tolerance: f64,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.outcome.passed()
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} mean={:.6} se={:.3e} oracle={:.6} |diff|={:.3e} allowed={:.3e} (ci {:.3e} + extra {:.3e})",
            self.outcome,
            self.estimate.mean,
            self.estimate.std_error,
            self.oracle,
            self.abs_diff,
            self.ci_halfwidth + self.extra_tolerance,
            self.ci_halfwidth,
            self.extra_tolerance
        )
    }
}

/// Pass iff `|mean − oracle| ≤ ci_halfwidth(level) + extra_tolerance`.
pub fn compare(estimate: &EstimateSummary, oracle: f64, extra_tolerance: f64, level: Confidence) -> Verdict {
    let abs_diff = (estimate.mean - oracle).abs();
    let ci = estimate.ci_halfwidth(level);
    Verdict {
        outcome: Outcome::from_bool(abs_diff <= ci + extra_tolerance),
        estimate: *estimate,
        oracle,
        abs_diff,
        ci_halfwidth: ci,
        extra_tolerance,
    }
}

/// Compares two independent-or-not estimates with the combined standard error
/// `√(se₁² + se₂²)`.
pub fn compare_estimates(
    a: &EstimateSummary,
    b: &EstimateSummary,
    extra_tolerance: f64,
    level: Confidence,
) -> Verdict {
    let combined = EstimateSummary {
        n: a.n.min(b.n),
        mean: a.mean - b.mean,
        std_error: a.std_error.hypot(b.std_error),
    };
    compare(&combined, 0.0, extra_tolerance, level)
}
