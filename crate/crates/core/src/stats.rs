//! Monte Carlo summaries and goodness-of-fit statistics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{argument, Result};

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub samples: usize,
}

impl Estimate {
    /// Summarise samples in the given order (the result is order-independent
    /// up to rounding, and fully deterministic for a fixed order).
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Estimate {
                mean: f64::NAN,
                se: f64::NAN,
                samples: 0,
            };
        }
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for (k, &x) in xs.iter().enumerate() {
            let d = x - mean;
            mean += d / (k + 1) as f64;
            m2 += d * (x - mean);
        }
        let se = if n > 1 {
            (m2 / (n - 1) as f64 / n as f64).sqrt()
        } else {
            0.0
        };
        Estimate { mean, se, samples: n }
    }

    pub fn exact(value: f64) -> Self {
        Estimate {
            mean: value,
            se: 0.0,
            samples: 0,
        }
    }

    pub fn sample_variance(&self) -> f64 {
        self.se * self.se * self.samples as f64
    }
}

/// `|a - b| / sqrt(se_a^2 + se_b^2)`; zero when both sides agree exactly with
/// no spread, infinite when they disagree with no spread.
pub fn z_score(a: &Estimate, b: &Estimate) -> f64 {
    let diff = (a.mean - b.mean).abs();
    let se = a.se.hypot(b.se);
    if se == 0.0 {
        return if diff == 0.0 { 0.0 } else { f64::INFINITY };
    }
    diff / se
}

/// Kolmogorov–Smirnov distance between the empirical law of `samples` and `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter().enumerate().fold(0.0, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Two-sample Kolmogorov–Smirnov distance.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < xa.len() && j < xb.len() {
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic 1% critical value `1.63 / sqrt(n)` of the one-sample KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.63 / (n as f64).sqrt()
}

/// Result of a two-sample chi-square homogeneity test on category counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Homogeneity test for two count vectors over the same categories.
/// Categories empty in both samples are dropped.
pub fn chi_square_two_sample(a: &[u64], b: &[u64]) -> Result<ChiSquareTest> {
    if a.len() != b.len() {
        return Err(argument("count vectors must have equal length"));
    }
    let na: u64 = a.iter().sum();
    let nb: u64 = b.iter().sum();
    if na == 0 || nb == 0 {
        return Err(argument("both samples must be nonempty"));
    }
    let total = (na + nb) as f64;
    let mut stat = 0.0;
    let mut used = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let col = (x + y) as f64;
        if col == 0.0 {
            continue;
        }
        used += 1;
        for (obs, n) in [(x, na), (y, nb)] {
            let expected = col * n as f64 / total;
            stat += (obs as f64 - expected).powi(2) / expected;
        }
    }
    if used < 2 {
        return Ok(ChiSquareTest {
            statistic: 0.0,
            dof: 0,
            p_value: 1.0,
        });
    }
    let dof = used - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| argument(e.to_string()))?;
    Ok(ChiSquareTest {
        statistic: stat,
        dof,
        p_value: 1.0 - dist.cdf(stat),
    })
}

/// Standard normal distribution function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal quantile, e.g. 1.96 at 0.975.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}
