//! Heat flow of piecewise-constant profiles, and the semigroup of the
//! rate-one simple random walk on `Z`.
//!
//! The continuum semigroup has generator `Delta/2`, i.e. it is the transition
//! semigroup of standard Brownian motion. Profiles are right-continuous.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{argument, Result, SbmError};
use crate::stats::{normal_cdf, normal_pdf};

/// Bounded, right-continuous, piecewise-constant function on the real line.
///
/// `values[0]` holds on `(-inf, breakpoints[0])` and `values[j]` on
/// `[breakpoints[j-1], breakpoints[j])`, so there is one more value than
/// breakpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

/// Which half-line a restricted profile keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    /// Keep `(-inf, a]`.
    Left,
    /// Keep `(a, inf)`.
    Right,
}

impl Profile {
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if values.len() != breakpoints.len() + 1 {
            return Err(argument(format!(
                "a profile with {} breakpoints needs {} values, got {}",
                breakpoints.len(),
                breakpoints.len() + 1,
                values.len()
            )));
        }
        if breakpoints.iter().any(|b| !b.is_finite()) {
            return Err(argument("breakpoints must be finite"));
        }
        if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
            return Err(argument("breakpoints must be strictly increasing"));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(argument(format!("profile values must be finite and >= 0, got {v}")));
        }
        Ok(Profile { breakpoints, values })
    }

    pub fn constant(c: f64) -> Result<Self> {
        Self::new(vec![], vec![c])
    }

    /// `left` on `(-inf, at)` and `right` on `[at, inf)`.
    pub fn step(at: f64, left: f64, right: f64) -> Result<Self> {
        Self::new(vec![at], vec![left, right])
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = self.breakpoints.partition_point(|b| *b <= x);
        self.values[k]
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn inf(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    /// Multiply by the indicator of the half-line on `side` of `a`.
    pub fn restrict(&self, a: f64, side: Side) -> Result<Profile> {
        if a.is_nan() {
            return Err(argument("restriction point is NaN"));
        }
        if a.is_infinite() {
            let keep = matches!((side, a > 0.0), (Side::Right, false) | (Side::Left, true));
            return if keep {
                Ok(self.clone())
            } else {
                Profile::constant(0.0)
            };
        }
        // The kept half-line is (a, inf) or (-inf, a]; right-continuity places
        // the cut breakpoint at a either way (up to a null set).
        let k = self.breakpoints.partition_point(|b| *b <= a);
        let mut breakpoints = Vec::with_capacity(self.breakpoints.len() + 1);
        let mut values = Vec::with_capacity(self.values.len() + 1);
        match side {
            Side::Right => {
                values.push(0.0);
                breakpoints.push(a);
                values.push(self.values[k]);
                breakpoints.extend_from_slice(&self.breakpoints[k..]);
                values.extend_from_slice(&self.values[k + 1..]);
            }
            Side::Left => {
                breakpoints.extend(self.breakpoints[..k].iter().copied().filter(|b| *b < a));
                values.extend_from_slice(&self.values[..breakpoints.len() + 1]);
                breakpoints.push(a);
                values.push(0.0);
            }
        }
        Profile::new(breakpoints, values)
    }

    /// Value jumps `values[j+1] - values[j]` at each breakpoint.
    fn jumps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.breakpoints
            .iter()
            .zip(self.values.windows(2))
            .map(|(b, v)| (*b, v[1] - v[0]))
    }
}

impl fmt::Display for Profile {
    /// The file format: the leftmost value, then one `breakpoint value` line per jump.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.values[0])?;
        for (b, v) in self.breakpoints.iter().zip(&self.values[1..]) {
            writeln!(f, "{b} {v}")?;
        }
        Ok(())
    }
}

pub(crate) fn parse_number(tok: &str, line: usize) -> Result<f64> {
    tok.parse::<f64>()
        .map_err(|_| SbmError::Parse(format!("line {line}: expected a number, got {tok:?}")))
}

impl FromStr for Profile {
    type Err = SbmError;

    /// Parse the profile file format. `#` starts a comment.
    fn from_str(s: &str) -> Result<Self> {
        let mut first: Option<f64> = None;
        let mut breakpoints = Vec::new();
        let mut values = Vec::new();
        for (k, raw) in s.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let toks: Vec<&str> = line.split_whitespace().collect();
            match (first.is_some(), toks.as_slice()) {
                (false, [v]) => first = Some(parse_number(v, k + 1)?),
                (true, [b, v]) => {
                    breakpoints.push(parse_number(b, k + 1)?);
                    values.push(parse_number(v, k + 1)?);
                }
                _ => {
                    return Err(SbmError::Parse(format!(
                        "line {}: expected {} in profile file, got {line:?}",
                        k + 1,
                        if first.is_some() { "\"breakpoint value\"" } else { "a single leftmost value" }
                    )))
                }
            }
        }
        let first = first.ok_or_else(|| SbmError::Parse("empty profile file".into()))?;
        values.insert(0, first);
        Profile::new(breakpoints, values)
    }
}

/// `S_t w0 (x)`. For `t <= 0` this is `w0(x)`, the right limit at breakpoints.
pub fn semigroup_apply(w0: &Profile, t: f64, x: f64) -> f64 {
    if t <= 0.0 {
        return w0.eval(x);
    }
    let s = t.sqrt();
    w0.values[0]
        + w0.jumps()
            .map(|(b, jump)| jump * normal_cdf((x - b) / s))
            .sum::<f64>()
}

/// `d/dx S_t w0 (x)`, zero for `t <= 0`.
pub fn semigroup_derivative(w0: &Profile, t: f64, x: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let s = t.sqrt();
    w0.jumps()
        .map(|(b, jump)| jump * normal_pdf((x - b) / s))
        .sum::<f64>()
        / s
}

/// `S_t (w0 1_{(a, inf)}) (x)` or its left mirror `S_t (w0 1_{(-inf, a]}) (x)`.
pub fn restricted_semigroup(w0: &Profile, a: f64, side: Side, t: f64, x: f64) -> Result<f64> {
    Ok(semigroup_apply(&w0.restrict(a, side)?, t, x))
}

/// Default truncation tolerance for the lattice semigroup.
pub const DISCRETE_TOLERANCE: f64 = 1e-13;

/// Poisson(`t`) weights `0..=k` with total mass at least `1 - tol`.
fn poisson_weights(t: f64, tol: f64) -> Vec<f64> {
    if t == 0.0 {
        return vec![1.0];
    }
    let mut w = Vec::new();
    let mut mass = 0.0;
    let mut k = 0usize;
    let lt = t.ln();
    loop {
        let p = (-t + k as f64 * lt - ln_gamma(k as f64 + 1.0)).exp();
        w.push(p);
        mass += p;
        if k as f64 > t && 1.0 - mass <= tol {
            return w;
        }
        k += 1;
    }
}

/// One step of the jump chain: average of the two neighbours.
fn average_neighbours(v: &[f64], periodic: bool) -> Vec<f64> {
    let n = v.len();
    (0..n)
        .map(|i| {
            let left = if i > 0 { v[i - 1] } else if periodic { v[n - 1] } else { 0.0 };
            let right = if i + 1 < n { v[i + 1] } else if periodic { v[0] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

/// `E_x[v0(X_t)]` on the one-dimensional torus of size `v0.len()` for every
/// site, by the uniformized series `sum_k Poisson(t; k) P^k v0`, truncated once
/// the remaining Poisson mass is below `tol`.
pub fn discrete_semigroup_torus(v0: &[f64], t: f64, tol: f64) -> Result<Vec<f64>> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(argument(format!("time must be finite and >= 0, got {t}")));
    }
    if v0.is_empty() {
        return Err(argument("torus must have at least one site"));
    }
    let weights = poisson_weights(t, tol);
    let mut acc: Vec<f64> = v0.iter().map(|v| v * weights[0]).collect();
    let mut cur = v0.to_vec();
    for w in &weights[1..] {
        cur = average_neighbours(&cur, true);
        for (a, c) in acc.iter_mut().zip(&cur) {
            *a += w * c;
        }
    }
    Ok(acc)
}

/// `E_x[v0(X_t)]` on `Z` for a bounded `v0`, evaluated on the window
/// `x - radius ..= x + radius`. The series is truncated at `k` jumps with
/// Poisson tail below `tol`, which is exact on the window as long as
/// `k <= radius`; otherwise the window is too small and an accuracy error is
/// returned. The error bound is `tol * sup|v0|`.
pub fn discrete_semigroup(
    v0: impl Fn(i64) -> f64,
    t: f64,
    x: i64,
    radius: usize,
    tol: f64,
) -> Result<f64> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(argument(format!("time must be finite and >= 0, got {t}")));
    }
    let weights = poisson_weights(t, tol);
    let k = weights.len() - 1;
    if k > radius {
        return Err(SbmError::Accuracy(format!(
            "window radius {radius} is too small for time {t}: need at least {k} sites on each side"
        )));
    }
    // Only sites within k of x influence the truncated series, so k suffices.
    let r = k as i64;
    let mut cur: Vec<f64> = (x - r..=x + r).map(&v0).collect();
    let mut acc = weights[0] * cur[k];
    for w in &weights[1..] {
        cur = average_neighbours(&cur, false);
        acc += w * cur[k];
    }
    Ok(acc)
}
