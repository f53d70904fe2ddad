//! Forward Euler–Maruyama simulation of the lattice model on a
//! one-dimensional torus.
//!
//! Per site and step,
//!
//! ```text
//! u^i <- u^i + dt (u^i(x+1) + u^i(x-1) - 2 u^i(x)) / 2 + sqrt(gamma u^1 u^2 dt) Z^i
//! ```
//!
//! with `Z^2 = rho Z^1 + sqrt(1 - rho^2) Z'`. The drift is the generator of the
//! rate-one simple random walk, matching the dual walkers. Sites driven
//! negative are clamped to zero. At `rho = -1` the clamp moves the removed
//! deficit to the other type, so `u^1 + u^2` follows the deterministic heat
//! step exactly. By default sites near zero use a nonnegative increment with
//! the same first two moments instead (see [`Increments`]).

use rand::Rng;
use rand_distr::{Beta, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coloring::{Color, Coloring};
use crate::error::{argument, Result, SbmError};
use crate::flow::check_rho;
use crate::rng::derive_stream;
use crate::stats::{ks_two_sample, Estimate};

/// The two densities on a torus of `u1.len()` sites at time `time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeField {
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub time: f64,
}

impl LatticeField {
    pub fn new(u1: Vec<f64>, u2: Vec<f64>) -> Result<Self> {
        if u1.is_empty() || u1.len() != u2.len() {
            return Err(argument("both densities need the same nonzero number of sites"));
        }
        if !u1.iter().chain(&u2).all(|v| *v >= 0.0 && v.is_finite()) {
            return Err(argument("densities must be finite and nonnegative"));
        }
        Ok(LatticeField { u1, u2, time: 0.0 })
    }

    pub fn flat(sites: usize, a: f64, b: f64) -> Result<Self> {
        Self::new(vec![a; sites], vec![b; sites])
    }

    /// Type 1 on `[0, sites/2)`, type 2 on the rest.
    pub fn heaviside(sites: usize) -> Result<Self> {
        let u1: Vec<f64> = (0..sites).map(|x| if x < sites / 2 { 1.0 } else { 0.0 }).collect();
        let u2 = u1.iter().map(|v| 1.0 - v).collect();
        Self::new(u1, u2)
    }

    pub fn sites(&self) -> usize {
        self.u1.len()
    }

    pub fn get(&self, color: Color, x: usize) -> f64 {
        match color {
            Color::One => self.u1[x],
            Color::Two => self.u2[x],
        }
    }

    pub fn sup(&self) -> f64 {
        self.u1.iter().chain(&self.u2).copied().fold(0.0, f64::max)
    }

    pub fn total(&self) -> Vec<f64> {
        self.u1.iter().zip(&self.u2).map(|(a, b)| a + b).collect()
    }

    /// CSV rows `site,u1,u2`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("site,u1,u2\n");
        for (x, (a, b)) in self.u1.iter().zip(&self.u2).enumerate() {
            s.push_str(&format!("{x},{a},{b}\n"));
        }
        s
    }
}

/// Parameters of a forward run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub gamma: f64,
    pub rho: f64,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    #[serde(default)]
    pub increments: Increments,
}

/// Law of the per-site noise increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Increments {
    /// Gaussian increments, negative results clamped to zero.
    Gaussian,
    /// Sites within a few standard deviations of zero draw a nonnegative
    /// increment with the Gaussian mean and covariance; other sites stay
    /// Gaussian.
    #[default]
    MomentMatched,
}

impl std::str::FromStr for Increments {
    type Err = SbmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Increments::Gaussian),
            "moment-matched" => Ok(Increments::MomentMatched),
            other => Err(SbmError::Parse(format!(
                "unknown increment law '{other}', expected gaussian or moment-matched"
            ))),
        }
    }
}

/// Distance from the boundary, in noise standard deviations, below which
/// moment-matched increments replace Gaussian ones.
const BOUNDARY_SDS: f64 = 5.0;

/// Positive increment with mean `(h1, h2)` and covariance `var [[1, rho], [rho, 1]]`.
///
/// The covariance splits as a common part `|rho| var` along `(1, sign rho)`
/// plus independent parts `(1 - |rho|) var`. Each part gets its own share of
/// the available mass and a law supported where the result stays
/// nonnegative: Beta on an interval for the antithetic direction, Gamma on a
/// half-line otherwise. The flag reports a two-point fallback, used when the
/// interval is too short to carry the variance.
fn bounded_increment<R: Rng + ?Sized>(
    h1: f64,
    h2: f64,
    var: f64,
    rho: f64,
    rng: &mut R,
) -> (f64, f64, bool) {
    let share = rho.abs().sqrt();
    let common = rho.abs() * var;
    let own = (1.0 - rho.abs()) * var;
    let (c1, c2) = (share * h1, share * h2);
    let (mut a, mut b, mut truncated) = (c1, c2, false);
    if common > 0.0 {
        if rho < 0.0 {
            let (p, q, t) = interval_split(c1, c2, common, rng);
            a = p;
            b = q;
            truncated = t;
        } else {
            let floor = c1.min(c2);
            let lift = half_line(floor, common, rng) - floor;
            a = (c1 + lift).max(0.0);
            b = (c2 + lift).max(0.0);
        }
    }
    let (o1, o2) = (h1 - c1, h2 - c2);
    if own > 0.0 {
        a += half_line(o1, own, rng);
        b += half_line(o2, own, rng);
    } else {
        a += o1;
        b += o2;
    }
    (a, b, truncated)
}

/// Gamma variate with the given mean and variance.
fn half_line<R: Rng + ?Sized>(mean: f64, var: f64, rng: &mut R) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    match Gamma::new(mean * mean / var, var / mean) {
        Ok(g) => {
            let x: f64 = rng.sample(g);
            if x.is_finite() {
                x
            } else {
                mean
            }
        }
        Err(_) => mean,
    }
}

/// Split `h1 + h2` so the first part has mean `h1` and variance `var`.
fn interval_split<R: Rng + ?Sized>(h1: f64, h2: f64, var: f64, rng: &mut R) -> (f64, f64, bool) {
    let w = h1 + h2;
    let spread = h1 * h2 / var - 1.0;
    if spread > 0.0 {
        if let Ok(beta) = Beta::new(h1 / w * spread, h2 / w * spread) {
            let x: f64 = rng.sample(beta);
            if x.is_finite() {
                let a = w * x;
                return (a, w - a, false);
            }
        }
    }
    if rng.random::<f64>() * w < h1 {
        (w, 0.0, true)
    } else {
        (0.0, w, true)
    }
}

/// Largest admissible step `0.1 / (1 + gamma sup^2)` for initial data with sup-norm `sup`.
pub fn stability_bound(gamma: f64, sup: f64) -> f64 {
    0.1 / (1.0 + gamma * sup * sup)
}

impl SimConfig {
    pub fn validate(&self, field0: &LatticeField) -> Result<()> {
        check_rho(self.rho)?;
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(argument(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if !(self.horizon >= 0.0) || !self.horizon.is_finite() {
            return Err(argument(format!("horizon must be finite and >= 0, got {}", self.horizon)));
        }
        let bound = stability_bound(self.gamma, field0.sup());
        if !(self.dt > 0.0) || self.dt > bound {
            return Err(argument(format!(
                "time step {} outside (0, {bound}], the stability bound 0.1/(1 + gamma |u0|^2)",
                self.dt
            )));
        }
        Ok(())
    }

    /// Number of steps needed to reach `t`, which must be a multiple of `dt`.
    pub fn steps_to(&self, t: f64) -> Result<usize> {
        let k = (t / self.dt).round();
        if (k * self.dt - t).abs() > 1e-9 * t.max(1.0) {
            return Err(argument(format!(
                "sample time {t} is not a multiple of the time step {}",
                self.dt
            )));
        }
        Ok(k as usize)
    }
}

/// Reusable buffers for in-place stepping.
#[derive(Debug, Clone, Default)]
pub struct Stepper {
    next1: Vec<f64>,
    next2: Vec<f64>,
    /// Number of site updates that needed clamping.
    pub clamps: u64,
    /// Number of site updates performed.
    pub site_steps: u64,
}

impl Stepper {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clamp_rate(&self) -> f64 {
        if self.site_steps == 0 {
            0.0
        } else {
            self.clamps as f64 / self.site_steps as f64
        }
    }

    /// Advance `field` by one step of `cfg.dt`.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        field: &mut LatticeField,
        cfg: &SimConfig,
        rng: &mut R,
    ) -> Result<()> {
        let l = field.sites();
        self.next1.resize(l, 0.0);
        self.next2.resize(l, 0.0);
        let dt = cfg.dt;
        let half_dt = 0.5 * dt;
        let gdt = cfg.gamma * dt;
        let antithetic = cfg.rho == -1.0;
        let comonotone = cfg.rho == 1.0;
        let bounded = cfg.increments == Increments::MomentMatched;
        let perp = (1.0 - cfg.rho * cfg.rho).max(0.0).sqrt();
        let (u1, u2) = (&field.u1, &field.u2);
        for x in 0..l {
            let left = if x == 0 { l - 1 } else { x - 1 };
            let right = if x + 1 == l { 0 } else { x + 1 };
            let h1 = u1[x] + half_dt * (u1[left] + u1[right] - 2.0 * u1[x]);
            let h2 = u2[x] + half_dt * (u2[left] + u2[right] - 2.0 * u2[x]);
            let var = gdt * u1[x] * u2[x];
            let (mut a, mut b) = (h1, h2);
            if var > 0.0 {
                let sd = var.sqrt();
                if bounded && h1.min(h2) < BOUNDARY_SDS * sd {
                    let (p, q, truncated) = bounded_increment(h1, h2, var, cfg.rho, rng);
                    a = p;
                    b = q;
                    self.clamps += truncated as u64;
                    self.next1[x] = a;
                    self.next2[x] = b;
                    continue;
                }
                let z1: f64 = rng.sample(StandardNormal);
                let z2 = if antithetic {
                    -z1
                } else if comonotone {
                    z1
                } else {
                    let zp: f64 = rng.sample(StandardNormal);
                    cfg.rho * z1 + perp * zp
                };
                a += sd * z1;
                b += sd * z2;
            }
            if a < 0.0 || b < 0.0 {
                self.clamps += 1;
                if antithetic {
                    let sum = h1 + h2;
                    if a < 0.0 {
                        a = 0.0;
                        b = sum;
                    } else {
                        a = sum;
                        b = 0.0;
                    }
                } else {
                    a = a.max(0.0);
                    b = b.max(0.0);
                }
            }
            self.next1[x] = a;
            self.next2[x] = b;
        }
        self.site_steps += l as u64;
        if let Some(x) = self
            .next1
            .iter()
            .chain(&self.next2)
            .position(|v| !v.is_finite())
        {
            return Err(SbmError::Simulation(format!(
                "non-finite density at site {} after step to time {} (gamma {}, dt {})",
                x % l,
                field.time + dt,
                cfg.gamma,
                dt
            )));
        }
        std::mem::swap(&mut field.u1, &mut self.next1);
        std::mem::swap(&mut field.u2, &mut self.next2);
        field.time += dt;
        Ok(())
    }
}

/// One Euler step, returning the new field.
pub fn step_euler<R: Rng + ?Sized>(
    field: &LatticeField,
    cfg: &SimConfig,
    rng: &mut R,
) -> Result<LatticeField> {
    let mut out = field.clone();
    Stepper::new().step(&mut out, cfg, rng)?;
    Ok(out)
}

/// The deterministic heat step applied to a single density.
pub fn heat_step(u: &[f64], dt: f64) -> Vec<f64> {
    let l = u.len();
    (0..l)
        .map(|x| {
            let left = if x == 0 { l - 1 } else { x - 1 };
            let right = if x + 1 == l { 0 } else { x + 1 };
            u[x] + 0.5 * dt * (u[left] + u[right] - 2.0 * u[x])
        })
        .collect()
}

/// Snapshots at each of `sample_times` (nondecreasing multiples of `dt`).
pub fn simulate<R: Rng + ?Sized>(
    field0: &LatticeField,
    cfg: &SimConfig,
    sample_times: &[f64],
    rng: &mut R,
) -> Result<Vec<LatticeField>> {
    let (snaps, _) = simulate_with_stats(field0, cfg, sample_times, rng)?;
    Ok(snaps)
}

/// [`simulate`] that also returns the stepper counters.
pub fn simulate_with_stats<R: Rng + ?Sized>(
    field0: &LatticeField,
    cfg: &SimConfig,
    sample_times: &[f64],
    rng: &mut R,
) -> Result<(Vec<LatticeField>, Stepper)> {
    cfg.validate(field0)?;
    let mut steps = Vec::with_capacity(sample_times.len());
    for &t in sample_times {
        if t < 0.0 || t > cfg.horizon + 1e-12 {
            return Err(argument(format!("sample time {t} outside [0, {}]", cfg.horizon)));
        }
        steps.push(cfg.steps_to(t)?);
    }
    if steps.windows(2).any(|w| w[0] > w[1]) {
        return Err(argument("sample times must be nondecreasing"));
    }
    let mut field = field0.clone();
    field.time = 0.0;
    let mut stepper = Stepper::new();
    let mut done = 0usize;
    let mut out = Vec::with_capacity(steps.len());
    for (&k, &t) in steps.iter().zip(sample_times) {
        while done < k {
            stepper.step(&mut field, cfg, rng)?;
            done += 1;
        }
        let mut snap = field.clone();
        snap.time = t;
        out.push(snap);
    }
    Ok((out, stepper))
}

/// Monte Carlo estimate of `E[prod_i u^{c_i}_t(x_i)]` over `replicas`
/// independent runs, replica `k` using stream `k` of `cfg.seed`.
pub fn moment_estimate(
    field0: &LatticeField,
    sites: &[usize],
    colors: Coloring,
    t: f64,
    cfg: &SimConfig,
    replicas: usize,
) -> Result<Estimate> {
    Ok(moment_estimate_with_stats(field0, sites, colors, t, cfg, replicas)?.0)
}

/// [`moment_estimate`] that also reports the overall clamp rate per site-step.
pub fn moment_estimate_with_stats(
    field0: &LatticeField,
    sites: &[usize],
    colors: Coloring,
    t: f64,
    cfg: &SimConfig,
    replicas: usize,
) -> Result<(Estimate, f64)> {
    if sites.len() != colors.len() {
        return Err(argument(format!(
            "{} observation sites but a coloring of length {}",
            sites.len(),
            colors.len()
        )));
    }
    if let Some(x) = sites.iter().find(|&&x| x >= field0.sites()) {
        return Err(argument(format!("site {x} outside the torus of {} sites", field0.sites())));
    }
    if replicas < 2 {
        return Err(argument("moment estimates need at least two replicas"));
    }
    cfg.validate(field0)?;
    let observe = |f: &LatticeField| -> f64 {
        sites
            .iter()
            .enumerate()
            .map(|(i, &x)| f.get(colors.get(i), x))
            .product()
    };
    if t == 0.0 {
        return Ok((Estimate { se: 0.0, ..Estimate::exact(observe(field0)) }, 0.0));
    }
    let runs: Vec<Result<(f64, u64, u64)>> = (0..replicas as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = derive_stream(cfg.seed, k);
            let (snap, st) = simulate_with_stats(field0, cfg, &[t], &mut rng)?;
            Ok((observe(&snap[0]), st.clamps, st.site_steps))
        })
        .collect();
    let mut values = Vec::with_capacity(replicas);
    let (mut clamps, mut site_steps) = (0u64, 0u64);
    for r in runs {
        let (v, c, s) = r?;
        values.push(v);
        clamps += c;
        site_steps += s;
    }
    let rate = if site_steps == 0 { 0.0 } else { clamps as f64 / site_steps as f64 };
    Ok((Estimate::from_samples(&values), rate))
}

/// Sites where both types coexist above `threshold`: `u1(x) u2(x) > threshold`.
/// For the Heaviside initial field every site holds a single type, so the set is empty.
pub fn interface_set(field: &LatticeField, threshold: f64) -> Result<Vec<usize>> {
    if !(threshold >= 0.0) {
        return Err(argument(format!("threshold must be >= 0, got {threshold}")));
    }
    Ok((0..field.sites())
        .filter(|&x| field.u1[x] * field.u2[x] > threshold)
        .collect())
}

/// `v^K_t(x) = u_{K^2 t}(K x)` for each requested `t`, read from snapshots
/// (which must include time `K^2 t` exactly).
pub fn rescale_diffusive(snapshots: &[LatticeField], k: usize, times: &[f64]) -> Result<Vec<LatticeField>> {
    if k == 0 {
        return Err(argument("scale factor must be at least 1"));
    }
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let target = (k * k) as f64 * t;
        let snap = snapshots
            .iter()
            .find(|s| (s.time - target).abs() <= 1e-9 * target.max(1.0))
            .ok_or_else(|| argument(format!("no snapshot at time {target} = K^2 * {t}")))?;
        let l = snap.sites();
        if l % k != 0 {
            return Err(argument(format!("torus of {l} sites is not divisible by K = {k}")));
        }
        out.push(LatticeField {
            u1: (0..l / k).map(|x| snap.u1[k * x]).collect(),
            u2: (0..l / k).map(|x| snap.u2[k * x]).collect(),
            time: t,
        });
    }
    Ok(out)
}

/// Two-sample comparison of coexistence-region sizes between a rescaled run
/// and a direct run with a scaled branching rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaleComparison {
    pub scale: usize,
    pub threshold: f64,
    pub rescaled_mean_width: f64,
    pub direct_mean_width: f64,
    pub ks_statistic: f64,
    /// Asymptotic 1% two-sample critical value.
    pub ks_critical: f64,
}

/// Run `replicas` pairs: a torus of `sites` at `gamma` to `K^2 t`, rescaled by
/// `K`, against a torus of `sites / K` at `gamma K` to time `t`, both from
/// Heaviside data, and compare widths of the coexistence region.
#[allow(clippy::too_many_arguments)]
pub fn rescale_comparison(
    sites: usize,
    k: usize,
    gamma: f64,
    rho: f64,
    dt: f64,
    t: f64,
    threshold: f64,
    replicas: usize,
    seed: u64,
) -> Result<RescaleComparison> {
    if k == 0 || !sites.is_multiple_of(k) {
        return Err(argument(format!("torus of {sites} sites is not divisible by K = {k}")));
    }
    let big = LatticeField::heaviside(sites)?;
    let small = LatticeField::heaviside(sites / k)?;
    let long = (k * k) as f64 * t;
    let cfg_big = SimConfig { gamma, rho, dt, horizon: long, seed, increments: Increments::default() };
    let cfg_small = SimConfig { gamma: gamma * k as f64, horizon: t, seed: seed.wrapping_add(1), ..cfg_big };
    cfg_big.validate(&big)?;
    cfg_small.validate(&small)?;
    let widths: Vec<Result<(f64, f64)>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let snaps = simulate(&big, &cfg_big, &[long], &mut derive_stream(cfg_big.seed, r))?;
            let resc = rescale_diffusive(&snaps, k, &[t])?;
            let direct = simulate(&small, &cfg_small, &[t], &mut derive_stream(cfg_small.seed, r))?;
            Ok((
                interface_set(&resc[0], threshold)?.len() as f64,
                interface_set(&direct[0], threshold)?.len() as f64,
            ))
        })
        .collect();
    let widths = widths.into_iter().collect::<Result<Vec<_>>>()?;
    let (a, b): (Vec<f64>, Vec<f64>) = widths.into_iter().unzip();
    let n = replicas as f64;
    Ok(RescaleComparison {
        scale: k,
        threshold,
        rescaled_mean_width: a.iter().sum::<f64>() / n,
        direct_mean_width: b.iter().sum::<f64>() / n,
        ks_statistic: ks_two_sample(&a, &b),
        ks_critical: 1.63 * (2.0 / n).sqrt(),
    })
}
