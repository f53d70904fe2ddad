//! Interfaces of the infinite-rate model at `rho = -1`.
//!
//! With total mass `w_t = S_t w0`, a single interface solves
//! `dI = -(w'_t / w_t)(I) dt + dB`. Several interfaces move independently
//! with that drift and annihilate in pairs on collision. The annihilating
//! system is built from a coalescing one by keeping the clusters of odd
//! multiplicity, and checked against a direct pairwise-annihilation
//! simulator driven by the same [`KeyedNoise`].

use std::fmt;
use std::num::NonZeroUsize;
use std::str::FromStr;

use gauss_quad::legendre::GaussLegendre;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coloring::Color;
use crate::error::{argument, Result, SbmError};
use crate::heat::{
    parse_number, restricted_semigroup, semigroup_apply, semigroup_derivative, Profile, Side,
};
use rayon::prelude::*;

use crate::dual::{dual_moment_estimate, DualStarts, InitialDensities, Rate};
use crate::rng::{derive_stream, KeyedNoise};
use crate::stats::{normal_pdf, z_score, Estimate};

/// Length of the first step of every time grid.
pub const MIN_SUBSTEP: f64 = 1e-8;

/// Stream offset keeping pair uniforms apart from per-label normals.
const PAIR_STREAMS: u64 = 1 << 40;

/// Simulation times: `0`, then steps doubling from [`MIN_SUBSTEP`] up to
/// `dt`, then uniform steps of `dt` (the last one possibly shorter).
pub fn time_grid(horizon: f64, dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(argument(format!("time step must be positive, got {dt}")));
    }
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(argument(format!("horizon must be finite and >= 0, got {horizon}")));
    }
    let mut grid = vec![0.0];
    if horizon == 0.0 {
        return Ok(grid);
    }
    let mut s = MIN_SUBSTEP;
    while s < dt.min(horizon) {
        grid.push(s);
        s *= 2.0;
    }
    let steps = (horizon / dt - 1e-9).ceil().max(1.0) as usize;
    for k in 1..=steps {
        grid.push((k as f64 * dt).min(horizon));
    }
    Ok(grid)
}

/// `-(w'_s / w_s)(x)`, evaluated no earlier than [`MIN_SUBSTEP`].
pub fn interface_drift(w0: &Profile, s: f64, x: f64) -> Result<f64> {
    let s = s.max(MIN_SUBSTEP);
    let w = semigroup_apply(w0, s, x);
    if !(w > 1e-300) {
        return Err(SbmError::Simulation(format!(
            "total mass vanishes at x = {x}, time {s}: the interface left the support of w0"
        )));
    }
    Ok(-semigroup_derivative(w0, s, x) / w)
}

/// True when `w0` vanishes on both sides of `x`.
pub fn on_zero_interval(w0: &Profile, x: f64) -> bool {
    let right = w0.eval(x);
    let bps = w0.breakpoints();
    let left = match bps.iter().position(|b| *b == x) {
        Some(k) => w0.values()[k],
        None => right,
    };
    right == 0.0 && left == 0.0
}

fn check_start(w0: &Profile, x: f64) -> Result<()> {
    if !x.is_finite() {
        return Err(argument(format!("interface start {x} is not finite")));
    }
    if on_zero_interval(w0, x) {
        return Err(SbmError::Domain(format!(
            "interface start {x} lies where w0 vanishes; starts need w0 > 0 on at least one side"
        )));
    }
    Ok(())
}

/// Euler step of length `h` from `(x, s)` with standard normal `z`. The drift
/// is read at the midpoint time: it blows up like `s^{-1/2}` near zero, and
/// on doubling steps the left endpoint overstates its integral by a fixed
/// fraction.
fn euler(w0: &Profile, x: f64, s: f64, h: f64, z: f64) -> Result<f64> {
    Ok(x + interface_drift(w0, s + 0.5 * h, x)? * h + h.sqrt() * z)
}

/// One Euler–Maruyama step `I - (w'_s / w_s)(I) dt + sqrt(dt) Z`.
pub fn step_single_interface<R: Rng + ?Sized>(
    position: f64,
    s: f64,
    dt: f64,
    w0: &Profile,
    rng: &mut R,
) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(argument(format!("time step must be positive, got {dt}")));
    }
    euler(w0, position, s, dt, rng.sample(StandardNormal))
}

/// Position at `horizon` of a single interface started at `start`.
pub fn simulate_interface<R: Rng + ?Sized>(
    w0: &Profile,
    start: f64,
    horizon: f64,
    dt: f64,
    rng: &mut R,
) -> Result<f64> {
    check_start(w0, start)?;
    let grid = time_grid(horizon, dt)?;
    let mut x = start;
    for win in grid.windows(2) {
        x = euler(w0, x, win[0], win[1] - win[0], rng.sample(StandardNormal))?;
    }
    Ok(x)
}

/// `P(I_t <= x) = S_t(w0 1_{(I0, inf)})(x) / S_t w0 (x)`.
pub fn interface_cdf(w0: &Profile, start: f64, t: f64, x: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(SbmError::Domain(format!("interface law needs t > 0, got {t}")));
    }
    if w0.is_zero() {
        return Err(SbmError::Domain("interface law needs w0 != 0".into()));
    }
    if x == f64::INFINITY {
        return Ok(1.0);
    }
    if x == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    let total = semigroup_apply(w0, t, x);
    if !(total > 0.0) {
        return Err(SbmError::Domain(format!("S_t w0 vanishes at x = {x}")));
    }
    let right = restricted_semigroup(w0, start, Side::Right, t, x)?;
    Ok((right / total).clamp(0.0, 1.0))
}

/// A merge of two coalescing clusters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub time: f64,
    /// Label whose path carries the merged cluster.
    pub survivor: usize,
    pub absorbed: usize,
    /// Multiplicities before the merge, survivor first.
    pub multiplicities: (u32, u32),
}

/// Paths of a coalescing system on its time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoalescingRun {
    grid: Vec<f64>,
    /// `positions[k][label]`, NaN once the label has been absorbed.
    positions: Vec<Vec<f64>>,
    /// `multiplicity[k][label]`, zero once absorbed.
    multiplicity: Vec<Vec<u32>>,
    merges: Vec<Merge>,
    /// Steps in which some cluster merged more than once.
    pub repeated_merge_steps: u64,
}

impl CoalescingRun {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    pub fn labels(&self) -> usize {
        self.positions[0].len()
    }

    fn index_at(&self, t: f64) -> usize {
        self.grid.partition_point(|g| *g <= t + 1e-12).saturating_sub(1)
    }

    /// `(label, position, multiplicity)` of every cluster at the last grid time `<= t`.
    pub fn clusters_at(&self, t: f64) -> Vec<(usize, f64, u32)> {
        let k = self.index_at(t);
        (0..self.labels())
            .filter(|&i| self.multiplicity[k][i] > 0)
            .map(|i| (i, self.positions[k][i], self.multiplicity[k][i]))
            .collect()
    }

    /// Total multiplicity, equal to the number of starts at every time.
    pub fn total_multiplicity(&self, t: f64) -> u32 {
        self.clusters_at(t).iter().map(|c| c.2).sum()
    }
}

/// `(survivor, absorbed)` for a merge of clusters `i < j`: an odd cluster's
/// label continues, otherwise the lower label does.
fn merge_roles(i: usize, j: usize, mi: u32, mj: u32) -> (usize, usize) {
    match (mi % 2, mj % 2) {
        (1, 0) => (i, j),
        (0, 1) => (j, i),
        _ => (i, j),
    }
}

fn check_starts(w0: &Profile, starts: &[f64]) -> Result<()> {
    if starts.is_empty() {
        return Err(argument("at least one interface start is required"));
    }
    if starts.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(argument("interface starts must be strictly increasing"));
    }
    starts.iter().try_for_each(|&x| check_start(w0, x))
}

/// Candidate collision of two labels within one step.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    time: f64,
    pair: (usize, usize),
}

/// Collision candidates among `active` labels over one step, from the
/// driftless bridge crossing probability `exp(-a b / h)` of the pair
/// difference. Sorted by time, then pair.
fn collisions(
    active: &[usize],
    before: &[f64],
    after: &[f64],
    s: f64,
    h: f64,
    step: u64,
    noise: &KeyedNoise,
) -> Vec<Candidate> {
    let n = before.len() as u64;
    let mut out = Vec::new();
    for (ai, &i) in active.iter().enumerate() {
        for &j in &active[ai + 1..] {
            let a = before[j] - before[i];
            let b = after[j] - after[i];
            let p = if b <= 0.0 || a <= 0.0 { 1.0 } else { (-a * b / h).exp() };
            if p > 0.0 {
                let (u, v) = noise.uniform_pair(PAIR_STREAMS + i as u64 * n + j as u64, step);
                if u < p {
                    out.push(Candidate { time: s + v * h, pair: (i, j) });
                }
            }
        }
    }
    out.sort_by(|x, y| x.time.total_cmp(&y.time).then(x.pair.cmp(&y.pair)));
    out
}

/// Move every label in `active` from `before` over one step, writing `after`.
#[allow(clippy::too_many_arguments)]
fn advance(
    w0: &Profile,
    active: &[usize],
    before: &[f64],
    after: &mut [f64],
    s: f64,
    h: f64,
    step: u64,
    noise: &KeyedNoise,
) -> Result<()> {
    for &i in active {
        after[i] = euler(w0, before[i], s, h, noise.normal(i as u64, step))?;
    }
    Ok(())
}

/// Coalescing motions with the interface drift, driven by `noise`: label `i`
/// draws `noise.normal(i, step)`.
pub fn simulate_coalescing_system(
    starts: &[f64],
    w0: &Profile,
    horizon: f64,
    dt: f64,
    noise: &KeyedNoise,
) -> Result<CoalescingRun> {
    check_starts(w0, starts)?;
    let grid = time_grid(horizon, dt)?;
    let n = starts.len();
    let mut pos = starts.to_vec();
    let mut mult = vec![1u32; n];
    let mut positions = vec![pos.clone()];
    let mut multiplicity = vec![mult.clone()];
    let mut merges = Vec::new();
    let mut repeated = 0u64;
    let mut next = pos.clone();
    for (k, win) in grid.windows(2).enumerate() {
        let (s, h) = (win[0], win[1] - win[0]);
        let active: Vec<usize> = (0..n).filter(|&i| mult[i] > 0).collect();
        advance(w0, &active, &pos, &mut next, s, h, k as u64, noise)?;
        let mut merged_here = vec![0u32; n];
        for c in collisions(&active, &pos, &next, s, h, k as u64, noise) {
            let (i, j) = c.pair;
            if mult[i] == 0 || mult[j] == 0 {
                continue;
            }
            let (keep, gone) = merge_roles(i, j, mult[i], mult[j]);
            merges.push(Merge {
                time: c.time,
                survivor: keep,
                absorbed: gone,
                multiplicities: (mult[keep], mult[gone]),
            });
            mult[keep] += mult[gone];
            mult[gone] = 0;
            next[gone] = f64::NAN;
            merged_here[keep] += 1;
        }
        if merged_here.iter().any(|&m| m > 1) {
            repeated += 1;
        }
        std::mem::swap(&mut pos, &mut next);
        positions.push(pos.clone());
        multiplicity.push(mult.clone());
    }
    Ok(CoalescingRun {
        grid,
        positions,
        multiplicity,
        merges,
        repeated_merge_steps: repeated,
    })
}

/// An annihilation of two interfaces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annihilation {
    pub time: f64,
    pub labels: (usize, usize),
}

/// Trajectory of an annihilating interface system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnihilatingRun {
    grid: Vec<f64>,
    /// `positions[k][label]`, NaN once dead.
    positions: Vec<Vec<f64>>,
    death_times: Vec<Option<f64>>,
    annihilations: Vec<Annihilation>,
    /// Grid times at which the living count had the wrong parity.
    pub parity_violations: u64,
    /// Annihilations that removed other than exactly two living particles.
    pub multiple_removals: u64,
}

impl AnnihilatingRun {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn labels(&self) -> usize {
        self.death_times.len()
    }

    pub fn death_times(&self) -> &[Option<f64>] {
        &self.death_times
    }

    pub fn annihilations(&self) -> &[Annihilation] {
        &self.annihilations
    }

    fn alive_at(&self, i: usize, t: f64) -> bool {
        self.death_times[i].is_none_or(|d| d > t)
    }

    /// Living `(label, position)` at time `t`, ordered by position.
    /// Positions are interpolated linearly between grid times.
    pub fn living_at(&self, t: f64) -> Vec<(usize, f64)> {
        let k = self.grid.partition_point(|g| *g <= t).saturating_sub(1);
        let mut out: Vec<(usize, f64)> = (0..self.labels())
            .filter(|&i| self.alive_at(i, t))
            .map(|i| {
                let x0 = self.positions[k][i];
                match (self.grid.get(k + 1), self.positions.get(k + 1).map(|p| p[i])) {
                    (Some(&g1), Some(x1)) if x1.is_finite() && g1 > self.grid[k] => {
                        let f = ((t - self.grid[k]) / (g1 - self.grid[k])).clamp(0.0, 1.0);
                        (i, x0 + f * (x1 - x0))
                    }
                    _ => (i, x0),
                }
            })
            .collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1));
        out
    }

    pub fn survivors(&self, t: f64) -> usize {
        (0..self.labels()).filter(|&i| self.alive_at(i, t)).count()
    }

    /// Snapshot at time `t`.
    pub fn system_at(&self, t: f64, leftmost: Color) -> InterfaceSystem {
        InterfaceSystem {
            time: t,
            leftmost,
            particles: (0..self.labels())
                .map(|i| {
                    let x = self.living_at(t).into_iter().find(|p| p.0 == i).map(|p| p.1);
                    (i, x)
                })
                .collect(),
        }
    }

    /// CSV rows `time,label,position` with `DEAD` after death.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("time,label,position\n");
        for (k, t) in self.grid.iter().enumerate() {
            for i in 0..self.labels() {
                let x = self.positions[k][i];
                if self.alive_at(i, *t) && x.is_finite() {
                    s.push_str(&format!("{t},{i},{x}\n"));
                } else {
                    s.push_str(&format!("{t},{i},DEAD\n"));
                }
            }
        }
        s
    }
}

/// Particles at one time; `None` marks a dead label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterfaceSystem {
    pub time: f64,
    /// Type to the left of the leftmost living interface.
    pub leftmost: Color,
    pub particles: Vec<(usize, Option<f64>)>,
}

impl InterfaceSystem {
    pub fn living(&self) -> Vec<f64> {
        let mut xs: Vec<f64> = self.particles.iter().filter_map(|p| p.1).collect();
        xs.sort_by(f64::total_cmp);
        xs
    }

    /// Type at `x`: 1 or 2, and 0 exactly on a living interface.
    pub fn colour(&self, x: f64) -> u8 {
        let xs = self.living();
        if xs.contains(&x) {
            return 0;
        }
        let crossed = xs.iter().filter(|p| **p < x).count();
        if crossed % 2 == 0 {
            self.leftmost.as_u8()
        } else {
            self.leftmost.flip().as_u8()
        }
    }
}

/// Keep the odd clusters of a coalescing run: a label is alive while it
/// carries an odd cluster, and odd-with-odd merges are the annihilations.
pub fn annihilate_by_parity(run: &CoalescingRun) -> AnnihilatingRun {
    let n = run.labels();
    let parity0 = n % 2;
    let mut death_times = vec![None; n];
    let mut annihilations = Vec::new();
    let mut multiple_removals = 0;
    for m in run.merges() {
        let (a, b) = m.multiplicities;
        if a % 2 == 1 && b % 2 == 1 {
            for label in [m.survivor, m.absorbed] {
                if death_times[label].is_some() {
                    multiple_removals += 1;
                }
                death_times[label] = Some(m.time);
            }
            let pair = (m.survivor.min(m.absorbed), m.survivor.max(m.absorbed));
            annihilations.push(Annihilation { time: m.time, labels: pair });
        }
    }
    let positions: Vec<Vec<f64>> = run
        .positions
        .iter()
        .zip(&run.multiplicity)
        .map(|(p, c)| {
            p.iter()
                .zip(c)
                .map(|(x, m)| if m % 2 == 1 { *x } else { f64::NAN })
                .collect()
        })
        .collect();
    let parity_violations = run
        .multiplicity
        .iter()
        .filter(|c| c.iter().filter(|m| *m % 2 == 1).count() % 2 != parity0)
        .count() as u64;
    AnnihilatingRun {
        grid: run.grid.clone(),
        positions,
        death_times,
        annihilations,
        parity_violations,
        multiple_removals,
    }
}

/// Direct simulation of pairwise annihilation: only living particles move,
/// and a detected collision of two living particles removes both.
pub fn simulate_annihilating_system(
    starts: &[f64],
    w0: &Profile,
    horizon: f64,
    dt: f64,
    noise: &KeyedNoise,
) -> Result<AnnihilatingRun> {
    check_starts(w0, starts)?;
    let grid = time_grid(horizon, dt)?;
    let n = starts.len();
    let mut pos = starts.to_vec();
    let mut alive = vec![true; n];
    let mut death_times = vec![None; n];
    let mut annihilations = Vec::new();
    let mut positions = vec![pos.clone()];
    let mut parity_violations = 0;
    let mut next = pos.clone();
    for (k, win) in grid.windows(2).enumerate() {
        let (s, h) = (win[0], win[1] - win[0]);
        let active: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
        advance(w0, &active, &pos, &mut next, s, h, k as u64, noise)?;
        for c in collisions(&active, &pos, &next, s, h, k as u64, noise) {
            let (i, j) = c.pair;
            if alive[i] && alive[j] {
                alive[i] = false;
                alive[j] = false;
                death_times[i] = Some(c.time);
                death_times[j] = Some(c.time);
                next[i] = f64::NAN;
                next[j] = f64::NAN;
                annihilations.push(Annihilation { time: c.time, labels: (i, j) });
            }
        }
        if alive.iter().filter(|a| **a).count() % 2 != n % 2 {
            parity_violations += 1;
        }
        std::mem::swap(&mut pos, &mut next);
        positions.push(pos.clone());
    }
    Ok(AnnihilatingRun {
        grid,
        positions,
        death_times,
        annihilations,
        parity_violations,
        multiple_removals: 0,
    })
}

/// Initial condition `u0 = (w0 1{type 1}, w0 1{type 2})`, with types
/// alternating across the listed interfaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypedProfile {
    pub total: Profile,
    pub interfaces: Vec<f64>,
    pub leftmost: Color,
}

impl TypedProfile {
    pub fn new(total: Profile, interfaces: Vec<f64>, leftmost: Color) -> Result<Self> {
        check_starts(&total, &interfaces)?;
        Ok(TypedProfile { total, interfaces, leftmost })
    }

    /// Type 1 left of `at`, type 2 right of it, on the mass profile `total`.
    pub fn single(total: Profile, at: f64) -> Result<Self> {
        Self::new(total, vec![at], Color::One)
    }

    /// Type at `x` at time zero (0 on an interface).
    pub fn colour(&self, x: f64) -> u8 {
        InterfaceSystem {
            time: 0.0,
            leftmost: self.leftmost,
            particles: self.interfaces.iter().map(|x| (0, Some(*x))).collect(),
        }
        .colour(x)
    }

    /// Density of one type as a profile.
    pub fn density(&self, color: Color) -> Result<Profile> {
        let mut cuts: Vec<f64> = self
            .total
            .breakpoints()
            .iter()
            .chain(&self.interfaces)
            .copied()
            .collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let sample = |lo: f64, hi: f64| -> f64 {
            let mid = match (lo.is_finite(), hi.is_finite()) {
                (true, true) => 0.5 * (lo + hi),
                (true, false) => lo + 1.0,
                (false, true) => hi - 1.0,
                (false, false) => 0.0,
            };
            if self.colour(mid) == color.as_u8() {
                self.total.eval(mid)
            } else {
                0.0
            }
        };
        let mut values = Vec::with_capacity(cuts.len() + 1);
        let mut lo = f64::NEG_INFINITY;
        for c in cuts.iter().copied().chain([f64::INFINITY]) {
            values.push(sample(lo, c));
            lo = c;
        }
        Profile::new(cuts, values)
    }
}

impl fmt::Display for TypedProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "leftmost {}", self.leftmost.as_u8())?;
        for x in &self.interfaces {
            writeln!(f, "interface {x}")?;
        }
        write!(f, "{}", self.total)
    }
}

impl FromStr for TypedProfile {
    type Err = SbmError;

    /// The profile file format plus `leftmost <1|2>` and `interface <x>` lines.
    fn from_str(s: &str) -> Result<Self> {
        let mut leftmost = None;
        let mut interfaces = Vec::new();
        let mut rest = Vec::new();
        for (k, raw) in s.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.as_slice() {
                ["leftmost", v] => {
                    let c = match *v {
                        "1" => Color::One,
                        "2" => Color::Two,
                        other => {
                            return Err(SbmError::Parse(format!(
                                "line {}: leftmost type must be 1 or 2, got {other:?}",
                                k + 1
                            )))
                        }
                    };
                    leftmost = Some(c);
                    rest.push("");
                }
                ["interface", x] => {
                    interfaces.push(parse_number(x, k + 1)?);
                    rest.push("");
                }
                _ => rest.push(raw),
            }
        }
        let total: Profile = rest.join("\n").parse()?;
        let leftmost = leftmost.ok_or_else(|| SbmError::Parse("missing 'leftmost' line".into()))?;
        TypedProfile::new(total, interfaces, leftmost)
    }
}

/// `(u^1_t(x), u^2_t(x)) = (w_t(x) 1{type 1}, w_t(x) 1{type 2})`, both zero on a living interface.
pub fn standard_element(
    u0: &TypedProfile,
    run: &AnnihilatingRun,
    t: f64,
    x: f64,
) -> Result<(f64, f64)> {
    if !(t >= 0.0) {
        return Err(argument(format!("time must be >= 0, got {t}")));
    }
    if run.labels() != u0.interfaces.len() {
        return Err(argument("interface run does not match the typed profile"));
    }
    let w = semigroup_apply(&u0.total, t, x);
    Ok(match run.system_at(t, u0.leftmost).colour(x) {
        1 => (w, 0.0),
        2 => (0.0, w),
        _ => (0.0, 0.0),
    })
}

/// `E_{x,y}[first(X^1_t) second(X^2_t) 1{t < tau}]` for Brownian motions
/// from `x != y`, with `tau` their first meeting time, by integrating the
/// non-crossing density determinant `p(x,x')p(y,y') - p(x,y')p(y,x')`.
/// The inner integral is a closed-form restricted semigroup; the outer one
/// uses Gauss–Legendre panels.
pub fn noncollision_moment(first: &Profile, second: &Profile, x: f64, y: f64, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(SbmError::Domain(format!("need t > 0, got {t}")));
    }
    if x == y {
        return Err(argument("starting points must differ"));
    }
    let sd = t.sqrt();
    let side = if x < y { Side::Right } else { Side::Left };
    let kernel = |z: f64| normal_pdf(z / sd) / sd;
    let integrand = |xp: f64| -> f64 {
        let v = first.eval(xp);
        if v == 0.0 {
            return 0.0;
        }
        let ry = restricted_semigroup(second, xp, side, t, y).unwrap_or(0.0);
        let rx = restricted_semigroup(second, xp, side, t, x).unwrap_or(0.0);
        v * (kernel(x - xp) * ry - kernel(y - xp) * rx)
    };
    let lo = x.min(y) - 14.0 * sd;
    let hi = x.max(y) + 14.0 * sd;
    let mut cuts = vec![lo];
    cuts.extend(first.breakpoints().iter().copied().filter(|b| *b > lo && *b < hi));
    cuts.push(hi);
    let rule = GaussLegendre::new(NonZeroUsize::new(24).expect("nonzero"));
    let panel = 0.25 * sd;
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let pieces = ((w[1] - w[0]) / panel).ceil().max(1.0) as usize;
        let len = (w[1] - w[0]) / pieces as f64;
        for k in 0..pieces {
            let a = w[0] + k as f64 * len;
            total += rule.integrate(a, a + len, integrand);
        }
    }
    Ok(total)
}

/// Both sides of the two-point identity
/// `E[u^1_t(x) u^2_t(y)] = E_{x,y}[u0^1(X^1_t) u0^2(X^2_t) 1{t < tau}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecondMomentCheck {
    /// Standard element from the parity construction.
    pub lhs: Estimate,
    /// Two Brownian walkers with the infinite-rate dual.
    pub rhs: Estimate,
    /// Non-collision quadrature of the right side.
    pub quadrature: f64,
    pub z: f64,
}

/// Monte Carlo of both sides with `replicas` runs each, plus the quadrature.
pub fn second_moment_check(
    u0: &TypedProfile,
    t: f64,
    x: f64,
    y: f64,
    replicas: usize,
    dt: f64,
    seed: u64,
) -> Result<SecondMomentCheck> {
    if x == y {
        return Err(argument("observation points must differ"));
    }
    if !(t > 0.0) {
        return Err(SbmError::Domain(format!("need t > 0, got {t}")));
    }
    if replicas < 2 {
        return Err(argument("at least two replicas are required"));
    }
    let first = u0.density(Color::One)?;
    let second = u0.density(Color::Two)?;
    let quadrature = noncollision_moment(&first, &second, x, y, t)?;
    let values: Vec<Result<f64>> = (0..replicas as u64)
        .into_par_iter()
        .map(|k| {
            let noise = KeyedNoise::new(derive_stream(seed, k).random());
            let run = annihilate_by_parity(&simulate_coalescing_system(
                &u0.interfaces,
                &u0.total,
                t,
                dt,
                &noise,
            )?);
            Ok(standard_element(u0, &run, t, x)?.0 * standard_element(u0, &run, t, y)?.1)
        })
        .collect();
    let lhs = Estimate::from_samples(&values.into_iter().collect::<Result<Vec<_>>>()?);
    let rhs = dual_moment_estimate(
        &InitialDensities::Profiles { first, second },
        &DualStarts::Continuum { points: vec![x, y], dt },
        "12".parse()?,
        -1.0,
        Rate::Infinite,
        t,
        replicas,
        seed.wrapping_add(0x5eed),
    )?;
    Ok(SecondMomentCheck { z: z_score(&lhs, &rhs), lhs, rhs, quadrature })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{ks_critical_1pct, ks_statistic, normal_cdf};

    fn flat() -> Profile {
        Profile::constant(1.0).unwrap()
    }

    #[test]
    fn grid_shape() {
        let g = time_grid(1.0, 0.01).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], MIN_SUBSTEP);
        assert!((g.last().unwrap() - 1.0).abs() < 1e-12);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(time_grid(0.0, 0.01).unwrap(), vec![0.0]);
        let short = time_grid(0.25, 0.1).unwrap();
        assert!((short.last().unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn flat_profile_gives_brownian_motion() {
        let mut rng = derive_stream(1, 0);
        let xs: Vec<f64> = (0..10_000)
            .map(|_| simulate_interface(&flat(), 0.3, 1.0, 0.01, &mut rng).unwrap() - 0.3)
            .collect();
        let e = Estimate::from_samples(&xs);
        assert!(e.mean.abs() < 3.0 * e.se);
        assert!((e.sample_variance() - 1.0).abs() < 0.05);
    }

    #[test]
    fn drift_points_to_lower_mass() {
        // Symmetric about 0 in shape, more mass on the right.
        let w = Profile::new(vec![-1.0, 1.0], vec![1.0, 1.5, 2.0]).unwrap();
        assert!(interface_drift(&w, 0.5, 0.0).unwrap() < 0.0);
        let mut rng = derive_stream(2, 0);
        let moves: Vec<f64> = (0..20_000)
            .map(|_| step_single_interface(0.0, 0.5, 0.01, &w, &mut rng).unwrap())
            .collect();
        let e = Estimate::from_samples(&moves);
        let want = interface_drift(&w, 0.5, 0.0).unwrap() * 0.01;
        assert!((e.mean - want).abs() < 3.0 * e.se);
    }

    #[test]
    fn cdf_examples() {
        for x in [-1.0, 0.2, 2.0] {
            let c = interface_cdf(&flat(), 0.1, 2.0, x).unwrap();
            assert!((c - normal_cdf((x - 0.1) / 2f64.sqrt())).abs() < 1e-12);
        }
        let sym = Profile::new(vec![-1.0, 1.0], vec![2.0, 1.0, 2.0]).unwrap();
        assert!((interface_cdf(&sym, 0.0, 0.7, 0.0).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(interface_cdf(&sym, 0.0, 0.7, f64::INFINITY).unwrap(), 1.0);
        assert!(interface_cdf(&sym, 0.0, 0.7, -40.0).unwrap() < 1e-12);
        assert!(interface_cdf(&sym, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn step_profile_matches_cdf() {
        let w = Profile::step(0.0, 1.0, 2.0).unwrap();
        let mut rng = derive_stream(3, 0);
        let xs: Vec<f64> = (0..5000)
            .map(|_| simulate_interface(&w, 0.0, 1.0, 0.001, &mut rng).unwrap())
            .collect();
        let d = ks_statistic(&xs, |x| interface_cdf(&w, 0.0, 1.0, x).unwrap());
        assert!(d < ks_critical_1pct(5000), "{d}");
    }

    #[test]
    fn zero_interval_starts_rejected() {
        let w = Profile::new(vec![0.0, 1.0], vec![1.0, 0.0, 1.0]).unwrap();
        assert!(simulate_interface(&w, 0.5, 1.0, 0.01, &mut derive_stream(0, 0)).is_err());
        assert!(!on_zero_interval(&w, 0.0));
        assert!(!on_zero_interval(&w, 1.0));
    }

    #[test]
    fn coalescing_examples() {
        let noise = KeyedNoise::new(5);
        let one = simulate_coalescing_system(&[0.0], &flat(), 1.0, 0.01, &noise).unwrap();
        assert_eq!(one.clusters_at(1.0).len(), 1);
        assert_eq!(one.clusters_at(1.0)[0].2, 1);
        let two = simulate_coalescing_system(&[0.0, 0.05], &flat(), 50.0, 0.01, &noise).unwrap();
        let end = two.clusters_at(50.0);
        assert_eq!(end.len(), 1);
        assert_eq!(end[0].2, 2);
        let many = simulate_coalescing_system(&[-1.0, -0.2, 0.0, 0.5, 2.0], &flat(), 3.0, 0.01, &noise).unwrap();
        for &t in many.grid() {
            assert_eq!(many.total_multiplicity(t), 5);
            let xs: Vec<f64> = many.clusters_at(t).iter().map(|c| c.1).collect();
            assert!(xs.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn parity_examples() {
        let noise = KeyedNoise::new(6);
        let two = simulate_coalescing_system(&[0.0, 0.05], &flat(), 50.0, 0.01, &noise).unwrap();
        let a = annihilate_by_parity(&two);
        assert_eq!(a.survivors(50.0), 0);
        assert_eq!(a.death_times()[0], a.death_times()[1]);
        let three = simulate_coalescing_system(&[0.0, 0.05, 0.1], &flat(), 200.0, 0.01, &noise).unwrap();
        assert_eq!(three.clusters_at(200.0).len(), 1);
        let a = annihilate_by_parity(&three);
        assert_eq!(a.survivors(200.0), 1);
        for &t in a.grid() {
            assert_eq!(a.survivors(t) % 2, 1);
        }
        assert_eq!(a.parity_violations, 0);
        assert_eq!(a.multiple_removals, 0);
    }

    #[test]
    fn parity_construction_matches_direct_annihilation() {
        let w = Profile::step(0.0, 1.0, 2.0).unwrap();
        let starts = [-0.6, -0.3, 0.0, 0.2, 0.7];
        for seed in 0..40 {
            let noise = KeyedNoise::new(seed);
            let c = simulate_coalescing_system(&starts, &w, 2.0, 0.005, &noise).unwrap();
            let a = annihilate_by_parity(&c);
            let d = simulate_annihilating_system(&starts, &w, 2.0, 0.005, &noise).unwrap();
            assert_eq!(a.death_times(), d.death_times(), "seed {seed}");
            assert_eq!(a.annihilations(), d.annihilations());
            for t in [0.5, 1.0, 2.0] {
                assert_eq!(a.living_at(t), d.living_at(t));
            }
        }
    }

    #[test]
    fn typed_profile_file_round_trip() {
        let text = "# two interfaces\nleftmost 2\ninterface -1\ninterface 0.5\n1\n0 2\n";
        let u: TypedProfile = text.parse().unwrap();
        assert_eq!(u.leftmost, Color::Two);
        assert_eq!(u.interfaces, vec![-1.0, 0.5]);
        let back: TypedProfile = u.to_string().parse().unwrap();
        assert_eq!(back, u);
        let first = u.density(Color::One).unwrap();
        let second = u.density(Color::Two).unwrap();
        assert_eq!(first.eval(-0.5), 1.0);
        assert_eq!(first.eval(0.2), 2.0);
        assert_eq!(second.eval(1.0), 2.0);
        assert_eq!(second.eval(-3.0), 1.0);
        assert!("interface 0\n1\n".parse::<TypedProfile>().is_err());
        assert!("leftmost 3\n1\n".parse::<TypedProfile>().is_err());
    }

    #[test]
    fn standard_element_examples() {
        let u0 = TypedProfile::single(Profile::step(0.0, 1.0, 2.0).unwrap(), 0.1).unwrap();
        let noise = KeyedNoise::new(8);
        let c = simulate_coalescing_system(&u0.interfaces, &u0.total, 1.0, 0.01, &noise).unwrap();
        let a = annihilate_by_parity(&c);
        for t in [0.0, 0.3, 1.0] {
            let it = a.living_at(t)[0].1;
            for x in [-2.0, -0.1, 0.05, 0.5, 2.0] {
                let (p, q) = standard_element(&u0, &a, t, x).unwrap();
                let w = semigroup_apply(&u0.total, t, x);
                assert_eq!(p * q, 0.0);
                assert!((p + q - w).abs() < 1e-15);
                assert_eq!(p > 0.0, x < it);
            }
        }
        let (p, q) = standard_element(&u0, &a, 0.0, -1.0).unwrap();
        assert_eq!((p, q), (1.0, 0.0));
        let (p, q) = standard_element(&u0, &a, 0.0, 0.1).unwrap();
        assert_eq!((p, q), (0.0, 0.0));
    }

    #[test]
    fn noncollision_quadrature_heaviside() {
        let u0 = TypedProfile::single(flat(), 0.2).unwrap();
        let first = u0.density(Color::One).unwrap();
        let second = u0.density(Color::Two).unwrap();
        for (x, y, t) in [(-0.5, 0.7, 1.0), (0.0, 0.3, 0.2), (-2.0, 3.0, 4.0)] {
            let q = noncollision_moment(&first, &second, x, y, t).unwrap();
            let exact = normal_cdf((y - 0.2) / t.sqrt()) - normal_cdf((x - 0.2) / t.sqrt());
            assert!((q - exact).abs() < 1e-8, "{q} vs {exact}");
        }
        // Wrong order: type 1 must be on the left path, so it vanishes here.
        let q = noncollision_moment(&first, &second, 0.7, -0.5, 1.0).unwrap();
        assert!(q.abs() < 1e-8);
    }

    #[test]
    fn second_moment_sides_agree() {
        let u0 = TypedProfile::single(flat(), 0.0).unwrap();
        let r = second_moment_check(&u0, 1.0, -0.4, 0.6, 3000, 0.01, 3).unwrap();
        let exact = normal_cdf(0.6) - normal_cdf(-0.4);
        assert!((r.quadrature - exact).abs() < 1e-8);
        assert!((r.lhs.mean - exact).abs() < 3.0 * r.lhs.se, "{:?}", r.lhs);
        assert!((r.rhs.mean - exact).abs() < 3.0 * r.rhs.se, "{:?}", r.rhs);
        let early = second_moment_check(&u0, 1e-6, -0.4, 0.6, 10, 1e-7, 3).unwrap();
        assert_eq!(early.lhs.mean, 1.0);
        assert_eq!(early.rhs.mean, 1.0);
    }
}
