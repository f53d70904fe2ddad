//! Dual color processes driven by recorded walker paths.
//!
//! * [`evolve_m_gamma`]: finite branching rate. Between collision events the
//!   measure follows `K_s` with `s` equal to `gamma` times elapsed time on the
//!   lattice, or `gamma` times the active pair's local time in the continuum.
//! * [`evolve_m_infinity`]: the limit jump chain, applying `K_inf` at events.
//! * [`simulate_colored_dual`]: the original colored-particle process, whose
//!   weighted coloring law reproduces `M^gamma`.
//! * [`dual_moment_estimate`]: Monte Carlo over independent walker paths of
//!   the dual side of the moment identity.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coloring::{Color, ColorMeasure, Coloring, SetPartition};
use crate::error::{argument, Result};
use crate::flow::{build_partition_matrix, check_critical, check_rho, k_infinity, rounding_tolerance};
use crate::heat::Profile;
use crate::rng::{derive_stream, open01};
use crate::stats::Estimate;
use crate::walkers::{simulate_brownian_walkers, simulate_lattice_walkers, Site, WalkerPaths};
use crate::SbmError;

/// Branching rate: finite `gamma > 0`, or the infinite-rate limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Rate {
    Finite(f64),
    Infinite,
}

impl Rate {
    pub fn check(&self) -> Result<()> {
        match self {
            Rate::Finite(g) if !(*g > 0.0) || !g.is_finite() => {
                Err(argument(format!("branching rate must be positive and finite, got {g}")))
            }
            _ => Ok(()),
        }
    }
}

impl std::str::FromStr for Rate {
    type Err = SbmError;

    /// A number, or `inf`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") {
            return Ok(Rate::Infinite);
        }
        let g: f64 = t
            .parse()
            .map_err(|_| SbmError::Parse(format!("rate must be a number or \"inf\", got {s:?}")))?;
        let r = Rate::Finite(g);
        r.check()?;
        Ok(r)
    }
}

/// Dual measures sampled along one walker path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualTrajectory {
    pub times: Vec<f64>,
    pub measures: Vec<ColorMeasure>,
    pub rate: Rate,
}

impl DualTrajectory {
    pub fn last(&self) -> &ColorMeasure {
        self.measures.last().expect("trajectory has at least one sample")
    }
}

fn check_samples(paths: &WalkerPaths, m0: &ColorMeasure, times: &[f64]) -> Result<()> {
    if m0.n() != paths.n() {
        return Err(argument(format!(
            "initial measure has n = {} but the paths have {} walkers",
            m0.n(),
            paths.n()
        )));
    }
    if times.is_empty() {
        return Err(argument("at least one sample time is required"));
    }
    if times.windows(2).any(|w| w[0] > w[1]) {
        return Err(argument("sample times must be nondecreasing"));
    }
    if times[0] < 0.0 || times[times.len() - 1] > paths.horizon() {
        return Err(argument(format!(
            "sample times must lie in [0, {}]",
            paths.horizon()
        )));
    }
    Ok(())
}

/// Flow matrices reused across the segments of one path.
struct FlowCache {
    rho: f64,
    matrices: HashMap<SetPartition, DMatrix<f64>>,
}

impl FlowCache {
    fn new(rho: f64) -> Self {
        FlowCache {
            rho,
            matrices: HashMap::new(),
        }
    }

    fn evolve(&mut self, m: &ColorMeasure, pi: &SetPartition, s: f64) -> Result<ColorMeasure> {
        if s == 0.0 || pi.is_singletons() {
            return Ok(m.clone());
        }
        let a = match self.matrices.get(pi) {
            Some(a) => a,
            None => {
                let a = build_partition_matrix(pi, self.rho)?.into_entries();
                self.matrices.entry(pi.clone()).or_insert(a)
            }
        };
        let out = (a * s).exp() * DVector::from_column_slice(m.values());
        let tol = rounding_tolerance(m.sup_norm(), a.norm() * s);
        let mut values = Vec::with_capacity(out.len());
        for (k, v) in out.iter().enumerate() {
            if *v < -tol || !v.is_finite() {
                return Err(SbmError::Accuracy(format!(
                    "dual flow produced {v:e} at coloring index {k}"
                )));
            }
            values.push(v.max(0.0));
        }
        Ok(ColorMeasure::from_raw(m.n(), values))
    }
}

/// `M^gamma` at each of `times` (nondecreasing, within the horizon).
pub fn evolve_m_gamma(
    paths: &WalkerPaths,
    m0: &ColorMeasure,
    rho: f64,
    gamma: f64,
    times: &[f64],
) -> Result<DualTrajectory> {
    check_rho(rho)?;
    Rate::Finite(gamma).check()?;
    check_samples(paths, m0, times)?;
    let mut cache = FlowCache::new(rho);
    let events = paths.events();
    // State at the start of the current segment.
    let mut seg_start = 0.0;
    let mut seg_value = m0.clone();
    let mut seg_partition = paths.initial_partition().clone();
    let mut seg_pair: Option<(usize, usize)> = None;
    let mut next = 0usize;
    let elapsed = |pair: Option<(usize, usize)>, from: f64, to: f64| -> f64 {
        match pair {
            None if paths.is_lattice() => to - from,
            None => 0.0,
            Some((i, j)) => paths.pair_local_time(i, j, to) - paths.pair_local_time(i, j, from),
        }
    };
    let mut measures = Vec::with_capacity(times.len());
    for &t in times {
        while next < events.len() && events[next].time <= t {
            let e = &events[next];
            let s = gamma * elapsed(seg_pair, seg_start, e.time);
            seg_value = cache.evolve(&seg_value, &seg_partition, s)?;
            seg_start = e.time;
            seg_partition = e.partition.clone();
            seg_pair = e.pair;
            next += 1;
        }
        let s = gamma * elapsed(seg_pair, seg_start, t);
        measures.push(cache.evolve(&seg_value, &seg_partition, s)?);
    }
    Ok(DualTrajectory {
        times: times.to_vec(),
        measures,
        rate: Rate::Finite(gamma),
    })
}

/// `M^inf` at each of `times`. On the lattice the value on `[0, tau_1)` is
/// already `K_inf(M_0, pi(X_0))`; in the continuum it is `M_0` until the
/// first collision.
pub fn evolve_m_infinity(
    paths: &WalkerPaths,
    m0: &ColorMeasure,
    rho: f64,
    times: &[f64],
) -> Result<DualTrajectory> {
    check_critical(paths.n(), rho)?;
    check_samples(paths, m0, times)?;
    let events = paths.events();
    let mut value = if paths.is_lattice() {
        k_infinity(m0, paths.initial_partition(), rho)?
    } else {
        m0.clone()
    };
    let mut next = 0usize;
    let mut measures = Vec::with_capacity(times.len());
    for &t in times {
        while next < events.len() && events[next].time <= t {
            value = k_infinity(&value, &events[next].partition, rho)?;
            next += 1;
        }
        measures.push(value.clone());
    }
    Ok(DualTrajectory {
        times: times.to_vec(),
        measures,
        rate: Rate::Infinite,
    })
}

/// Coloring of the original dual together with its split local times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColoredParticleState {
    pub coloring: Coloring,
    /// Pair local time accrued while the pair had equal colors.
    pub same: f64,
    /// Pair local time accrued while the pair had different colors.
    pub different: f64,
}

impl ColoredParticleState {
    /// `exp(gamma (L^= + rho L^!=))`.
    pub fn correction(&self, rho: f64, gamma: f64) -> f64 {
        (gamma * (self.same + rho * self.different)).exp()
    }
}

fn exp_draw<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    if rate <= 0.0 {
        f64::INFINITY
    } else {
        -open01(rng).ln() / rate
    }
}

/// Run `duration` of common coincidence time for every within-block pair of `pi`.
fn run_lattice_segment<R: Rng + ?Sized>(
    state: &mut ColoredParticleState,
    pi: &SetPartition,
    gamma: f64,
    mut duration: f64,
    rng: &mut R,
) {
    if pi.is_singletons() || duration <= 0.0 {
        return;
    }
    loop {
        let mut same_pairs: Vec<(usize, usize)> = Vec::new();
        let mut discordant = 0usize;
        for b in pi.blocks() {
            for (x, &i) in b.iter().enumerate() {
                for &j in &b[x + 1..] {
                    if state.coloring.get(i) == state.coloring.get(j) {
                        same_pairs.push((i, j));
                    } else {
                        discordant += 1;
                    }
                }
            }
        }
        let wait = exp_draw(rng, gamma * same_pairs.len() as f64);
        let run = wait.min(duration);
        state.same += run * same_pairs.len() as f64;
        state.different += run * discordant as f64;
        if wait >= duration {
            return;
        }
        duration -= wait;
        let (i, j) = same_pairs[rng.random_range(0..same_pairs.len())];
        let who = if rng.random::<bool>() { i } else { j };
        state.coloring = state.coloring.flipped(who);
    }
}

/// Apply local time `amount` to a single pair.
fn run_pair<R: Rng + ?Sized>(
    state: &mut ColoredParticleState,
    (i, j): (usize, usize),
    gamma: f64,
    amount: f64,
    rng: &mut R,
) {
    if amount <= 0.0 {
        return;
    }
    if state.coloring.get(i) != state.coloring.get(j) {
        state.different += amount;
        return;
    }
    let wait = exp_draw(rng, gamma);
    if wait >= amount {
        state.same += amount;
        return;
    }
    state.same += wait;
    let who = if rng.random::<bool>() { i } else { j };
    state.coloring = state.coloring.flipped(who);
    state.different += amount - wait;
}

/// The colored-particle dual started from `c`, observed at each of `times`.
pub fn simulate_colored_dual<R: Rng + ?Sized>(
    paths: &WalkerPaths,
    c: Coloring,
    rho: f64,
    gamma: f64,
    times: &[f64],
    rng: &mut R,
) -> Result<Vec<ColoredParticleState>> {
    check_rho(rho)?;
    Rate::Finite(gamma).check()?;
    check_samples(paths, &ColorMeasure::delta(c), times)?;
    let mut state = ColoredParticleState {
        coloring: c,
        same: 0.0,
        different: 0.0,
    };
    let mut out = Vec::with_capacity(times.len());
    if paths.is_lattice() {
        let events = paths.events();
        let mut clock = 0.0;
        let mut pi = paths.initial_partition();
        let mut next = 0usize;
        for &t in times {
            while next < events.len() && events[next].time <= t {
                run_lattice_segment(&mut state, pi, gamma, events[next].time - clock, rng);
                clock = events[next].time;
                pi = &events[next].partition;
                next += 1;
            }
            run_lattice_segment(&mut state, pi, gamma, t - clock, rng);
            clock = t;
            out.push(state);
        }
    } else {
        // Pieces are consumed in start order; a piece straddling a sample time
        // is split in proportion to elapsed time.
        let pieces = paths.pieces();
        let mut used = vec![0.0f64; pieces.len()];
        let mut first_open = 0usize;
        for &t in times {
            for (k, p) in pieces.iter().enumerate().skip(first_open) {
                if p.start >= t {
                    break;
                }
                let frac = if p.end <= t || p.end <= p.start {
                    1.0
                } else {
                    (t - p.start) / (p.end - p.start)
                };
                if frac > used[k] {
                    run_pair(&mut state, p.pair, gamma, p.amount * (frac - used[k]), rng);
                    used[k] = frac;
                }
            }
            while first_open < pieces.len() && used[first_open] >= 1.0 {
                first_open += 1;
            }
            out.push(state);
        }
    }
    Ok(out)
}

/// Monte Carlo estimate of `M^gamma_t(b) = E[exp(gamma(L^= + rho L^!=)) 1{C_t = b}]`
/// on one fixed path, for every coloring `b`.
pub fn colored_dual_measure(
    paths: &WalkerPaths,
    c: Coloring,
    rho: f64,
    gamma: f64,
    t: f64,
    replicas: usize,
    seed: u64,
) -> Result<Vec<Estimate>> {
    let dim = 1usize << paths.n();
    let draws: Vec<Result<ColoredParticleState>> = (0..replicas as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = derive_stream(seed, k);
            Ok(simulate_colored_dual(paths, c, rho, gamma, &[t], &mut rng)?[0])
        })
        .collect();
    let mut columns = vec![Vec::with_capacity(replicas); dim];
    for d in draws {
        let s = d?;
        let w = s.correction(rho, gamma);
        for (b, col) in columns.iter_mut().enumerate() {
            col.push(if s.coloring.lex_index() == b { w } else { 0.0 });
        }
    }
    Ok(columns.iter().map(|c| Estimate::from_samples(c)).collect())
}

/// Initial densities `(u^1, u^2)` of the forward model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InitialDensities {
    /// Constant values, usable in any space.
    Constant { first: f64, second: f64 },
    /// Periodic site values on `Z`, indexed by the first coordinate modulo the length.
    Periodic { first: Vec<f64>, second: Vec<f64> },
    /// Piecewise-constant profiles on the real line.
    Profiles { first: Profile, second: Profile },
}

impl InitialDensities {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        match self {
            InitialDensities::Constant { first, second } => {
                if !ok(*first) || !ok(*second) {
                    return Err(argument("initial densities must be bounded and nonnegative"));
                }
            }
            InitialDensities::Periodic { first, second } => {
                if first.is_empty() || first.len() != second.len() {
                    return Err(argument("periodic densities need equal nonzero lengths"));
                }
                if !first.iter().chain(second).all(|v| ok(*v)) {
                    return Err(argument("initial densities must be bounded and nonnegative"));
                }
            }
            // Profiles validate on construction.
            InitialDensities::Profiles { .. } => {}
        }
        Ok(())
    }

    /// Complementary step on a torus of `len` sites: type 1 on `[0, len/2)`.
    pub fn complementary_torus(len: usize) -> Self {
        let first: Vec<f64> = (0..len).map(|x| if x < len / 2 { 1.0 } else { 0.0 }).collect();
        let second = first.iter().map(|v| 1.0 - v).collect();
        InitialDensities::Periodic { first, second }
    }

    /// Type 1 on `(-inf, at)`, type 2 on `[at, inf)`.
    pub fn complementary_line(at: f64) -> Result<Self> {
        Ok(InitialDensities::Profiles {
            first: Profile::step(at, 1.0, 0.0)?,
            second: Profile::step(at, 0.0, 1.0)?,
        })
    }

    pub fn at_site(&self, color: Color, x: &Site) -> Result<f64> {
        match self {
            InitialDensities::Constant { first, second } => Ok(pick(color, *first, *second)),
            InitialDensities::Periodic { first, second } => {
                let k = x[0].rem_euclid(first.len() as i64) as usize;
                Ok(pick(color, first[k], second[k]))
            }
            InitialDensities::Profiles { .. } => {
                Err(argument("profile densities live on the line, not the lattice"))
            }
        }
    }

    pub fn at_point(&self, color: Color, x: f64) -> Result<f64> {
        match self {
            InitialDensities::Constant { first, second } => Ok(pick(color, *first, *second)),
            InitialDensities::Profiles { first, second } => {
                Ok(pick(color, first.eval(x), second.eval(x)))
            }
            InitialDensities::Periodic { .. } => {
                Err(argument("periodic site densities live on the lattice, not the line"))
            }
        }
    }
}

fn pick(color: Color, first: f64, second: f64) -> f64 {
    match color {
        Color::One => first,
        Color::Two => second,
    }
}

/// Dual walker starting configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DualStarts {
    Lattice { dim: usize, sites: Vec<Site> },
    Continuum { points: Vec<f64>, dt: f64 },
}

impl DualStarts {
    pub fn n(&self) -> usize {
        match self {
            DualStarts::Lattice { sites, .. } => sites.len(),
            DualStarts::Continuum { points, .. } => points.len(),
        }
    }
}

/// `sum_b M_t(b) prod_i u0^{b_i}(X^i_t)` on one path.
pub fn dual_functional(
    paths: &WalkerPaths,
    m: &ColorMeasure,
    u0: &InitialDensities,
    t: f64,
) -> Result<f64> {
    let n = paths.n();
    let mut table = Vec::with_capacity(n);
    if paths.is_lattice() {
        for x in paths.sites_at(t) {
            table.push([u0.at_site(Color::One, x)?, u0.at_site(Color::Two, x)?]);
        }
    } else {
        for x in paths.points_at(t) {
            table.push([u0.at_point(Color::One, x)?, u0.at_point(Color::Two, x)?]);
        }
    }
    Ok(m.pair_with(|b| {
        (0..n)
            .map(|i| table[i][b.get(i).slot()])
            .product::<f64>()
    }))
}

/// Monte Carlo over `replicas` independent walker paths of the dual side
/// `E[sum_b M_t(b) prod_i u0^{b_i}(X^i_t)]` with `M_0 = delta_c`.
#[allow(clippy::too_many_arguments)]
pub fn dual_moment_estimate(
    u0: &InitialDensities,
    starts: &DualStarts,
    c: Coloring,
    rho: f64,
    rate: Rate,
    t: f64,
    replicas: usize,
    seed: u64,
) -> Result<Estimate> {
    u0.validate()?;
    rate.check()?;
    let n = starts.n();
    if c.len() != n {
        return Err(argument(format!(
            "coloring has length {} but there are {n} walkers",
            c.len()
        )));
    }
    match rate {
        Rate::Infinite => check_critical(n, rho)?,
        Rate::Finite(_) => check_rho(rho)?,
    }
    if !(t >= 0.0) || !t.is_finite() {
        return Err(argument(format!("time must be finite and >= 0, got {t}")));
    }
    if replicas == 0 {
        return Err(argument("at least one replica is required"));
    }
    let m0 = ColorMeasure::delta(c);
    let horizon = t.max(f64::MIN_POSITIVE);
    let samples: Vec<Result<f64>> = (0..replicas as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = derive_stream(seed, k);
            let paths = match starts {
                DualStarts::Lattice { dim, sites } => {
                    simulate_lattice_walkers(*dim, sites, horizon, &mut rng)?
                }
                DualStarts::Continuum { points, dt } => {
                    simulate_brownian_walkers(points, horizon, *dt, &mut rng)?
                }
            };
            let m = match rate {
                Rate::Finite(g) => evolve_m_gamma(&paths, &m0, rho, g, &[t])?,
                Rate::Infinite => evolve_m_infinity(&paths, &m0, rho, &[t])?,
            };
            dual_functional(&paths, m.last(), u0, t)
        })
        .collect();
    let values = samples.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(Estimate::from_samples(&values))
}
