//! Experiment configuration, dispatch and machine-readable reports.
//!
//! A run is fully determined by its [`ExperimentConfig`]: reports embed the
//! config, and every random draw comes from streams derived from its seed, so
//! the JSON output is byte-identical across runs and thread counts. Wall-clock
//! runtime is kept out of the JSON for that reason and returned separately.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::coloring::{Color, Coloring};
use crate::dual::{dual_moment_estimate, DualStarts, InitialDensities, Rate};
use crate::error::{argument, Result, SbmError};
use crate::heat::Profile;
use crate::interface::{
    annihilate_by_parity, interface_cdf, second_moment_check, simulate_annihilating_system,
    simulate_coalescing_system, simulate_interface, TypedProfile,
};
use crate::lattice::{moment_estimate_with_stats, Increments, LatticeField, SimConfig};
use crate::rng::{derive_stream, KeyedNoise};
use crate::stats::{chi_square_two_sample, ks_critical_1pct, ks_statistic, z_score, Estimate};
use crate::walkers::simulate_lattice_walkers;

use rand::Rng;
use rayon::prelude::*;

/// Version of the JSON report layout.
pub const SCHEMA_VERSION: u32 = 1;

/// Default pass threshold on `|lhs - rhs| / sqrt(se_l^2 + se_r^2)`.
pub const DEFAULT_Z_THRESHOLD: f64 = 3.0;

/// Suites with more comparisons than this carry a multiple-testing note.
const MULTIPLE_TESTING_LIMIT: usize = 10;

/// Which identity an experiment checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    /// Lattice forward moments against the finite-rate dual.
    DualityFinite,
    /// Interface standard element against the non-collision dual at `rho = -1`.
    DualityInfinite,
    /// Simulated single interfaces against their closed-form law.
    InterfaceCdf,
    /// Parity construction against direct annihilation.
    Annihilation,
    /// Exponential moment of the total collision time in `Z^dim`.
    CorollaryIi,
    /// The dual side alone, where no forward simulation exists.
    DualEstimate,
}

/// Where the dual walkers live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpaceKind {
    #[default]
    Lattice,
    Continuum,
}

/// Initial data for lattice runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatticeInit {
    /// Constant `(1, 1)`.
    #[default]
    Flat,
    /// Type 1 on the left half of the torus, type 2 on the right half.
    Heaviside,
    /// The first typed profile of the config, read at integer sites.
    Profile,
}

fn default_threshold() -> f64 {
    DEFAULT_Z_THRESHOLD
}

/// Everything needed to reproduce an experiment. Fields not used by a kind are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_threshold")]
    pub z_threshold: f64,
    /// Number of dual particles (the moment order).
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub rho: Option<f64>,
    /// Branching rate; `None` or `inf` means infinite where allowed.
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub dim: Option<usize>,
    /// Observation time, or walk horizon for the collision-time experiment.
    #[serde(default)]
    pub t: Option<f64>,
    #[serde(default)]
    pub dt: Option<f64>,
    /// Torus size for lattice runs.
    #[serde(default)]
    pub sites: Option<usize>,
    #[serde(default)]
    pub replicas: Option<usize>,
    #[serde(default)]
    pub init: Option<LatticeInit>,
    /// Coloring of the observed moment, e.g. `"12"`.
    #[serde(default)]
    pub coloring: Option<String>,
    /// Lattice observation sites; defaults to consecutive sites ending at `sites / 2`.
    #[serde(default)]
    pub observe: Option<Vec<usize>>,
    /// Continuum observation points.
    #[serde(default)]
    pub points: Option<Vec<f64>>,
    /// Typed profiles (inline file text) for interface experiments.
    #[serde(default)]
    pub profiles: Option<Vec<String>>,
    /// Sample times for the annihilation experiment.
    #[serde(default)]
    pub times: Option<Vec<f64>>,
    #[serde(default)]
    pub increments: Option<Increments>,
    #[serde(default)]
    pub space: Option<SpaceKind>,
}

impl ExperimentConfig {
    pub fn new(kind: ExperimentKind) -> Self {
        ExperimentConfig {
            kind,
            seed: 0,
            z_threshold: DEFAULT_Z_THRESHOLD,
            n: None,
            rho: None,
            gamma: None,
            dim: None,
            t: None,
            dt: None,
            sites: None,
            replicas: None,
            init: None,
            coloring: None,
            observe: None,
            points: None,
            profiles: None,
            times: None,
            increments: None,
            space: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| SbmError::Parse(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| SbmError::Parse(format!("config: {e}")))
    }

    fn require<T: Copy>(&self, v: Option<T>, name: &str) -> Result<T> {
        v.ok_or_else(|| argument(format!("{:?} experiment needs '{name}'", self.kind)))
    }

    fn replicas(&self) -> Result<usize> {
        let r = self.require(self.replicas, "replicas")?;
        if r < 2 {
            return Err(argument("at least two replicas are required"));
        }
        Ok(r)
    }

    fn rate(&self) -> Rate {
        match self.gamma {
            Some(g) if g.is_finite() => Rate::Finite(g),
            _ => Rate::Infinite,
        }
    }
}

/// Two estimates of one quantity and their z-score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub name: String,
    pub lhs: Estimate,
    pub rhs: Estimate,
    pub z: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl ComparisonReport {
    pub fn new(name: impl Into<String>, lhs: Estimate, rhs: Estimate, threshold: f64) -> Self {
        let z = z_score(&lhs, &rhs);
        ComparisonReport { name: name.into(), lhs, rhs, z, threshold, pass: z <= threshold }
    }
}

/// Kolmogorov–Smirnov check of samples against a closed-form law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KsReport {
    pub name: String,
    pub samples: usize,
    pub statistic: f64,
    pub critical: f64,
    pub pass: bool,
}

/// Chi-square comparison of two count histograms at the 1% level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiSquareReport {
    pub name: String,
    pub first: Vec<u64>,
    pub second: Vec<u64>,
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub pass: bool,
}

/// An exact check, such as a counter that must be zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactReport {
    pub name: String,
    pub value: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl ExactReport {
    pub fn new(name: impl Into<String>, value: f64, expected: f64, tolerance: f64) -> Self {
        ExactReport {
            name: name.into(),
            value,
            expected,
            tolerance,
            pass: (value - expected).abs() <= tolerance,
        }
    }
}

/// A one-sided estimate; passes when it is finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub name: String,
    pub estimate: Estimate,
    pub pass: bool,
}

/// Growth of a Monte Carlo estimate with the horizon, in `log10`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub name: String,
    pub horizons: Vec<f64>,
    pub log10_estimates: Vec<f64>,
    pub log10_bound: f64,
    pub pass: bool,
}

/// One entry of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "kebab-case")]
pub enum Report {
    Comparison(ComparisonReport),
    Ks(KsReport),
    ChiSquare(ChiSquareReport),
    Exact(ExactReport),
    Estimate(EstimateReport),
    Divergence(DivergenceReport),
    Collision(Box<CollisionTimeReport>),
}

impl Report {
    pub fn pass(&self) -> bool {
        match self {
            Report::Comparison(r) => r.pass,
            Report::Ks(r) => r.pass,
            Report::ChiSquare(r) => r.pass,
            Report::Exact(r) => r.pass,
            Report::Estimate(r) => r.pass,
            Report::Divergence(r) => r.pass,
            Report::Collision(r) => r.pass,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Report::Comparison(r) => &r.name,
            Report::Ks(r) => &r.name,
            Report::ChiSquare(r) => &r.name,
            Report::Exact(r) => &r.name,
            Report::Estimate(r) => &r.name,
            Report::Divergence(r) => &r.name,
            Report::Collision(r) => &r.name,
        }
    }
}

/// Reports of one experiment together with the config that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub reports: Vec<Report>,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Suite {
    pub fn new(config: ExperimentConfig, reports: Vec<Report>) -> Self {
        let pass = reports.iter().all(Report::pass);
        let note = (reports.len() > MULTIPLE_TESTING_LIMIT).then(|| {
            format!(
                "{} comparisons at a per-check threshold; expect occasional single failures",
                reports.len()
            )
        });
        Suite { schema_version: SCHEMA_VERSION, config, reports, pass, note }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| SbmError::Parse(format!("json: {e}")))
    }
}

/// Run `config`, returning its suite and the wall-clock time taken.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(Suite, Duration)> {
    let start = Instant::now();
    let reports = match config.kind {
        ExperimentKind::DualityFinite => duality_finite(config)?,
        ExperimentKind::DualityInfinite => duality_infinite(config)?,
        ExperimentKind::InterfaceCdf => interface_law(config)?,
        ExperimentKind::Annihilation => annihilation(config)?,
        ExperimentKind::CorollaryIi => {
            vec![Report::Collision(Box::new(collision_time_experiment(config)?))]
        }
        ExperimentKind::DualEstimate => dual_only(config)?,
    };
    Ok((Suite::new(config.clone(), reports), start.elapsed()))
}

fn lattice_coloring(cfg: &ExperimentConfig, n: usize) -> Result<Coloring> {
    let coloring: Coloring = match &cfg.coloring {
        Some(s) => s.parse()?,
        None if n == 2 => "12".parse()?,
        None => Coloring::alternating(n)?,
    };
    if coloring.len() != n {
        return Err(argument(format!("coloring has length {} but n = {n}", coloring.len())));
    }
    Ok(coloring)
}

fn lattice_observation(cfg: &ExperimentConfig, n: usize, sites: usize) -> Result<Vec<usize>> {
    match &cfg.observe {
        Some(v) if v.len() != n => Err(argument(format!("{} observation sites but n = {n}", v.len()))),
        Some(v) => Ok(v.clone()),
        None => {
            let first = (sites / 2).checked_sub(n.saturating_sub(1)).ok_or_else(|| {
                argument(format!("torus of {sites} sites is too small for {n} observation sites"))
            })?;
            Ok((first..first + n).collect())
        }
    }
}

/// Initial lattice field for `init` and the same data as seen by the dual.
pub fn lattice_initial(
    init: LatticeInit,
    sites: usize,
    profile: Option<&TypedProfile>,
) -> Result<(LatticeField, InitialDensities)> {
    Ok(match init {
        LatticeInit::Flat => (
            LatticeField::flat(sites, 1.0, 1.0)?,
            InitialDensities::Constant { first: 1.0, second: 1.0 },
        ),
        LatticeInit::Heaviside => {
            (LatticeField::heaviside(sites)?, InitialDensities::complementary_torus(sites))
        }
        LatticeInit::Profile => {
            let u0 = profile.ok_or_else(|| argument("profile initial data needs a typed profile"))?;
            let (p1, p2) = (u0.density(Color::One)?, u0.density(Color::Two)?);
            let first: Vec<f64> = (0..sites).map(|x| p1.eval(x as f64)).collect();
            let second: Vec<f64> = (0..sites).map(|x| p2.eval(x as f64)).collect();
            (
                LatticeField::new(first.clone(), second.clone())?,
                InitialDensities::Periodic { first, second },
            )
        }
    })
}

fn config_profile(cfg: &ExperimentConfig) -> Result<Option<TypedProfile>> {
    cfg.profiles.as_ref().and_then(|p| p.first()).map(|s| s.parse()).transpose()
}

fn duality_finite(cfg: &ExperimentConfig) -> Result<Vec<Report>> {
    let n = cfg.n.unwrap_or(2);
    let rho = cfg.require(cfg.rho, "rho")?;
    let gamma = match cfg.rate() {
        Rate::Finite(g) => g,
        Rate::Infinite => return Err(argument("lattice duality needs a finite gamma")),
    };
    let t = cfg.require(cfg.t, "t")?;
    let sites = cfg.sites.unwrap_or(256);
    let replicas = cfg.replicas()?;
    let coloring = lattice_coloring(cfg, n)?;
    let observe = lattice_observation(cfg, n, sites)?;
    let profile = config_profile(cfg)?;
    let (field, u0) = lattice_initial(cfg.init.unwrap_or_default(), sites, profile.as_ref())?;
    let dt = cfg.dt.unwrap_or(1e-3);
    let sim = SimConfig {
        gamma,
        rho,
        dt,
        horizon: t,
        seed: cfg.seed,
        increments: cfg.increments.unwrap_or_default(),
    };
    let (forward, clamp_rate) =
        moment_estimate_with_stats(&field, &observe, coloring, t, &sim, replicas)?;
    let starts = DualStarts::Lattice {
        dim: 1,
        sites: observe.iter().map(|&x| [x as i64, 0, 0]).collect(),
    };
    let dual = dual_moment_estimate(
        &u0,
        &starts,
        coloring,
        rho,
        Rate::Finite(gamma),
        t,
        replicas,
        cfg.seed ^ DUAL_SEED_MIX,
    )?;
    Ok(vec![
        Report::Comparison(ComparisonReport::new(
            format!("lattice moment {coloring} forward vs dual"),
            forward,
            dual,
            cfg.z_threshold,
        )),
        Report::Exact(ExactReport {
            name: "clamp events per site-step below 1e-3".into(),
            value: clamp_rate,
            expected: 0.0,
            tolerance: 1e-3,
            pass: clamp_rate < 1e-3,
        }),
    ])
}

fn dual_only(cfg: &ExperimentConfig) -> Result<Vec<Report>> {
    let n = cfg.n.unwrap_or(2);
    let rho = cfg.require(cfg.rho, "rho")?;
    let t = cfg.require(cfg.t, "t")?;
    let replicas = cfg.replicas()?;
    let coloring = lattice_coloring(cfg, n)?;
    let rate = cfg.rate();
    let (u0, starts) = match cfg.space.unwrap_or_default() {
        SpaceKind::Lattice => {
            let sites = cfg.sites.unwrap_or(256);
            let profile = config_profile(cfg)?;
            let (_, u0) = lattice_initial(cfg.init.unwrap_or_default(), sites, profile.as_ref())?;
            let observe = lattice_observation(cfg, n, sites)?;
            let dim = cfg.dim.unwrap_or(1);
            (u0, DualStarts::Lattice { dim, sites: observe.iter().map(|&x| [x as i64, 0, 0]).collect() })
        }
        SpaceKind::Continuum => {
            let u0: TypedProfile = match config_profile(cfg)? {
                Some(p) => p,
                None => COMPLEMENTARY_HEAVISIDE.parse()?,
            };
            let points = match &cfg.points {
                Some(p) => p.clone(),
                None if n == 1 => vec![0.0],
                None => (0..n).map(|k| -0.5 + k as f64 / (n - 1) as f64).collect(),
            };
            let densities = InitialDensities::Profiles {
                first: u0.density(Color::One)?,
                second: u0.density(Color::Two)?,
            };
            (densities, DualStarts::Continuum { points, dt: cfg.dt.unwrap_or(1e-3) })
        }
    };
    let estimate = dual_moment_estimate(&u0, &starts, coloring, rho, rate, t, replicas, cfg.seed)?;
    let pass = estimate.mean.is_finite() && estimate.se.is_finite();
    Ok(vec![Report::Estimate(EstimateReport {
        name: format!("dual moment {coloring}, no forward model for this space and rate"),
        estimate,
        pass,
    })])
}

/// Mixed into the seed of the dual side so the two sides use unrelated streams.
const DUAL_SEED_MIX: u64 = 0xd1b5_4a32_d192_ed03;

fn typed_profiles(cfg: &ExperimentConfig, default: &str) -> Result<Vec<TypedProfile>> {
    match &cfg.profiles {
        Some(list) => list.iter().map(|s| s.parse()).collect(),
        None => Ok(vec![default.parse()?]),
    }
}

fn duality_infinite(cfg: &ExperimentConfig) -> Result<Vec<Report>> {
    let t = cfg.require(cfg.t, "t")?;
    let dt = cfg.dt.unwrap_or(1e-3);
    let replicas = cfg.replicas()?;
    if let Some(rho) = cfg.rho {
        if rho != -1.0 {
            return Err(argument("the interface description needs rho = -1"));
        }
    }
    let (x, y) = match cfg.points.as_deref() {
        Some([x, y]) => (*x, *y),
        None => (-0.5, 0.5),
        Some(_) => return Err(argument("need exactly two observation points")),
    };
    let mut reports = Vec::new();
    for (k, u0) in typed_profiles(cfg, COMPLEMENTARY_HEAVISIDE)?.iter().enumerate() {
        let r = second_moment_check(u0, t, x, y, replicas, dt, cfg.seed.wrapping_add(k as u64))?;
        let quad = Estimate::exact(r.quadrature);
        reports.push(Report::Comparison(ComparisonReport::new(
            format!("profile {k}: interface side vs quadrature"),
            r.lhs,
            quad,
            cfg.z_threshold,
        )));
        reports.push(Report::Comparison(ComparisonReport::new(
            format!("profile {k}: walker side vs quadrature"),
            r.rhs,
            quad,
            cfg.z_threshold,
        )));
        reports.push(Report::Comparison(ComparisonReport::new(
            format!("profile {k}: interface side vs walker side"),
            r.lhs,
            r.rhs,
            cfg.z_threshold,
        )));
    }
    Ok(reports)
}

/// Type 1 on `(-inf, 0)`, type 2 on `(0, inf)`, unit total mass.
pub const COMPLEMENTARY_HEAVISIDE: &str = "leftmost 1\ninterface 0\n1\n";

fn interface_law(cfg: &ExperimentConfig) -> Result<Vec<Report>> {
    let t = cfg.t.unwrap_or(1.0);
    let dt = cfg.dt.unwrap_or(1e-3);
    let replicas = cfg.replicas()?;
    let mut reports = Vec::new();
    for (k, u0) in typed_profiles(cfg, COMPLEMENTARY_HEAVISIDE)?.iter().enumerate() {
        let [start] = u0.interfaces[..] else {
            return Err(argument(format!("profile {k} must have exactly one interface")));
        };
        let samples = interface_samples(&u0.total, start, t, dt, replicas, cfg.seed.wrapping_add(k as u64))?;
        let statistic = ks_statistic(&samples, |x| interface_cdf(&u0.total, start, t, x).unwrap_or(f64::NAN));
        let critical = ks_critical_1pct(replicas);
        reports.push(Report::Ks(KsReport {
            name: format!("profile {k}: interface law at t = {t}"),
            samples: replicas,
            statistic,
            critical,
            pass: statistic <= critical,
        }));
        if u0.total.breakpoints().is_empty() {
            let moves: Vec<f64> = samples.iter().map(|x| x - start).collect();
            let var = Estimate::from_samples(&moves).sample_variance() / t;
            reports.push(Report::Exact(ExactReport::new(
                format!("profile {k}: displacement variance per unit time within 5% of 1"),
                var,
                1.0,
                0.05,
            )));
        }
    }
    Ok(reports)
}

/// Independent single-interface positions at time `t`.
pub fn interface_samples(w0: &Profile, start: f64, t: f64, dt: f64, replicas: usize, seed: u64) -> Result<Vec<f64>> {
    (0..replicas as u64)
        .into_par_iter()
        .map(|k| simulate_interface(w0, start, t, dt, &mut derive_stream(seed, k)))
        .collect()
}

/// Survivor-count histograms at each of `times` from `replicas` runs of the
/// parity construction (`parity = true`) or of direct annihilation, together
/// with the summed parity and multiple-removal counters.
pub fn survivor_histograms(
    starts: &[f64],
    w0: &Profile,
    times: &[f64],
    dt: f64,
    replicas: usize,
    seed: u64,
    parity: bool,
) -> Result<(Vec<Vec<u64>>, u64, u64)> {
    let horizon = times.iter().copied().fold(0.0, f64::max);
    let runs: Vec<Result<(Vec<usize>, u64, u64)>> = (0..replicas as u64)
        .into_par_iter()
        .map(|k| {
            let noise = KeyedNoise::new(derive_stream(seed, k).random());
            let run = if parity {
                annihilate_by_parity(&simulate_coalescing_system(starts, w0, horizon, dt, &noise)?)
            } else {
                simulate_annihilating_system(starts, w0, horizon, dt, &noise)?
            };
            let counts = times.iter().map(|&t| run.survivors(t)).collect();
            Ok((counts, run.parity_violations, run.multiple_removals))
        })
        .collect();
    let mut hist = vec![vec![0u64; starts.len() + 1]; times.len()];
    let (mut parity_bad, mut multiple) = (0, 0);
    for r in runs {
        let (counts, p, m) = r?;
        for (h, c) in hist.iter_mut().zip(counts) {
            h[c] += 1;
        }
        parity_bad += p;
        multiple += m;
    }
    Ok((hist, parity_bad, multiple))
}

fn annihilation(cfg: &ExperimentConfig) -> Result<Vec<Report>> {
    let dt = cfg.dt.unwrap_or(1e-3);
    let replicas = cfg.replicas()?;
    let times = cfg.times.clone().unwrap_or_else(|| vec![0.5, 2.0]);
    let mut reports = Vec::new();
    for (k, u0) in typed_profiles(cfg, FOUR_INTERFACES)?.iter().enumerate() {
        let seed = cfg.seed.wrapping_add(k as u64);
        let (a, pa, ma) = survivor_histograms(&u0.interfaces, &u0.total, &times, dt, replicas, seed, true)?;
        let (b, pb, mb) =
            survivor_histograms(&u0.interfaces, &u0.total, &times, dt, replicas, seed ^ DUAL_SEED_MIX, false)?;
        for ((t, ha), hb) in times.iter().zip(&a).zip(&b) {
            let c = chi_square_two_sample(ha, hb)?;
            reports.push(Report::ChiSquare(ChiSquareReport {
                name: format!("profile {k}: survivors at t = {t}, parity vs direct"),
                first: ha.clone(),
                second: hb.clone(),
                statistic: c.statistic,
                dof: c.dof,
                p_value: c.p_value,
                pass: c.p_value >= 0.01,
            }));
        }
        reports.push(Report::Exact(ExactReport::new(
            format!("profile {k}: parity violations"),
            (pa + pb) as f64,
            0.0,
            0.0,
        )));
        reports.push(Report::Exact(ExactReport::new(
            format!("profile {k}: annihilations removing other than two"),
            (ma + mb) as f64,
            0.0,
            0.0,
        )));
    }
    Ok(reports)
}

/// Four interfaces on unit mass.
pub const FOUR_INTERFACES: &str = "leftmost 1\ninterface -0.9\ninterface -0.3\ninterface 0.3\ninterface 0.9\n1\n";

/// Two walkers started together in `Z^dim`: return probability of their
/// difference and the exponential moment of the total time spent together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionTimeReport {
    pub name: String,
    pub dim: usize,
    pub horizon: f64,
    pub walks: usize,
    /// Fraction of walks that separate and meet again before the horizon.
    pub return_probability: Estimate,
    /// 95% interval for the return probability.
    pub return_interval: (f64, f64),
    /// `rho gamma / (2 (1 - p))`.
    pub ratio: f64,
    /// `E[exp(rho gamma L)]` by Monte Carlo, when the ratio is below one.
    pub empirical: Option<Estimate>,
    /// `(1 - ratio)^{-1}` with its delta-method standard error.
    pub formula: Option<Estimate>,
    pub z: Option<f64>,
    pub divergence: Option<DivergenceReport>,
    pub pass: bool,
}

/// Samples of `(returned, time together)` for `walks` pairs started at the origin.
pub fn collision_samples(dim: usize, horizon: f64, walks: usize, seed: u64) -> Result<Vec<(bool, f64)>> {
    let origin = [[0i64; 3]; 2];
    (0..walks as u64)
        .into_par_iter()
        .map(|k| {
            let p = simulate_lattice_walkers(dim, &origin, horizon, &mut derive_stream(seed, k))?;
            Ok((p.events().len() >= 2, p.pair_local_time(0, 1, horizon)))
        })
        .collect()
}

/// Largest `log10` estimate that still counts as bounded in the divergence check.
pub const DIVERGENCE_LOG10_BOUND: f64 = 6.0;

fn log10_mean_exp(theta: f64, values: impl Iterator<Item = f64>) -> f64 {
    let xs: Vec<f64> = values.map(|l| theta * l).collect();
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    (m + (s / xs.len() as f64).ln()) / std::f64::consts::LN_10
}

fn collision_time_experiment(cfg: &ExperimentConfig) -> Result<CollisionTimeReport> {
    let dim = cfg.dim.unwrap_or(3);
    let rho = cfg.require(cfg.rho, "rho")?;
    let gamma = match cfg.rate() {
        Rate::Finite(g) => g,
        Rate::Infinite => return Err(argument("collision-time moment needs a finite gamma")),
    };
    let horizon = cfg.t.unwrap_or(500.0);
    let walks = cfg.replicas()?;
    collision_time_report(dim, rho, gamma, horizon, walks, cfg.seed, cfg.z_threshold)
}

/// Compare `E[exp(rho gamma L)]` with `(1 - rho gamma / (2 (1 - p)))^{-1}`,
/// both from the same walks, or check divergence when the ratio is at least one.
pub fn collision_time_report(
    dim: usize,
    rho: f64,
    gamma: f64,
    horizon: f64,
    walks: usize,
    seed: u64,
    threshold: f64,
) -> Result<CollisionTimeReport> {
    if dim < 3 {
        return Err(SbmError::Domain(format!(
            "walks in Z^{dim} are recurrent, so the collision time is infinite; need dim = 3"
        )));
    }
    let samples = collision_samples(dim, horizon, walks, seed)?;
    let returned: Vec<f64> = samples.iter().map(|s| if s.0 { 1.0 } else { 0.0 }).collect();
    let p = Estimate::from_samples(&returned);
    let interval = (p.mean - 1.96 * p.se, p.mean + 1.96 * p.se);
    let theta = rho * gamma;
    let rate = 2.0 * (1.0 - p.mean);
    let ratio = theta / rate;
    let name = format!("collision time in Z^{dim}, rho = {rho}, gamma = {gamma}");
    if ratio < 1.0 {
        let values: Vec<f64> = samples.iter().map(|s| (theta * s.1).exp()).collect();
        let empirical = Estimate::from_samples(&values);
        let f = 1.0 / (1.0 - ratio);
        // d f / d p = -f^2 theta / (2 (1 - p)^2)
        let slope = f * f * theta / (2.0 * (1.0 - p.mean).powi(2));
        let formula = Estimate { mean: f, se: slope.abs() * p.se, samples: p.samples };
        let z = z_score(&empirical, &formula);
        Ok(CollisionTimeReport {
            name,
            dim,
            horizon,
            walks,
            return_probability: p,
            return_interval: interval,
            ratio,
            empirical: Some(empirical),
            formula: Some(formula),
            z: Some(z),
            divergence: None,
            pass: z <= threshold,
        })
    } else {
        let horizons: Vec<f64> = (0..4).map(|k| horizon / f64::powi(2.0, 3 - k)).collect();
        // Prefixes of one long run; each estimate is then nondecreasing in the horizon.
        let all = collision_samples_prefix(dim, &horizons, walks, seed)?;
        let logs: Vec<f64> = all.iter().map(|ls| log10_mean_exp(theta, ls.iter().copied())).collect();
        let monotone = logs.windows(2).all(|w| w[1] >= w[0]);
        let exceeded = logs.last().is_some_and(|l| *l > DIVERGENCE_LOG10_BOUND);
        let divergence = DivergenceReport {
            name: format!("{name}: estimate grows without bound"),
            horizons,
            log10_estimates: logs,
            log10_bound: DIVERGENCE_LOG10_BOUND,
            pass: monotone && exceeded,
        };
        Ok(CollisionTimeReport {
            name,
            dim,
            horizon,
            walks,
            return_probability: p,
            return_interval: interval,
            ratio,
            empirical: None,
            formula: None,
            z: None,
            pass: divergence.pass,
            divergence: Some(divergence),
        })
    }
}

/// Time together up to each of `horizons` (increasing), from one run per walk.
fn collision_samples_prefix(dim: usize, horizons: &[f64], walks: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let last = *horizons.last().ok_or_else(|| argument("no horizons"))?;
    let origin = [[0i64; 3]; 2];
    let per_walk: Vec<Result<Vec<f64>>> = (0..walks as u64)
        .into_par_iter()
        .map(|k| {
            let p = simulate_lattice_walkers(dim, &origin, last, &mut derive_stream(seed, k))?;
            Ok(horizons.iter().map(|&h| p.pair_local_time(0, 1, h)).collect())
        })
        .collect();
    let per_walk = per_walk.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((0..horizons.len()).map(|j| per_walk.iter().map(|w| w[j]).collect()).collect())
}
