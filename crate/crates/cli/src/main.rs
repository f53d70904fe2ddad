//! `sbm`: run duality checks, simulations and spectral reports from the shell.
//!
//! Every command prints one JSON document to stdout. With `--out DIR` the
//! document is also written to `DIR/report.json`, together with any CSV
//! traces. The exit status is 0 when every pass flag in the report is true,
//! 1 when some check fails, and 2 on invalid input.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use sbm_core::flow::{evolve_k, k_infinity, spectral_check};
use sbm_core::harness::{
    lattice_initial, run_experiment, ExperimentConfig, ExperimentKind, LatticeInit, SpaceKind, Suite,
    SCHEMA_VERSION,
};
use sbm_core::interface::{annihilate_by_parity, simulate_coalescing_system, TypedProfile};
use sbm_core::lattice::{rescale_comparison, simulate_with_stats, Increments, SimConfig};
use sbm_core::rng::{derive_stream, KeyedNoise};
use sbm_core::{ColorMeasure, Coloring, Result, SbmError, SetPartition};

use rand::Rng;

#[derive(Parser, Debug)]
#[command(name = "sbm", version, about = "Symbiotic branching: duals, lattice and interface simulation")]
struct Cli {
    /// Base seed; every replica stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Directory for report.json and CSV traces.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Eigenvalue structure of the one-block flow matrix.
    Spectrum {
        #[arg(long)]
        n: usize,
        #[arg(long, allow_hyphen_values = true)]
        rho: f64,
    },
    /// Table of `K_t` over a time list, with the limit `K_inf`.
    Kflow(KflowArgs),
    /// Compare forward moments with the dual.
    DualityCheck(DualityArgs),
    /// Simulate the lattice model; snapshot CSV plus a moment report.
    LatticeSim(LatticeArgs),
    /// Simulate annihilating interfaces from a typed profile.
    InterfaceSim(InterfaceArgs),
    /// Diffusive rescaling against an increased branching rate.
    Rescale(RescaleArgs),
    /// Exponential moment of the collision time of two walks.
    CorollaryIi(CollisionArgs),
    /// Run an experiment described by a TOML config file.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args, Debug)]
struct KflowArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, allow_hyphen_values = true)]
    rho: f64,
    /// Partition in 1-based block form, e.g. "{1,2}{3}"; defaults to one block.
    #[arg(long)]
    partition: Option<String>,
    /// Initial coloring for a point mass, e.g. "121"; defaults to alternating.
    #[arg(long)]
    coloring: Option<String>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 1.0, 2.0, 5.0, 10.0])]
    times: Vec<f64>,
}

/// Rate argument: a number or `inf`.
fn parse_gamma(s: &str) -> std::result::Result<f64, String> {
    match s.trim() {
        "inf" | "infinity" | "Inf" => Ok(f64::INFINITY),
        v => v.parse::<f64>().map_err(|e| e.to_string()).and_then(|g| {
            if g >= 0.0 {
                Ok(g)
            } else {
                Err(format!("gamma must be nonnegative, got {g}"))
            }
        }),
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Space {
    Lattice,
    Continuum,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Init {
    Flat,
    Heaviside,
    File,
}

#[derive(Args, Debug)]
struct DualityArgs {
    #[arg(long, default_value_t = 2)]
    n: usize,
    #[arg(long, allow_hyphen_values = true)]
    rho: f64,
    #[arg(long, value_parser = parse_gamma)]
    gamma: f64,
    #[arg(long, value_enum, default_value_t = Space::Lattice)]
    space: Space,
    #[arg(long, default_value_t = 1.0)]
    t: f64,
    #[arg(long, default_value_t = 2000)]
    replicas: usize,
    #[arg(long)]
    dt: Option<f64>,
    /// Torus size (lattice).
    #[arg(long = "L", alias = "sites", default_value_t = 256)]
    sites: usize,
    #[arg(long, value_enum, default_value_t = Init::Heaviside)]
    init: Init,
    /// Typed profile file for `--init file`, or for the continuum.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long)]
    coloring: Option<String>,
}

#[derive(Args, Debug)]
struct LatticeArgs {
    #[arg(long = "L", alias = "sites", default_value_t = 256)]
    sites: usize,
    #[arg(long)]
    gamma: f64,
    #[arg(long, allow_hyphen_values = true)]
    rho: f64,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long)]
    t: f64,
    #[arg(long, value_enum, default_value_t = Init::Heaviside)]
    init: Init,
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Replicas for the moment report; 1 writes only the snapshot.
    #[arg(long, default_value_t = 1)]
    replicas: usize,
    #[arg(long, value_enum, default_value_t = IncrementArg::MomentMatched)]
    increments: IncrementArg,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum IncrementArg {
    Gaussian,
    MomentMatched,
}

impl From<IncrementArg> for Increments {
    fn from(v: IncrementArg) -> Self {
        match v {
            IncrementArg::Gaussian => Increments::Gaussian,
            IncrementArg::MomentMatched => Increments::MomentMatched,
        }
    }
}

#[derive(Args, Debug)]
struct InterfaceArgs {
    /// Typed profile file: total mass, interfaces and leftmost type.
    #[arg(long)]
    init: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    t: f64,
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    #[arg(long, default_value_t = 1000)]
    replicas: usize,
}

#[derive(Args, Debug)]
struct RescaleArgs {
    #[arg(long = "L", alias = "sites", default_value_t = 128)]
    sites: usize,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, allow_hyphen_values = true, default_value_t = -1.0)]
    rho: f64,
    #[arg(long, default_value_t = 0.01)]
    dt: f64,
    #[arg(long, default_value_t = 1.0)]
    t: f64,
    #[arg(long, default_value_t = 0.05)]
    threshold: f64,
    #[arg(long, default_value_t = 200)]
    replicas: usize,
}

#[derive(Args, Debug)]
struct CollisionArgs {
    #[arg(long, default_value_t = 3)]
    dim: usize,
    #[arg(long, allow_hyphen_values = true)]
    rho: f64,
    #[arg(long)]
    gamma: f64,
    #[arg(long, default_value_t = 500.0)]
    horizon: f64,
    #[arg(long, default_value_t = 100_000)]
    walks: usize,
}

/// A command's output: JSON document, pass flag and CSV traces by file name.
struct Output {
    json: Value,
    pass: bool,
    csv: Vec<(&'static str, String)>,
}

fn envelope(command: &str, seed: u64, params: Value, result: impl Serialize, pass: bool) -> Result<Value> {
    Ok(json!({
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "seed": seed,
        "params": params,
        "result": serde_json::to_value(result).map_err(|e| SbmError::Parse(e.to_string()))?,
        "pass": pass,
    }))
}

fn suite_output(suite: Suite) -> Result<Output> {
    let pass = suite.pass;
    Ok(Output {
        json: serde_json::to_value(&suite).map_err(|e| SbmError::Parse(e.to_string()))?,
        pass,
        csv: Vec::new(),
    })
}

fn read_profile(path: &Path) -> Result<TypedProfile> {
    fs::read_to_string(path)
        .map_err(|e| SbmError::Argument(format!("cannot read {}: {e}", path.display())))?
        .parse()
}

fn read_profile_text(path: &Path) -> Result<String> {
    Ok(read_profile(path)?.to_string())
}

fn spectrum(n: usize, rho: f64, seed: u64) -> Result<Output> {
    let report = spectral_check(n, rho)?;
    let pass = report.consistent(1e-9);
    let json = envelope("spectrum", seed, json!({ "n": n, "rho": rho }), &report, pass)?;
    Ok(Output { json, pass, csv: Vec::new() })
}

fn kflow(a: &KflowArgs, seed: u64) -> Result<Output> {
    let pi: SetPartition = match &a.partition {
        Some(p) => p.parse()?,
        None => SetPartition::full(a.n)?,
    };
    if pi.n() != a.n {
        return Err(SbmError::Argument(format!("partition has {} elements but n = {}", pi.n(), a.n)));
    }
    let c: Coloring = match &a.coloring {
        Some(c) => c.parse()?,
        None => Coloring::alternating(a.n)?,
    };
    let k0 = ColorMeasure::delta(c);
    let limit = k_infinity(&k0, &pi, a.rho)?;
    let names: Vec<String> = Coloring::all(a.n)?.map(|c| c.to_string()).collect();
    let mut csv = format!("t,{}\n", names.join(","));
    let mut rows = Vec::new();
    for &t in &a.times {
        let kt = evolve_k(&k0, &pi, a.rho, t)?;
        let vals: Vec<String> = kt.values().iter().map(|v| format!("{:.12e}", v + 0.0)).collect();
        csv += &format!("{t},{}\n", vals.join(","));
        rows.push(json!({ "t": t, "values": kt.values(), "distance_to_limit": kt.sup_distance(&limit) }));
    }
    let vals: Vec<String> = limit.values().iter().map(|v| format!("{:.12e}", v + 0.0)).collect();
    csv += &format!("inf,{}\n", vals.join(","));
    let result = json!({ "colorings": names, "rows": rows, "limit": limit.values() });
    let params = json!({ "n": a.n, "rho": a.rho, "partition": pi.to_string(), "coloring": c.to_string() });
    Ok(Output { json: envelope("kflow", seed, params, result, true)?, pass: true, csv: vec![("kflow.csv", csv)] })
}

fn duality_check(a: &DualityArgs, seed: u64) -> Result<Output> {
    let space = match a.space {
        Space::Lattice => SpaceKind::Lattice,
        Space::Continuum => SpaceKind::Continuum,
    };
    let infinite = a.gamma.is_infinite();
    let kind = match (space, infinite) {
        (SpaceKind::Lattice, false) => ExperimentKind::DualityFinite,
        (SpaceKind::Continuum, true) if a.rho == -1.0 && a.n == 2 => ExperimentKind::DualityInfinite,
        _ => ExperimentKind::DualEstimate,
    };
    let mut c = ExperimentConfig::new(kind);
    c.seed = seed;
    c.n = Some(a.n);
    c.rho = Some(a.rho);
    c.gamma = (!infinite).then_some(a.gamma);
    c.t = Some(a.t);
    c.dt = a.dt;
    c.replicas = Some(a.replicas);
    c.space = Some(space);
    c.coloring = a.coloring.clone();
    if space == SpaceKind::Lattice {
        c.sites = Some(a.sites);
        c.init = Some(match a.init {
            Init::Flat => LatticeInit::Flat,
            Init::Heaviside => LatticeInit::Heaviside,
            Init::File => LatticeInit::Profile,
        });
    }
    if let Some(p) = &a.profile {
        c.profiles = Some(vec![read_profile_text(p)?]);
    } else if a.init == Init::File {
        return Err(SbmError::Argument("--init file needs --profile PATH".into()));
    }
    suite_output(run_experiment(&c)?.0)
}

fn lattice_sim(a: &LatticeArgs, seed: u64) -> Result<Output> {
    let profile = match (&a.profile, a.init) {
        (Some(p), _) => Some(read_profile(p)?),
        (None, Init::File) => return Err(SbmError::Argument("--init file needs --profile PATH".into())),
        _ => None,
    };
    let init = match a.init {
        Init::Flat => LatticeInit::Flat,
        Init::Heaviside => LatticeInit::Heaviside,
        Init::File => LatticeInit::Profile,
    };
    let (field, _) = lattice_initial(init, a.sites, profile.as_ref())?;
    let cfg = SimConfig {
        gamma: a.gamma,
        rho: a.rho,
        dt: a.dt,
        horizon: a.t,
        seed,
        increments: a.increments.into(),
    };
    let (snaps, stepper) = simulate_with_stats(&field, &cfg, &[a.t], &mut derive_stream(seed, 0))?;
    let snapshot = snaps.last().expect("one sample time");
    let csv = vec![("snapshot.csv", snapshot.to_csv())];
    let summary = json!({
        "total_mass": [snapshot.u1.iter().sum::<f64>(), snapshot.u2.iter().sum::<f64>()],
        "clamp_rate": stepper.clamp_rate(),
    });
    let params = json!({ "L": a.sites, "gamma": a.gamma, "rho": a.rho, "dt": a.dt, "t": a.t, "init": format!("{init:?}").to_lowercase() });
    if a.replicas < 2 {
        return Ok(Output { json: envelope("lattice-sim", seed, params, summary, true)?, pass: true, csv });
    }
    let mut c = ExperimentConfig::new(ExperimentKind::DualityFinite);
    c.seed = seed;
    c.rho = Some(a.rho);
    c.gamma = Some(a.gamma);
    c.t = Some(a.t);
    c.dt = Some(a.dt);
    c.sites = Some(a.sites);
    c.replicas = Some(a.replicas);
    c.init = Some(init);
    c.increments = Some(a.increments.into());
    c.profiles = profile.map(|p| vec![p.to_string()]);
    let suite = run_experiment(&c)?.0;
    let pass = suite.pass;
    let mut json = serde_json::to_value(&suite).map_err(|e| SbmError::Parse(e.to_string()))?;
    json["snapshot"] = summary;
    Ok(Output { json, pass, csv })
}

fn interface_sim(a: &InterfaceArgs, seed: u64) -> Result<Output> {
    let u0 = read_profile(&a.init)?;
    let noise = KeyedNoise::new(derive_stream(seed, 0).random());
    let run = annihilate_by_parity(&simulate_coalescing_system(&u0.interfaces, &u0.total, a.t, a.dt, &noise)?);
    let csv = vec![("paths.csv", run.to_csv())];
    let kind = if u0.interfaces.len() == 1 { ExperimentKind::InterfaceCdf } else { ExperimentKind::Annihilation };
    let mut c = ExperimentConfig::new(kind);
    c.seed = seed;
    c.t = Some(a.t);
    c.dt = Some(a.dt);
    c.replicas = Some(a.replicas);
    c.profiles = Some(vec![u0.to_string()]);
    if kind == ExperimentKind::Annihilation {
        c.times = Some(vec![a.t / 4.0, a.t]);
    }
    let mut out = suite_output(run_experiment(&c)?.0)?;
    out.csv = csv;
    Ok(out)
}

fn rescale(a: &RescaleArgs, seed: u64) -> Result<Output> {
    let r = rescale_comparison(a.sites, a.k, a.gamma, a.rho, a.dt, a.t, a.threshold, a.replicas, seed)?;
    let pass = r.ks_statistic <= r.ks_critical;
    let params = json!({
        "L": a.sites, "k": a.k, "gamma": a.gamma, "rho": a.rho, "dt": a.dt,
        "t": a.t, "threshold": a.threshold, "replicas": a.replicas,
    });
    Ok(Output { json: envelope("rescale", seed, params, &r, pass)?, pass, csv: Vec::new() })
}

fn collision(a: &CollisionArgs, seed: u64) -> Result<Output> {
    let mut c = ExperimentConfig::new(ExperimentKind::CorollaryIi);
    c.seed = seed;
    c.dim = Some(a.dim);
    c.rho = Some(a.rho);
    c.gamma = Some(a.gamma);
    c.t = Some(a.horizon);
    c.replicas = Some(a.walks);
    suite_output(run_experiment(&c)?.0)
}

fn run_config(path: &Path, seed: Option<u64>) -> Result<Output> {
    let text = fs::read_to_string(path)
        .map_err(|e| SbmError::Argument(format!("cannot read {}: {e}", path.display())))?;
    let mut c = ExperimentConfig::from_toml(&text)?;
    if let Some(s) = seed {
        c.seed = s;
    }
    suite_output(run_experiment(&c)?.0)
}

fn dispatch(cli: &Cli) -> Result<Output> {
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Spectrum { n, rho } => spectrum(*n, *rho, seed),
        Command::Kflow(a) => kflow(a, seed),
        Command::DualityCheck(a) => duality_check(a, seed),
        Command::LatticeSim(a) => lattice_sim(a, seed),
        Command::InterfaceSim(a) => interface_sim(a, seed),
        Command::Rescale(a) => rescale(a, seed),
        Command::CorollaryIi(a) => collision(a, seed),
        Command::Run { config } => run_config(config, cli.seed),
    }
}

fn write_outputs(dir: &Path, out: &Output, text: &str) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), text)?;
    for (name, body) in &out.csv {
        fs::write(dir.join(name), body)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let out = match dispatch(&cli) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let text = serde_json::to_string_pretty(&out.json).expect("JSON values serialize");
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = writeln!(stdout, "{text}") {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("error: cannot write the report: {e}");
            return ExitCode::from(2);
        }
    }
    if let Some(dir) = &cli.out {
        if let Err(e) = write_outputs(dir, &out, &text) {
            eprintln!("error: cannot write to {}: {e}", dir.display());
            return ExitCode::from(2);
        }
    }
    if out.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
