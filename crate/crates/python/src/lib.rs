//! Python bindings for `sbm-core`.
//!
//! Measures travel as plain lists indexed by coloring (lexicographic, with
//! `1 < 2`), partitions and colorings as their string forms (`"{1,2}{3}"`,
//! `"121"`), and structured reports as JSON strings.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sbm_core::dual::{dual_moment_estimate, DualStarts, InitialDensities, Rate};
use sbm_core::flow;
use sbm_core::harness::{self, ExperimentConfig};
use sbm_core::heat::{self, Profile};
use sbm_core::interface::{self, TypedProfile};
use sbm_core::lattice::{self, Increments, SimConfig};
use sbm_core::rng::derive_stream;
use sbm_core::stats::Estimate;
use sbm_core::{Color, ColorMeasure, Coloring, SbmError, SetPartition};

fn py_err(e: SbmError) -> PyErr {
    match e {
        SbmError::Simulation(_) | SbmError::Accuracy(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for sbm_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

fn pair(e: Estimate) -> (f64, f64) {
    (e.mean, e.se)
}

fn measure(values: Vec<f64>) -> PyResult<ColorMeasure> {
    let n = values.len().trailing_zeros() as usize;
    if values.len() != 1 << n {
        return Err(PyValueError::new_err(format!("measure length {} is not a power of two", values.len())));
    }
    ColorMeasure::new(n, values).py()
}

fn partition(s: Option<&str>, n: usize) -> PyResult<SetPartition> {
    match s {
        Some(s) => s.parse().py(),
        None => SetPartition::full(n).py(),
    }
}

fn rate(gamma: f64) -> Rate {
    if gamma.is_finite() {
        Rate::Finite(gamma)
    } else {
        Rate::Infinite
    }
}

/// Spectral summary of the one-block flow matrix, as JSON.
#[pyfunction]
fn spectral_check(n: usize, rho: f64) -> PyResult<String> {
    to_json(&flow::spectral_check(n, rho).py()?)
}

/// `p(rho) = pi / arccos(-rho)`.
#[pyfunction]
fn critical_curve(rho: f64) -> PyResult<f64> {
    flow::critical_curve(rho).py()
}

/// All colorings of length `n` in measure order.
#[pyfunction]
fn colorings(n: usize) -> PyResult<Vec<String>> {
    Ok(Coloring::all(n).py()?.map(|c| c.to_string()).collect())
}

/// Point mass at a coloring, as a measure list.
#[pyfunction]
fn delta(coloring: &str) -> PyResult<Vec<f64>> {
    let c: Coloring = coloring.parse().py()?;
    Ok(ColorMeasure::delta(c).into_values())
}

/// `K_t` from `k0` under the flow of `partition` (one block if omitted).
#[pyfunction]
#[pyo3(signature = (k0, rho, t, partition=None))]
fn evolve_k(k0: Vec<f64>, rho: f64, t: f64, partition: Option<&str>) -> PyResult<Vec<f64>> {
    let k0 = measure(k0)?;
    let pi = self::partition(partition, k0.n())?;
    Ok(flow::evolve_k(&k0, &pi, rho, t).py()?.into_values())
}

/// Closed-form limit `K_inf`.
#[pyfunction]
#[pyo3(signature = (k0, rho, partition=None))]
fn k_infinity(k0: Vec<f64>, rho: f64, partition: Option<&str>) -> PyResult<Vec<f64>> {
    let k0 = measure(k0)?;
    let pi = self::partition(partition, k0.n())?;
    Ok(flow::k_infinity(&k0, &pi, rho).py()?.into_values())
}

/// The two harmonic vectors `(v1, v2)` killed by every flow matrix.
#[pyfunction]
fn boundary_eigenvectors(n: usize, rho: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let e = flow::boundary_eigenvectors(n, rho).py()?;
    Ok((e.v1, e.v2))
}

/// Piecewise-constant profile on the line.
#[pyclass(name = "Profile", from_py_object)]
#[derive(Clone)]
struct PyProfile {
    inner: Profile,
}

#[pymethods]
impl PyProfile {
    /// Breakpoints and the values on each of the `len(breakpoints) + 1` pieces.
    #[new]
    fn new(breakpoints: Vec<f64>, values: Vec<f64>) -> PyResult<Self> {
        Ok(PyProfile { inner: Profile::new(breakpoints, values).py()? })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PyProfile { inner: text.parse().py()? })
    }

    fn __call__(&self, x: f64) -> f64 {
        self.inner.eval(x)
    }

    /// `(P_t w)(x)` for the standard heat semigroup.
    fn semigroup(&self, t: f64, x: f64) -> f64 {
        heat::semigroup_apply(&self.inner, t, x)
    }

    /// Law of a single interface started at `start`, at `x`.
    fn interface_cdf(&self, start: f64, t: f64, x: f64) -> PyResult<f64> {
        interface::interface_cdf(&self.inner, start, t, x).py()
    }

    /// Independent interface positions at time `t`.
    #[pyo3(signature = (start, t, replicas, dt=1e-3, seed=0))]
    fn sample_interfaces(&self, start: f64, t: f64, replicas: usize, dt: f64, seed: u64) -> PyResult<Vec<f64>> {
        harness::interface_samples(&self.inner, start, t, dt, replicas, seed).py()
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Profile({:?}, {:?})", self.inner.breakpoints(), self.inner.values())
    }
}

/// Two densities on a torus.
#[pyclass(name = "LatticeField", from_py_object)]
#[derive(Clone)]
struct PyLatticeField {
    inner: lattice::LatticeField,
}

#[pymethods]
impl PyLatticeField {
    #[new]
    fn new(u1: Vec<f64>, u2: Vec<f64>) -> PyResult<Self> {
        Ok(PyLatticeField { inner: lattice::LatticeField::new(u1, u2).py()? })
    }

    #[staticmethod]
    #[pyo3(signature = (sites, first=1.0, second=1.0))]
    fn flat(sites: usize, first: f64, second: f64) -> PyResult<Self> {
        Ok(PyLatticeField { inner: lattice::LatticeField::flat(sites, first, second).py()? })
    }

    /// Type 1 on the left half, type 2 on the right half.
    #[staticmethod]
    fn heaviside(sites: usize) -> PyResult<Self> {
        Ok(PyLatticeField { inner: lattice::LatticeField::heaviside(sites).py()? })
    }

    #[getter]
    fn u1(&self) -> Vec<f64> {
        self.inner.u1.clone()
    }

    #[getter]
    fn u2(&self) -> Vec<f64> {
        self.inner.u2.clone()
    }

    #[getter]
    fn time(&self) -> f64 {
        self.inner.time
    }

    fn total(&self) -> Vec<f64> {
        self.inner.total()
    }

    fn __len__(&self) -> usize {
        self.inner.sites()
    }

    /// One replica run to each of `times`; returns the snapshots.
    #[pyo3(signature = (gamma, rho, dt, times, seed=0, gaussian=false))]
    fn simulate(&self, gamma: f64, rho: f64, dt: f64, times: Vec<f64>, seed: u64, gaussian: bool) -> PyResult<Vec<Self>> {
        let horizon = times.iter().copied().fold(0.0, f64::max);
        let cfg = sim_config(gamma, rho, dt, horizon, seed, gaussian);
        let snaps = lattice::simulate(&self.inner, &cfg, &times, &mut derive_stream(seed, 0)).py()?;
        Ok(snaps.into_iter().map(|inner| PyLatticeField { inner }).collect())
    }

    /// `E[prod u^{c_i}_t(x_i)]` by Monte Carlo: `(mean, se)`.
    #[pyo3(signature = (sites, coloring, t, gamma, rho, dt, replicas, seed=0, gaussian=false))]
    #[allow(clippy::too_many_arguments)]
    fn moment(
        &self,
        sites: Vec<usize>,
        coloring: &str,
        t: f64,
        gamma: f64,
        rho: f64,
        dt: f64,
        replicas: usize,
        seed: u64,
        gaussian: bool,
    ) -> PyResult<(f64, f64)> {
        let cfg = sim_config(gamma, rho, dt, t, seed, gaussian);
        let c: Coloring = coloring.parse().py()?;
        Ok(pair(lattice::moment_estimate(&self.inner, &sites, c, t, &cfg, replicas).py()?))
    }

    /// The same moment from the dual walkers: `(mean, se)`.
    #[pyo3(signature = (sites, coloring, t, gamma, rho, replicas, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn dual_moment(
        &self,
        sites: Vec<i64>,
        coloring: &str,
        t: f64,
        gamma: f64,
        rho: f64,
        replicas: usize,
        seed: u64,
    ) -> PyResult<(f64, f64)> {
        let u0 = InitialDensities::Periodic { first: self.inner.u1.clone(), second: self.inner.u2.clone() };
        let starts = DualStarts::Lattice { dim: 1, sites: sites.iter().map(|&x| [x, 0, 0]).collect() };
        let c: Coloring = coloring.parse().py()?;
        Ok(pair(dual_moment_estimate(&u0, &starts, c, rho, rate(gamma), t, replicas, seed).py()?))
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }
}

fn sim_config(gamma: f64, rho: f64, dt: f64, horizon: f64, seed: u64, gaussian: bool) -> SimConfig {
    SimConfig {
        gamma,
        rho,
        dt,
        horizon,
        seed,
        increments: if gaussian { Increments::Gaussian } else { Increments::MomentMatched },
    }
}

/// Both sides of the two-point identity at `rho = -1`, infinite rate, as JSON.
#[pyfunction]
#[pyo3(signature = (profile, t, x, y, replicas, dt=1e-3, seed=0))]
fn second_moment_check(profile: &str, t: f64, x: f64, y: f64, replicas: usize, dt: f64, seed: u64) -> PyResult<String> {
    let u0: TypedProfile = profile.parse().py()?;
    to_json(&interface::second_moment_check(&u0, t, x, y, replicas, dt, seed).py()?)
}

/// Survivor counts of annihilating interfaces: a list of `(label, position)`
/// per time in `times`, from the parity construction.
#[pyfunction]
#[pyo3(signature = (profile, times, dt=1e-3, seed=0))]
fn annihilating_system(profile: &str, times: Vec<f64>, dt: f64, seed: u64) -> PyResult<Vec<Vec<(usize, f64)>>> {
    let u0: TypedProfile = profile.parse().py()?;
    let horizon = times.iter().copied().fold(0.0, f64::max);
    let noise = sbm_core::rng::KeyedNoise::new(seed);
    let run = interface::annihilate_by_parity(
        &interface::simulate_coalescing_system(&u0.interfaces, &u0.total, horizon, dt, &noise).py()?,
    );
    Ok(times.iter().map(|&t| run.living_at(t)).collect())
}

/// Densities of one type of a typed profile, as a `Profile`.
#[pyfunction]
fn typed_density(profile: &str, color: u8) -> PyResult<PyProfile> {
    let u0: TypedProfile = profile.parse().py()?;
    let c = Color::from_u8(color).py()?;
    Ok(PyProfile { inner: u0.density(c).py()? })
}

/// Run an experiment from TOML config text; returns the suite as JSON.
#[pyfunction]
fn run_experiment(config: &str) -> PyResult<String> {
    let cfg = ExperimentConfig::from_toml(config).py()?;
    harness::run_experiment(&cfg).py()?.0.to_json().py()
}

/// Collision-time moment check in `Z^dim`, as JSON.
#[pyfunction]
#[pyo3(signature = (rho, gamma, dim=3, horizon=500.0, walks=100_000, seed=0))]
fn collision_time(rho: f64, gamma: f64, dim: usize, horizon: f64, walks: usize, seed: u64) -> PyResult<String> {
    to_json(&harness::collision_time_report(dim, rho, gamma, horizon, walks, seed, harness::DEFAULT_Z_THRESHOLD).py()?)
}

#[pymodule]
fn sbm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyProfile>()?;
    m.add_class::<PyLatticeField>()?;
    m.add_function(wrap_pyfunction!(spectral_check, m)?)?;
    m.add_function(wrap_pyfunction!(critical_curve, m)?)?;
    m.add_function(wrap_pyfunction!(colorings, m)?)?;
    m.add_function(wrap_pyfunction!(delta, m)?)?;
    m.add_function(wrap_pyfunction!(evolve_k, m)?)?;
    m.add_function(wrap_pyfunction!(k_infinity, m)?)?;
    m.add_function(wrap_pyfunction!(boundary_eigenvectors, m)?)?;
    m.add_function(wrap_pyfunction!(second_moment_check, m)?)?;
    m.add_function(wrap_pyfunction!(annihilating_system, m)?)?;
    m.add_function(wrap_pyfunction!(typed_density, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(collision_time, m)?)?;
    Ok(())
}
