//! Linear flow of color measures under a fixed partition.
//!
//! For a partition `pi` of `n` particles and a correlation `rho`, the flow
//! matrix acts on measures over `{1,2}^n`. Each within-block discordant pair
//! contributes `rho` on the diagonal and moves mass `1/2` to each of the two
//! colorings obtained by flipping one member of the pair. `K_t = exp(tA) K_0`
//! is the resulting flow, and `K_inf` its limit in closed form.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coloring::{check_size, Color, ColorMeasure, Coloring, SetPartition};
use crate::error::{argument, criticality, Result, SbmError};

/// Magnitude, relative to `max(1, |K_0|_inf)`, below which negative output of
/// the matrix exponential is treated as rounding and set to zero. For long
/// flows the allowance grows with the norm of `t A`, since that is the scale
/// of the rounding error in the exponential.
pub const NEGATIVITY_TOLERANCE: f64 = 1e-12;

pub(crate) fn rounding_tolerance(scale: f64, generator_norm: f64) -> f64 {
    NEGATIVITY_TOLERANCE.max(64.0 * f64::EPSILON * generator_norm) * scale.max(1.0)
}

pub(crate) fn check_rho(rho: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(argument(format!("rho must lie in [-1, 1], got {rho}")));
    }
    Ok(())
}

/// Whether `rho + cos(pi/n) < 0`, the condition under which `K_inf` exists.
pub fn below_critical(n: usize, rho: f64) -> bool {
    rho + (PI / n as f64).cos() < 0.0
}

pub(crate) fn check_critical(n: usize, rho: f64) -> Result<()> {
    check_rho(rho)?;
    if rho > 0.0 || !below_critical(n, rho) {
        return Err(criticality(n, rho));
    }
    Ok(())
}

/// `arccos(|rho|)`.
pub fn lambda_rho(rho: f64) -> f64 {
    rho.abs().acos()
}

/// The one-block harmonic weight `sin(lambda k)/sin(lambda l)`, or `k/l` at `rho = -1`.
pub fn harmonic_weight(k: usize, l: usize, rho: f64) -> f64 {
    if k == 0 {
        return 0.0;
    }
    if k == l {
        return 1.0;
    }
    if rho == -1.0 {
        k as f64 / l as f64
    } else {
        let lam = lambda_rho(rho);
        (lam * k as f64).sin() / (lam * l as f64).sin()
    }
}

/// Dense flow matrix for one partition.
#[derive(Debug, Clone)]
pub struct FlowMatrix {
    rho: f64,
    partition: SetPartition,
    entries: DMatrix<f64>,
}

impl FlowMatrix {
    pub fn n(&self) -> usize {
        self.partition.n()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn partition(&self) -> &SetPartition {
        &self.partition
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    /// `exp(t A)`.
    pub fn propagator(&self, t: f64) -> DMatrix<f64> {
        if t == 0.0 || self.partition.is_singletons() {
            let d = self.entries.nrows();
            return DMatrix::identity(d, d);
        }
        (&self.entries * t).exp()
    }

    /// `exp(t A) K_0`, with rounding-level negativity removed.
    pub fn evolve(&self, k0: &ColorMeasure, t: f64) -> Result<ColorMeasure> {
        if k0.n() != self.n() {
            return Err(argument(format!(
                "measure has n = {} but the flow matrix has n = {}",
                k0.n(),
                self.n()
            )));
        }
        if !(t >= 0.0) || !t.is_finite() {
            return Err(argument(format!("time must be finite and >= 0, got {t}")));
        }
        if t == 0.0 || self.partition.is_singletons() {
            return Ok(k0.clone());
        }
        let v = DVector::from_column_slice(k0.values());
        let out = self.propagator(t) * v;
        let tol = rounding_tolerance(k0.sup_norm(), self.entries.norm() * t);
        clamp_measure(self.n(), out.as_slice(), tol)
    }
}

fn clamp_measure(n: usize, raw: &[f64], tol: f64) -> Result<ColorMeasure> {
    let mut values = Vec::with_capacity(raw.len());
    for (k, &v) in raw.iter().enumerate() {
        if !v.is_finite() {
            return Err(SbmError::Accuracy(format!(
                "non-finite flow output at index {k}"
            )));
        }
        if v < 0.0 {
            if v < -tol {
                return Err(SbmError::Accuracy(format!(
                    "flow output {v:e} at coloring index {k} is negative beyond the rounding tolerance {tol:e}"
                )));
            }
            values.push(0.0);
        } else {
            values.push(v);
        }
    }
    Ok(ColorMeasure::from_raw(n, values))
}

/// Flow matrix of the one-block partition on `ell` particles.
pub fn build_block_matrix(ell: usize, rho: f64) -> Result<FlowMatrix> {
    check_size(ell)?;
    build_partition_matrix(&SetPartition::full(ell)?, rho)
}

/// Flow matrix of an arbitrary partition, built entry by entry.
pub fn build_partition_matrix(pi: &SetPartition, rho: f64) -> Result<FlowMatrix> {
    check_rho(rho)?;
    let n = pi.n();
    check_size(n)?;
    let dim = 1usize << n;
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    for m in Coloring::all(n)? {
        let row = m.lex_index();
        let mut discordant = 0usize;
        for block in pi.blocks() {
            let twos = block.iter().filter(|&&i| m.get(i) == Color::Two).count();
            let ones = block.len() - twos;
            discordant += ones * twos;
            for &i in block {
                let d_i = if m.get(i) == Color::Two { ones } else { twos };
                if d_i > 0 {
                    a[(row, m.flipped(i).lex_index())] += 0.5 * d_i as f64;
                }
            }
        }
        a[(row, row)] = rho * discordant as f64;
    }
    Ok(FlowMatrix {
        rho,
        partition: pi.clone(),
        entries: a,
    })
}

/// `A (+) B = A (x) I + I (x) B`.
pub fn kronecker_sum(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let ia = DMatrix::<f64>::identity(a.nrows(), a.nrows());
    let ib = DMatrix::<f64>::identity(b.nrows(), b.nrows());
    a.kronecker(&ib) + ia.kronecker(b)
}

/// `K_t` for the partition `pi`.
pub fn evolve_k(k0: &ColorMeasure, pi: &SetPartition, rho: f64, t: f64) -> Result<ColorMeasure> {
    if k0.n() != pi.n() {
        return Err(argument(format!(
            "measure has n = {} but the partition has n = {}",
            k0.n(),
            pi.n()
        )));
    }
    build_partition_matrix(pi, rho)?.evolve(k0, t)
}

/// Per-block weights `[w(#_1 m|block), w(#_2 m|block)]` for every coloring.
fn block_weights(pi: &SetPartition, rho: f64) -> Vec<Vec<[f64; 2]>> {
    let n = pi.n();
    (0..1usize << n)
        .map(|k| {
            let m = Coloring::from_index(n, k).expect("index in range");
            pi.blocks()
                .iter()
                .map(|b| {
                    let twos = b.iter().filter(|&&i| m.get(i) == Color::Two).count();
                    let ones = b.len() - twos;
                    [
                        harmonic_weight(ones, b.len(), rho),
                        harmonic_weight(twos, b.len(), rho),
                    ]
                })
                .collect()
        })
        .collect()
}

/// The limit `K_inf(K_0, pi)` in closed form.
pub fn k_infinity(k0: &ColorMeasure, pi: &SetPartition, rho: f64) -> Result<ColorMeasure> {
    let n = pi.n();
    if k0.n() != n {
        return Err(argument(format!(
            "measure has n = {} but the partition has n = {}",
            k0.n(),
            n
        )));
    }
    check_critical(n, rho)?;
    if pi.is_singletons() {
        return Ok(k0.clone());
    }
    let nb = pi.num_blocks();
    // Only block-constant colorings carry mass into the limit.
    let sources: Vec<(usize, f64)> = (0..1usize << nb)
        .filter_map(|c| {
            let mass = k0.values()[pi.lift_unchecked(c).lex_index()];
            (mass != 0.0).then_some((c, mass))
        })
        .collect();
    let weights = block_weights(pi, rho);
    let values = weights
        .iter()
        .map(|w| {
            sources
                .iter()
                .map(|&(c, mass)| {
                    let mut prod = mass;
                    for (b, wb) in w.iter().enumerate() {
                        prod *= wb[c >> (nb - 1 - b) & 1];
                        if prod == 0.0 {
                            break;
                        }
                    }
                    prod
                })
                .sum()
        })
        .collect();
    Ok(ColorMeasure::from_raw(n, values))
}

/// The two harmonic vectors that every flow matrix annihilates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryEigenbasis {
    pub n: usize,
    pub rho: f64,
    pub lambda_rho: f64,
    /// Equal to 1 on the all-ones coloring and 0 on the all-twos coloring.
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
}

impl BoundaryEigenbasis {
    /// `a1 v1 + a2 v2`.
    pub fn envelope(&self, a1: f64, a2: f64) -> Vec<f64> {
        self.v1
            .iter()
            .zip(&self.v2)
            .map(|(x, y)| a1 * x + a2 * y)
            .collect()
    }

    pub fn v1_measure(&self) -> ColorMeasure {
        ColorMeasure::from_raw(self.n, self.v1.clone())
    }

    pub fn v2_measure(&self) -> ColorMeasure {
        ColorMeasure::from_raw(self.n, self.v2.clone())
    }
}

pub fn boundary_eigenvectors(n: usize, rho: f64) -> Result<BoundaryEigenbasis> {
    check_size(n)?;
    check_critical(n, rho)?;
    let (v1, v2) = Coloring::all(n)?
        .map(|m| {
            (
                harmonic_weight(m.count_color(Color::One), n, rho),
                harmonic_weight(m.count_color(Color::Two), n, rho),
            )
        })
        .unzip();
    Ok(BoundaryEigenbasis {
        n,
        rho,
        lambda_rho: lambda_rho(rho),
        v1,
        v2,
    })
}

/// Eigenvalue summary of the one-block flow matrix and its reduction to
/// exchangeable vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub n: usize,
    pub rho: f64,
    /// Dimension of the kernel of the full matrix.
    pub zero_multiplicity: usize,
    /// Eigenvalues of `diag(k(n-k)) B` on `k = 1..n-1`, ascending.
    pub reduced_eigenvalues: Vec<f64>,
    /// Eigenvalues of the tridiagonal `B` computed numerically, ascending.
    pub tridiagonal_eigenvalues: Vec<f64>,
    /// `rho + cos(j pi / n)` for `j = 1..n-1`, ascending.
    pub tridiagonal_formula: Vec<f64>,
    /// Largest deviation between the two lists above.
    pub tridiagonal_error: f64,
    /// Largest deviation between the reduced eigenvalues computed directly and
    /// through the symmetric similar matrix.
    pub similarity_error: f64,
    /// Largest distance from a reduced eigenvalue to the full spectrum.
    pub embedding_error: f64,
    /// Largest real part among the nonzero eigenvalues of the full matrix.
    pub gap: f64,
    /// `rho + cos(pi/n) < 0`.
    pub below_critical: bool,
    /// Every nonzero eigenvalue has negative real part.
    pub nonzero_stable: bool,
    /// All eigenvalues of the full matrix as `[re, im]`, sorted by real part.
    pub eigenvalues: Vec<[f64; 2]>,
}

impl SpectrumReport {
    /// Stability agrees with the algebraic criterion and the reduction is exact.
    pub fn consistent(&self, tol: f64) -> bool {
        self.zero_multiplicity >= 2
            && self.tridiagonal_error <= tol
            && self.similarity_error <= tol
            && self.embedding_error <= tol.sqrt()
            && self.nonzero_stable == self.below_critical
    }
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Eigenvalues below this magnitude (relative to the matrix norm) count as zero.
const ZERO_EIGENVALUE_TOL: f64 = 1e-9;

pub fn spectral_check(n: usize, rho: f64) -> Result<SpectrumReport> {
    check_size(n)?;
    if n < 2 {
        return Err(argument("spectral check needs n >= 2"));
    }
    check_rho(rho)?;
    let a = build_block_matrix(n, rho)?.into_entries();
    let scale = a.norm().max(1.0);

    let svd = a.clone().svd(false, false);
    let zero_multiplicity = svd
        .singular_values
        .iter()
        .filter(|s| **s <= 1e-10 * scale)
        .count();

    let mut eigenvalues: Vec<[f64; 2]> = a
        .clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| [z.re, z.im])
        .collect();
    eigenvalues.sort_by(|x, y| x[0].total_cmp(&y[0]).then(x[1].total_cmp(&y[1])));
    let nonzero: Vec<&[f64; 2]> = eigenvalues
        .iter()
        .filter(|z| z[0].hypot(z[1]) > ZERO_EIGENVALUE_TOL * scale)
        .collect();
    let gap = nonzero
        .iter()
        .map(|z| z[0])
        .fold(f64::NEG_INFINITY, f64::max);
    let nonzero_stable = nonzero.iter().all(|z| z[0] < 0.0);

    let r = n - 1;
    let mut b = DMatrix::<f64>::zeros(r, r);
    for k in 0..r {
        b[(k, k)] = rho;
        if k + 1 < r {
            b[(k, k + 1)] = 0.5;
            b[(k + 1, k)] = 0.5;
        }
    }
    let weights: Vec<f64> = (1..n).map(|k| (k * (n - k)) as f64).collect();
    let tridiagonal_eigenvalues = sorted(b.clone().symmetric_eigenvalues().iter().copied().collect());
    let tridiagonal_formula = sorted(
        (1..n)
            .map(|j| rho + (j as f64 * PI / n as f64).cos())
            .collect(),
    );

    let d = DMatrix::from_diagonal(&DVector::from_vec(weights.clone()));
    let reduced = &d * &b;
    let reduced_direct = sorted(
        reduced
            .complex_eigenvalues()
            .iter()
            .map(|z| z.re)
            .collect(),
    );
    let sqrt_d = DMatrix::from_diagonal(&DVector::from_iterator(r, weights.iter().map(|w| w.sqrt())));
    let symmetric = &sqrt_d * &b * &sqrt_d;
    let reduced_eigenvalues = sorted(symmetric.symmetric_eigenvalues().iter().copied().collect());

    let embedding_error = reduced_eigenvalues
        .iter()
        .map(|&lam| {
            eigenvalues
                .iter()
                .map(|z| (z[0] - lam).hypot(z[1]))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);

    Ok(SpectrumReport {
        n,
        rho,
        zero_multiplicity,
        tridiagonal_error: max_abs_diff(&tridiagonal_eigenvalues, &tridiagonal_formula),
        similarity_error: max_abs_diff(&reduced_direct, &reduced_eigenvalues),
        reduced_eigenvalues,
        tridiagonal_eigenvalues,
        tridiagonal_formula,
        embedding_error,
        gap,
        below_critical: below_critical(n, rho),
        nonzero_stable,
        eigenvalues,
    })
}

/// `p(rho) = pi / arccos(-rho)`, infinite at `rho = -1`.
pub fn critical_curve(rho: f64) -> Result<f64> {
    if !(-1.0..1.0).contains(&rho) {
        return Err(SbmError::Domain(format!(
            "critical curve is defined for rho in [-1, 1), got {rho}"
        )));
    }
    if rho == -1.0 {
        return Ok(f64::INFINITY);
    }
    Ok(PI / (-rho).acos())
}

/// Inverse of [`critical_curve`]: `-cos(pi/p)` for `p` in `(1, inf]`.
pub fn rho_of(p: f64) -> Result<f64> {
    if !(p > 1.0) {
        return Err(SbmError::Domain(format!(
            "critical moment order must exceed 1, got {p}"
        )));
    }
    if p.is_infinite() {
        return Ok(-1.0);
    }
    Ok(-(PI / p).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(s: &str) -> Coloring {
        s.parse().unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && max_abs_diff(a, b) <= tol
    }

    #[test]
    fn single_particle_block_is_zero() {
        let a = build_block_matrix(1, -0.5).unwrap();
        assert_eq!(a.entries(), &DMatrix::<f64>::zeros(2, 2));
    }

    #[test]
    fn two_particle_block_matches_known_matrix() {
        for rho in [-1.0, -0.7, -0.25, 0.0] {
            let a = build_block_matrix(2, rho).unwrap();
            let expected = DMatrix::from_row_slice(
                4,
                4,
                &[
                    0.0, 0.0, 0.0, 0.0, //
                    0.5, rho, 0.0, 0.5, //
                    0.5, 0.0, rho, 0.5, //
                    0.0, 0.0, 0.0, 0.0,
                ],
            );
            assert_eq!(a.entries(), &expected);
        }
    }

    #[test]
    fn three_particle_row_sums() {
        // Discordant pair counts by hand: 111 -> 0, mixed colorings -> 2, 222 -> 0.
        let hand = [0.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0, 0.0];
        let rho = -0.6;
        let a = build_block_matrix(3, rho).unwrap();
        for (r, d) in hand.iter().enumerate() {
            let sum: f64 = a.entries().row(r).iter().sum();
            assert!((sum - (rho + 1.0) * d).abs() < 1e-15);
        }
    }

    #[test]
    fn singletons_give_zero_matrix() {
        for n in 1..=5 {
            let a = build_partition_matrix(&SetPartition::singletons(n).unwrap(), -0.3).unwrap();
            assert!(a.entries().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn interval_partition_equals_kronecker_sum() {
        let rho = -0.8;
        let pi = SetPartition::new(3, vec![vec![0, 1], vec![2]]).unwrap();
        let direct = build_partition_matrix(&pi, rho).unwrap();
        let a2 = build_block_matrix(2, rho).unwrap().into_entries();
        let z = DMatrix::<f64>::zeros(2, 2);
        assert_eq!(direct.entries(), &kronecker_sum(&a2, &z));
    }

    /// Build by Kronecker sum of block matrices in block order, then undo the
    /// grouping permutation of particle positions.
    fn permuted_kronecker(pi: &SetPartition, rho: f64) -> DMatrix<f64> {
        let n = pi.n();
        let mut grouped = build_block_matrix(pi.blocks()[0].len(), rho).unwrap().into_entries();
        for b in &pi.blocks()[1..] {
            grouped = kronecker_sum(&grouped, build_block_matrix(b.len(), rho).unwrap().entries());
        }
        let order: Vec<usize> = pi.blocks().iter().flatten().copied().collect();
        let to_grouped = |m: usize| -> usize {
            let c = Coloring::from_index(n, m).unwrap();
            let colors: Vec<Color> = order.iter().map(|&p| c.get(p)).collect();
            Coloring::new(&colors).unwrap().lex_index()
        };
        let dim = 1 << n;
        DMatrix::from_fn(dim, dim, |r, c| grouped[(to_grouped(r), to_grouped(c))])
    }

    #[test]
    fn general_partition_equals_permuted_kronecker_sum() {
        let rho = -0.9;
        for s in ["{1,3}{2}", "{1,4}{2,3}", "{1,3,4}{2}", "{1}{2,4}{3}", "{1,2,3,4}"] {
            let pi: SetPartition = s.parse().unwrap();
            let direct = build_partition_matrix(&pi, rho).unwrap();
            assert_eq!(direct.entries(), &permuted_kronecker(&pi, rho), "partition {s}");
        }
    }

    #[test]
    fn alternating_pair_decays_exponentially() {
        let pi = SetPartition::full(2).unwrap();
        for (rho, t) in [(-0.5, 1.3), (-1.0, 2.0), (-0.9, 0.1)] {
            let k = evolve_k(&ColorMeasure::delta(col("12")), &pi, rho, t).unwrap();
            let want = [0.0, (rho * t).exp(), 0.0, 0.0];
            assert!(close(k.values(), &want, 1e-13));
        }
    }

    #[test]
    fn evolve_at_zero_time_is_identity() {
        let k0 = ColorMeasure::new(2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let pi = SetPartition::full(2).unwrap();
        assert_eq!(evolve_k(&k0, &pi, -0.5, 0.0).unwrap(), k0);
        let singles = SetPartition::singletons(2).unwrap();
        assert_eq!(evolve_k(&k0, &singles, -0.5, 17.0).unwrap(), k0);
    }

    #[test]
    fn k_infinity_examples() {
        let pi = SetPartition::full(2).unwrap();
        let k = k_infinity(&ColorMeasure::delta(col("11")), &pi, -0.5).unwrap();
        assert!(close(k.values(), &[1.0, 1.0, 1.0, 0.0], 1e-14));
        let k = k_infinity(&ColorMeasure::delta(col("11")), &pi, -1.0).unwrap();
        assert_eq!(k.values(), &[1.0, 0.5, 0.5, 0.0]);

        let n = 4;
        let rho = -0.8;
        let lam = (0.8f64).acos();
        let full = SetPartition::full(n).unwrap();
        let k = k_infinity(&ColorMeasure::delta(Coloring::uniform(n, Color::One).unwrap()), &full, rho)
            .unwrap();
        for m in Coloring::all(n).unwrap() {
            let ones = m.count_color(Color::One) as f64;
            let want = (lam * ones).sin() / (lam * n as f64).sin();
            assert!((k.get(&m) - want).abs() < 1e-14);
        }
    }

    #[test]
    fn k_infinity_rejects_supercritical() {
        let pi = SetPartition::full(3).unwrap();
        let err = k_infinity(&ColorMeasure::delta(col("111")), &pi, -0.4).unwrap_err();
        assert!(matches!(err, SbmError::Domain(ref s) if s.contains("cos(pi/3)")));
    }

    #[test]
    fn eigenvector_examples() {
        let e = boundary_eigenvectors(2, -1.0).unwrap();
        assert_eq!(e.v1, vec![1.0, 0.5, 0.5, 0.0]);
        let e = boundary_eigenvectors(2, -0.5).unwrap();
        assert!(close(&e.v1, &[1.0, 1.0, 1.0, 0.0], 1e-14));
        for n in 2..=6 {
            let e = boundary_eigenvectors(n, -1.0).unwrap();
            assert!(e.envelope(1.0, 1.0).iter().all(|v| (v - 1.0).abs() < 1e-15));
            assert_eq!(e.v1[0], 1.0);
            assert_eq!(e.v1[(1 << n) - 1], 0.0);
            assert_eq!(e.v2[(1 << n) - 1], 1.0);
        }
    }

    #[test]
    fn spectrum_of_two_particles() {
        let s = spectral_check(2, -0.3).unwrap();
        assert_eq!(s.reduced_eigenvalues.len(), 1);
        assert!((s.reduced_eigenvalues[0] + 0.3).abs() < 1e-15);
        assert_eq!(s.zero_multiplicity, 2);
        assert!((s.gap + 0.3).abs() < 1e-12);
        assert!(s.consistent(1e-9));
    }

    #[test]
    fn spectrum_above_critical_flags_instability() {
        for n in 2..=5 {
            let rho = -(PI / n as f64).cos() + 0.05;
            let s = spectral_check(n, rho).unwrap();
            assert!(!s.below_critical);
            assert!(!s.nonzero_stable);
            assert!(s.gap >= 0.0);
        }
    }

    #[test]
    fn critical_curve_examples() {
        assert!((critical_curve(0.0).unwrap() - 2.0).abs() < 1e-15);
        assert!((critical_curve(-1.0 / 2f64.sqrt()).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(critical_curve(-1.0).unwrap(), f64::INFINITY);
        assert!(critical_curve(-1.0 + 1e-12).unwrap() > 1e5);
        assert!(critical_curve(1.0).is_err());
        assert!(rho_of(1.0).is_err());
        assert_eq!(rho_of(f64::INFINITY).unwrap(), -1.0);
    }

    #[test]
    fn minus_one_conserves_constants_exactly() {
        for s in ["{1,2,3}", "{1,3}{2,4}", "{1,2,3,4,5}", "{1}{2}"] {
            let pi: SetPartition = s.parse().unwrap();
            let a = build_partition_matrix(&pi, -1.0).unwrap();
            for row in a.entries().row_iter() {
                assert_eq!(row.iter().sum::<f64>(), 0.0);
            }
        }
    }

    fn partition_strategy() -> impl Strategy<Value = SetPartition> {
        (2usize..=5).prop_flat_map(|n| {
            proptest::collection::vec(0usize..n, n)
                .prop_map(|labels| SetPartition::from_positions(&labels).unwrap())
        })
    }

    fn rho_for(n: usize, u: f64) -> f64 {
        // Uniform on [-1, -cos(pi/n)) shrunk slightly away from the boundary.
        let hi = -(PI / n as f64).cos() - 0.02;
        -1.0 + u * (hi + 1.0)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn fixed_points(pi in partition_strategy(), u in 0.0f64..1.0) {
            let rho = rho_for(pi.n(), u);
            let e = boundary_eigenvectors(pi.n(), rho).unwrap();
            let a = build_partition_matrix(&pi, rho).unwrap();
            for v in [e.v1_measure(), e.v2_measure()] {
                let av = a.entries() * DVector::from_column_slice(v.values());
                prop_assert!(av.amax() <= 1e-12);
                let k = k_infinity(&v, &pi, rho).unwrap();
                prop_assert!(k.sup_distance(&v) <= 1e-10);
            }
        }

        #[test]
        fn semigroup_law(pi in partition_strategy(), u in 0.0f64..1.0, s in 0.0f64..3.0, t in 0.0f64..3.0,
                         seed in proptest::collection::vec(0.0f64..1.0, 32)) {
            let n = pi.n();
            let rho = -1.0 + u;
            let k0 = ColorMeasure::new(n, seed[..1 << n].to_vec()).unwrap();
            let a = build_partition_matrix(&pi, rho).unwrap();
            let two = a.evolve(&a.evolve(&k0, s).unwrap(), t).unwrap();
            let one = a.evolve(&k0, s + t).unwrap();
            prop_assert!(two.sup_distance(&one) <= 1e-10);
        }

        #[test]
        fn domination(pi in partition_strategy(), u in 0.0f64..1.0, a1 in 0.0f64..2.0, a2 in 0.0f64..2.0,
                      frac in proptest::collection::vec(0.0f64..1.0, 32), t in 0.0f64..20.0) {
            let n = pi.n();
            let rho = rho_for(n, u);
            let e = boundary_eigenvectors(n, rho).unwrap();
            let env = e.envelope(a1, a2);
            let k0 = ColorMeasure::new(n, env.iter().zip(&frac).map(|(v, f)| v * f).collect()).unwrap();
            let kt = evolve_k(&k0, &pi, rho, t).unwrap();
            prop_assert!(kt.dominated_by(&env, 1e-10));
            prop_assert!(k_infinity(&k0, &pi, rho).unwrap().dominated_by(&env, 1e-10));
        }

        #[test]
        fn kronecker_product_of_exponentials(l1 in 1usize..=3, l2 in 1usize..=3, rho in -1.0f64..0.0, t in 0.0f64..4.0) {
            let a = build_block_matrix(l1, rho).unwrap().into_entries();
            let b = build_block_matrix(l2, rho).unwrap().into_entries();
            let lhs = (kronecker_sum(&a, &b) * t).exp();
            let rhs = (&a * t).exp().kronecker(&(&b * t).exp());
            prop_assert!((lhs - rhs).amax() <= 1e-10);
        }

        #[test]
        fn critical_curve_round_trip(rho in -0.999f64..0.999) {
            let p = critical_curve(rho).unwrap();
            prop_assert!((rho_of(p).unwrap() - rho).abs() <= 1e-12);
        }
    }

    #[test]
    fn convergence_rate_tracks_gap() {
        // A generic initial measure on the full block excites the slowest mode.
        for (n, rho) in [(2, -0.6), (3, -0.9), (3, -0.8), (4, -0.95)] {
            let pi = SetPartition::full(n).unwrap();
            let k0 = ColorMeasure::new(n, (0..1 << n).map(|k| 0.3 + 0.05 * k as f64).collect()).unwrap();
            let limit = k_infinity(&k0, &pi, rho).unwrap();
            let gap = spectral_check(n, rho).unwrap().gap;
            let a = build_partition_matrix(&pi, rho).unwrap();
            let err = |t: f64| a.evolve(&k0, t).unwrap().sup_distance(&limit);
            let (t0, t1) = (5.0, 15.0);
            let rate = (err(t1).ln() - err(t0).ln()) / (t1 - t0);
            assert!((rate - gap).abs() <= 0.1 * gap.abs(), "n={n} rho={rho}: rate {rate} gap {gap}");
        }
    }
}
