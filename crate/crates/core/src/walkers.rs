//! Dual walker systems: continuous-time simple random walks on `Z^d`
//! (`d <= 3`) and Brownian motions on the line, with their collision
//! schedules and pair local times.
//!
//! Lattice walkers jump at rate one to a uniformly chosen neighbour, so a
//! coincident pair separates at rate two. Pair local time on the lattice is
//! coincidence time.
//!
//! Brownian walkers are simulated on a time grid. Within a step the
//! difference of two walkers is a Brownian bridge with variance two per unit
//! time, so it reaches zero with probability `exp(-a b / h)` when its
//! endpoints `a, b` share a sign (and with certainty otherwise). Given a
//! crossing, the local time accrued in the step is drawn from its exact
//! conditional law and the crossing time is drawn uniformly in the step. Local
//! time is the semimartingale local time at zero of `X^i - X^j`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::coloring::{check_size, SetPartition};
use crate::error::{argument, Result};
use crate::rng::open01;

/// A site of `Z^d`, `d <= 3`, with unused coordinates zero.
pub type Site = [i64; 3];

/// Where the walkers live.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Space {
    Lattice { dim: usize },
    Continuum { dt: f64 },
}

/// A change of the collision structure at time `time`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub time: f64,
    /// On the lattice, the partition induced by positions from `time` on. In
    /// the continuum, the pair partition of `pair`.
    pub partition: SetPartition,
    /// The colliding pair (continuum only).
    pub pair: Option<(usize, usize)>,
}

/// Local time `amount` of `pair`, accrued linearly over `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTimePiece {
    pub pair: (usize, usize),
    pub start: f64,
    pub end: f64,
    pub amount: f64,
}

impl LocalTimePiece {
    fn accrued_by(&self, t: f64) -> f64 {
        if t <= self.start {
            0.0
        } else if t >= self.end || self.end <= self.start {
            self.amount
        } else {
            self.amount * (t - self.start) / (self.end - self.start)
        }
    }
}

/// Recorded trajectories of `n` dual walkers up to `horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WalkerPaths {
    n: usize,
    space: Space,
    horizon: f64,
    initial_partition: SetPartition,
    events: Vec<CollisionEvent>,
    /// Lattice: start times of the constant-position segments.
    segment_starts: Vec<f64>,
    /// Lattice: positions on each segment, `n` per segment.
    sites: Vec<Site>,
    /// Continuum: grid times.
    grid: Vec<f64>,
    /// Continuum: positions at each grid time, `n` per grid point.
    points: Vec<f64>,
    pieces: Vec<LocalTimePiece>,
}

impl WalkerPaths {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn events(&self) -> &[CollisionEvent] {
        &self.events
    }

    pub fn initial_partition(&self) -> &SetPartition {
        &self.initial_partition
    }

    pub fn is_lattice(&self) -> bool {
        matches!(self.space, Space::Lattice { .. })
    }

    pub fn first_event_time(&self) -> Option<f64> {
        self.events.first().map(|e| e.time)
    }

    /// Continuum local-time pieces in order of their start.
    pub fn pieces(&self) -> &[LocalTimePiece] {
        &self.pieces
    }

    /// Lattice segments as `(start, positions)`.
    pub fn segments(&self) -> impl Iterator<Item = (f64, &[Site])> + '_ {
        self.segment_starts
            .iter()
            .zip(self.sites.chunks(self.n))
            .map(|(t, s)| (*t, s))
    }

    fn segment_index(&self, t: f64) -> usize {
        self.segment_starts.partition_point(|s| *s <= t).saturating_sub(1)
    }

    /// Lattice position of walker `i` at time `t`.
    pub fn site(&self, i: usize, t: f64) -> Site {
        self.sites[self.segment_index(t) * self.n + i]
    }

    /// All lattice positions at time `t`.
    pub fn sites_at(&self, t: f64) -> &[Site] {
        let k = self.segment_index(t);
        &self.sites[k * self.n..(k + 1) * self.n]
    }

    /// Continuum position of walker `i` at time `t`, linear between grid times.
    pub fn point(&self, i: usize, t: f64) -> f64 {
        let k = self.grid.partition_point(|g| *g <= t);
        if k == 0 {
            return self.points[i];
        }
        if k >= self.grid.len() {
            return self.points[(self.grid.len() - 1) * self.n + i];
        }
        let (t0, t1) = (self.grid[k - 1], self.grid[k]);
        let (x0, x1) = (self.points[(k - 1) * self.n + i], self.points[k * self.n + i]);
        x0 + (x1 - x0) * (t - t0) / (t1 - t0)
    }

    pub fn points_at(&self, t: f64) -> Vec<f64> {
        (0..self.n).map(|i| self.point(i, t)).collect()
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Collision partition in force at time `t`: lattice partitions are
    /// right-continuous; in the continuum this is the pair partition of the
    /// most recent colliding pair, or singletons before the first collision.
    pub fn partition_at(&self, t: f64) -> &SetPartition {
        let k = self.events.partition_point(|e| e.time <= t);
        if k == 0 {
            &self.initial_partition
        } else {
            &self.events[k - 1].partition
        }
    }

    /// `L^{i,j}_t`. On the lattice this is summed over the intervals between
    /// partition changes on which `i` and `j` share a block.
    pub fn pair_local_time(&self, i: usize, j: usize, t: f64) -> f64 {
        let (i, j) = (i.min(j), i.max(j));
        let t = t.min(self.horizon);
        match self.space {
            Space::Lattice { .. } => {
                let mut total = 0.0;
                let mut start = 0.0;
                let mut pi = &self.initial_partition;
                for e in &self.events {
                    if e.time >= t {
                        break;
                    }
                    if pi.same_block(i, j) {
                        total += e.time - start;
                    }
                    start = e.time;
                    pi = &e.partition;
                }
                if pi.same_block(i, j) {
                    total += t - start;
                }
                total
            }
            Space::Continuum { .. } => self
                .pieces
                .iter()
                .filter(|p| p.pair == (i, j))
                .map(|p| p.accrued_by(t))
                .sum(),
        }
    }
}

fn check_horizon(horizon: f64) -> Result<()> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(argument(format!("horizon must be positive and finite, got {horizon}")));
    }
    Ok(())
}

/// Independent rate-one simple random walks on `Z^dim`.
pub fn simulate_lattice_walkers<R: Rng + ?Sized>(
    dim: usize,
    starts: &[Site],
    horizon: f64,
    rng: &mut R,
) -> Result<WalkerPaths> {
    let n = starts.len();
    check_size(n)?;
    check_horizon(horizon)?;
    if !(1..=3).contains(&dim) {
        return Err(argument(format!("lattice dimension must be 1, 2 or 3, got {dim}")));
    }
    if starts.iter().any(|s| s[dim..].iter().any(|c| *c != 0)) {
        return Err(argument(format!(
            "start sites must have zero coordinates beyond dimension {dim}"
        )));
    }
    let mut pos = starts.to_vec();
    let initial_partition = SetPartition::from_positions(&pos)?;
    let mut current = initial_partition.clone();
    let mut events = Vec::new();
    let mut segment_starts = vec![0.0];
    let mut sites = pos.clone();
    let total_rate = n as f64;
    let mut t = 0.0;
    loop {
        t += -open01(rng).ln() / total_rate;
        if t >= horizon {
            break;
        }
        let walker = rng.random_range(0..n);
        let dir = rng.random_range(0..2 * dim);
        pos[walker][dir / 2] += if dir % 2 == 0 { 1 } else { -1 };
        segment_starts.push(t);
        sites.extend_from_slice(&pos);
        let next = SetPartition::from_positions(&pos)?;
        if next != current {
            events.push(CollisionEvent {
                time: t,
                partition: next.clone(),
                pair: None,
            });
            current = next;
        }
    }
    Ok(WalkerPaths {
        n,
        space: Space::Lattice { dim },
        horizon,
        initial_partition,
        events,
        segment_starts,
        sites,
        grid: Vec::new(),
        points: Vec::new(),
        pieces: Vec::new(),
    })
}

/// Local time at zero accrued by a variance-two bridge from `a` to `b` over
/// a step of length `h`, conditional on reaching zero; `u` is uniform on (0,1).
pub fn bridge_local_time(a: f64, b: f64, h: f64, u: f64) -> f64 {
    let s = (a.abs() + b.abs()) / std::f64::consts::SQRT_2;
    std::f64::consts::SQRT_2 * ((s * s - 2.0 * h * u.ln()).sqrt() - s)
}

/// Probability that a variance-two bridge from `a` to `b` over time `h` hits zero.
pub fn bridge_hit_probability(a: f64, b: f64, h: f64) -> f64 {
    if a * b <= 0.0 {
        1.0
    } else {
        (-a * b / h).exp()
    }
}

/// Uniform time grid on `[0, horizon]` with the last step shortened to land
/// on the horizon.
pub(crate) fn uniform_grid(horizon: f64, dt: f64) -> Vec<f64> {
    let steps = (horizon / dt - 1e-9).ceil().max(1.0) as usize;
    let mut grid: Vec<f64> = (0..steps).map(|k| k as f64 * dt).collect();
    grid.push(horizon);
    grid
}

/// Independent standard Brownian motions from pairwise distinct `starts`.
pub fn simulate_brownian_walkers<R: Rng + ?Sized>(
    starts: &[f64],
    horizon: f64,
    dt: f64,
    rng: &mut R,
) -> Result<WalkerPaths> {
    let n = starts.len();
    check_size(n)?;
    check_horizon(horizon)?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(argument(format!("time step must be positive, got {dt}")));
    }
    if starts.iter().any(|x| !x.is_finite()) {
        return Err(argument("start points must be finite"));
    }
    for i in 0..n {
        for j in i + 1..n {
            if starts[i] == starts[j] {
                return Err(argument(format!(
                    "walkers {i} and {j} start at the same point {}: continuum starts must be pairwise distinct",
                    starts[i]
                )));
            }
        }
    }
    let grid = uniform_grid(horizon, dt);
    let mut points = Vec::with_capacity(grid.len() * n);
    points.extend_from_slice(starts);
    let mut pieces = Vec::new();
    let mut events = Vec::new();
    let mut active: Option<(usize, usize)> = None;
    let mut hits: Vec<(f64, usize, (usize, usize))> = Vec::new();
    let normal = rand_distr::StandardNormal;
    for k in 1..grid.len() {
        let (s, e) = (grid[k - 1], grid[k]);
        let h = e - s;
        let sd = h.sqrt();
        let base = (k - 1) * n;
        for i in 0..n {
            let z: f64 = rng.sample(normal);
            let x = points[base + i] + sd * z;
            points.push(x);
        }
        hits.clear();
        let mut pair_index = 0;
        for i in 0..n {
            for j in i + 1..n {
                let a = points[base + i] - points[base + j];
                let b = points[base + n + i] - points[base + n + j];
                let p = bridge_hit_probability(a, b, h);
                if p >= 1.0 || open01(rng) < p {
                    let theta = s + h * open01(rng);
                    let amount = bridge_local_time(a, b, h, open01(rng));
                    pieces.push(LocalTimePiece {
                        pair: (i, j),
                        start: theta,
                        end: e,
                        amount,
                    });
                    hits.push((theta, pair_index, (i, j)));
                }
                pair_index += 1;
            }
        }
        hits.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        for &(theta, _, pair) in &hits {
            if active != Some(pair) {
                events.push(CollisionEvent {
                    time: theta,
                    partition: SetPartition::pair(n, pair.0, pair.1)?,
                    pair: Some(pair),
                });
                active = Some(pair);
            }
        }
    }
    pieces.sort_by(|x, y| x.start.total_cmp(&y.start).then(x.pair.cmp(&y.pair)));
    Ok(WalkerPaths {
        n,
        space: Space::Continuum { dt },
        horizon,
        initial_partition: SetPartition::singletons(n)?,
        events,
        segment_starts: Vec::new(),
        sites: Vec::new(),
        grid,
        points,
        pieces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_stream;
    use crate::stats::{ks_critical_1pct, ks_statistic, normal_cdf, Estimate};

    #[test]
    fn single_lattice_walker_has_no_events() {
        let p = simulate_lattice_walkers(1, &[[0, 0, 0]], 50.0, &mut derive_stream(1, 0)).unwrap();
        assert!(p.events().is_empty());
        assert!(p.segments().count() > 1);
    }

    #[test]
    fn coincident_pair_separates_at_rate_two() {
        // First holding time of a coincident pair is Exp(2); its mean is 1/2.
        let n = 20_000;
        let times: Vec<f64> = (0..n)
            .map(|k| {
                let p = simulate_lattice_walkers(1, &[[0, 0, 0], [0, 0, 0]], 5.0, &mut derive_stream(2, k))
                    .unwrap();
                p.first_event_time().unwrap_or(5.0)
            })
            .collect();
        let d = ks_statistic(&times, |t| 1.0 - (-2.0 * t).exp());
        assert!(d < ks_critical_1pct(n as usize), "KS {d}");
        let p = simulate_lattice_walkers(1, &[[0, 0, 0], [0, 0, 0]], 5.0, &mut derive_stream(2, 0)).unwrap();
        let first = p.first_event_time().unwrap();
        assert!((p.pair_local_time(0, 1, first) - first).abs() < 1e-15);
    }

    #[test]
    fn lattice_local_time_equals_coincidence_integral() {
        for k in 0..20 {
            let p = simulate_lattice_walkers(
                2,
                &[[0, 0, 0], [1, 0, 0], [0, 1, 0]],
                30.0,
                &mut derive_stream(3, k),
            )
            .unwrap();
            let segs: Vec<(f64, Vec<Site>)> = p.segments().map(|(t, s)| (t, s.to_vec())).collect();
            for (i, j) in [(0, 1), (0, 2), (1, 2)] {
                for t in [7.5, 30.0] {
                    let mut direct = 0.0;
                    for (m, (start, s)) in segs.iter().enumerate() {
                        let end = segs.get(m + 1).map_or(p.horizon(), |x| x.0).min(t);
                        if *start < end && s[i] == s[j] {
                            direct += end - start;
                        }
                    }
                    assert!((direct - p.pair_local_time(i, j, t)).abs() < 1e-12);
                }
            }
            let mut last = 0.0;
            for e in p.events() {
                assert!(e.time > last);
                last = e.time;
            }
        }
    }

    #[test]
    fn brownian_rejects_coincident_starts() {
        let err = simulate_brownian_walkers(&[0.0, 1.0, 0.0], 1.0, 0.01, &mut derive_stream(0, 0));
        assert!(err.unwrap_err().to_string().contains("pairwise distinct"));
        let p = simulate_brownian_walkers(&[0.3], 1.0, 0.01, &mut derive_stream(0, 0)).unwrap();
        assert!(p.events().is_empty());
    }

    #[test]
    fn brownian_first_collision_law() {
        // The difference has variance 2t, so P(tau <= t) = 2 (1 - Phi(a / sqrt(2t))).
        let a = 0.8;
        let horizon = 3.0;
        let n = 5000;
        let times: Vec<f64> = (0..n)
            .map(|k| {
                let p = simulate_brownian_walkers(&[0.0, a], horizon, 0.01, &mut derive_stream(4, k)).unwrap();
                p.first_event_time().unwrap_or(f64::INFINITY)
            })
            .collect();
        // Compare the law conditional on colliding before the horizon.
        let cdf = |t: f64| 2.0 * (1.0 - normal_cdf(a / (2.0 * t).sqrt()));
        let hit: Vec<f64> = times.into_iter().filter(|t| t.is_finite()).collect();
        let d = ks_statistic(&hit, |t| cdf(t) / cdf(horizon));
        assert!(d < ks_critical_1pct(hit.len()), "KS {d}");
        let frac = hit.len() as f64 / n as f64;
        let se = (cdf(horizon) * (1.0 - cdf(horizon)) / n as f64).sqrt();
        assert!((frac - cdf(horizon)).abs() < 3.0 * se, "{frac} vs {}", cdf(horizon));
    }

    #[test]
    fn far_starts_rarely_collide() {
        let starts = [0.0, 6.0, 12.0];
        let horizon = 1.0;
        let n = 2000;
        let quiet = (0..n)
            .filter(|&k| {
                simulate_brownian_walkers(&starts, horizon, 0.01, &mut derive_stream(5, k))
                    .unwrap()
                    .events()
                    .is_empty()
            })
            .count();
        // Union bound over the three pairs on their first-passage tails.
        let tail = |gap: f64| 2.0 * (1.0 - normal_cdf(gap / (2.0 * horizon).sqrt()));
        let bound = 1.0 - (tail(6.0) + tail(6.0) + tail(12.0));
        let frac = quiet as f64 / n as f64;
        let se = (bound * (1.0 - bound) / n as f64).sqrt().max(1.0 / n as f64);
        assert!(frac >= bound - 3.0 * se, "{frac} vs {bound}");
    }

    #[test]
    fn bridge_local_time_mean_matches_unconditional_expectation() {
        // From 0, E[L_h] for the variance-two difference equals sqrt(2) E|W_h| = 2 sqrt(h/pi).
        let h: f64 = 0.5;
        let n = 40_000;
        let mut rng = derive_stream(6, 0);
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let b = (2.0 * h).sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
                bridge_local_time(0.0, b, h, open01(&mut rng))
            })
            .collect();
        let e = Estimate::from_samples(&samples);
        let want = 2.0 * (h / std::f64::consts::PI).sqrt();
        assert!((e.mean - want).abs() < 3.0 * e.se, "{} +- {} vs {want}", e.mean, e.se);
    }

    #[test]
    fn brownian_local_time_matches_tanaka_mean() {
        // E L_t for the difference started at a: E|D_t| - |a| with D ~ N(a, 2t).
        let a = 0.4;
        let t: f64 = 1.0;
        let n = 4000;
        let samples: Vec<f64> = (0..n)
            .map(|k| {
                simulate_brownian_walkers(&[0.0, a], t, 0.01, &mut derive_stream(7, k))
                    .unwrap()
                    .pair_local_time(0, 1, t)
            })
            .collect();
        let e = Estimate::from_samples(&samples);
        let s = (2.0 * t).sqrt();
        let abs_mean = s * (2.0 / std::f64::consts::PI).sqrt() * (-(a * a) / (2.0 * s * s)).exp()
            + a * (1.0 - 2.0 * normal_cdf(-a / s));
        let want = abs_mean - a;
        assert!((e.mean - want).abs() < 3.0 * e.se, "{} +- {} vs {want}", e.mean, e.se);
    }
}
