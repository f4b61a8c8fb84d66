//! Euler-Maruyama paths with first-exit detection and doubly stochastic
//! killing.
//!
//! Each path draws a threshold `E ~ Exp(1)` and accumulates the integrated
//! killing intensity `Lambda`. Per step the clock is advanced and tested
//! first, then the position is updated; leaving the domain returns the point
//! where the last segment crosses the boundary. Paths that outlive
//! `max_steps` come back as [`ExitStatus::Truncated`].
//!
//! With `bridge` enabled a step between two interior points can also end the
//! path, with the Brownian-bridge crossing probability of the local
//! half-plane `exp(-2 d0 d1 / (s^2 dt))`. This removes the `O(sqrt(dt))`
//! overshoot bias of discrete monitoring.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Error, Result};
use crate::fields::{PdeCoefficients, SolutionField};
use crate::geometry::{Domain, Point, Vector};
use crate::par::Backend;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub max_steps: usize,
    pub seed: u64,
    /// Pair paths `2i, 2i + 1` on the same stream with mirrored increments.
    pub antithetic: bool,
    /// Brownian-bridge exit test between interior steps.
    pub bridge: bool,
    pub backend: Backend,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 1e-3,
            max_steps: 1_000_000,
            seed: 1,
            antithetic: false,
            bridge: true,
            backend: Backend::Parallel,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }
}

/// Stream tags keeping independent uses of one seed apart.
pub mod purpose {
    pub const PATHS: u64 = 1;
    pub const CONSTANTS: u64 = 2;
    pub const PLUS_SIDE: u64 = 3;
    pub const MINUS_SIDE: u64 = 4;
    pub const KILL_SET: u64 = 5;
    pub const WEIGHT_SET: u64 = 6;
    pub const TAYLOR_NODES: u64 = 7;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-path random streams keyed by `(seed, purpose, index)`.
///
/// Gaussian increments and auxiliary uniforms (killing threshold, bridge
/// tests, proposals) come from separate ChaCha streams, so increments stay
/// aligned between runs that consume a different number of uniforms.
#[derive(Debug, Clone)]
pub struct PathRng {
    normals: ChaCha8Rng,
    aux: ChaCha8Rng,
    negate: bool,
}

impl PathRng {
    pub fn new(seed: u64, purpose: u64, index: u64) -> Self {
        let mut state = seed ^ purpose.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut normals = ChaCha8Rng::from_seed(key);
        let mut aux = ChaCha8Rng::from_seed(key);
        normals.set_stream(2 * index);
        aux.set_stream(2 * index + 1);
        PathRng {
            normals,
            aux,
            negate: false,
        }
    }

    /// Stream for path `index`, folding antithetic pairs onto one stream.
    pub fn for_path(cfg: &SimConfig, purpose: u64, index: u64) -> Self {
        if cfg.antithetic {
            let mut rng = Self::new(cfg.seed, purpose, index / 2);
            rng.negate = index % 2 == 1;
            rng
        } else {
            Self::new(cfg.seed, purpose, index)
        }
    }

    pub fn gaussian(&mut self) -> Vector {
        let g = Vector::new(
            StandardNormal.sample(&mut self.normals),
            StandardNormal.sample(&mut self.normals),
        );
        if self.negate {
            -g
        } else {
            g
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.aux.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn exp1(&mut self) -> f64 {
        Exp1.sample(&mut self.aux)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.aux.next_u64()
    }
}

/// One Euler-Maruyama step `x + mu dt + sigma sqrt(dt) z`.
pub fn em_step(x: &Point, coeffs: &PdeCoefficients, dt: f64, gaussian: &Vector) -> Point {
    x + (coeffs.mu)(x) * dt + (coeffs.sigma)(x) * gaussian * dt.sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExitStatus {
    Exited(Point),
    Killed,
    Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitKillOutcome {
    pub status: ExitStatus,
    /// Loop iterations performed, including the terminating one.
    pub steps_taken: usize,
    /// `steps_taken * dt`.
    pub exit_time_estimate: f64,
    /// Accumulated intensity `Lambda` at termination.
    pub integrated_intensity: f64,
    /// Left Riemann sum of the running cost, if one was requested.
    pub running_integral: f64,
    /// Last position inside the domain.
    pub last_inside: Point,
}

impl ExitKillOutcome {
    pub fn exit_point(&self) -> Option<Point> {
        match self.status {
            ExitStatus::Exited(p) => Some(p),
            _ => None,
        }
    }

    /// `exp(-Lambda)`, the survival weight of the path.
    pub fn survival_weight(&self) -> f64 {
        (-self.integrated_intensity).exp()
    }
}

/// What a path does with its killing clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    /// Terminate in the cemetery state once `Lambda >= E`.
    Kill,
    /// Only accumulate `Lambda`; the caller weights by `exp(-Lambda)`.
    Accumulate,
}

/// Low-level path driver shared by every estimator.
pub struct PathDriver<'a> {
    pub domain: &'a Domain,
    pub coeffs: &'a PdeCoefficients,
    pub intensity: &'a (dyn Fn(&Point) -> Result<f64> + Sync),
    pub running_cost: Option<&'a (dyn Fn(&Point) -> f64 + Sync)>,
    pub clock: ClockMode,
    pub cfg: &'a SimConfig,
}

impl PathDriver<'_> {
    pub fn run(&self, x0: &Point, rng: &mut PathRng) -> Result<ExitKillOutcome> {
        self.run_recording(x0, rng, None)
    }

    /// Runs one path, optionally pushing every visited interior position.
    pub fn run_recording(
        &self,
        x0: &Point,
        rng: &mut PathRng,
        mut record: Option<&mut Vec<Point>>,
    ) -> Result<ExitKillOutcome> {
        let domain = self.domain;
        if !domain.contains(x0) {
            return Err(Error::Domain(format!(
                "start point ({}, {}) is not inside the domain",
                x0.x, x0.y
            )));
        }
        let dt = self.cfg.dt;
        let threshold = rng.exp1();
        let mut lambda = 0.0;
        let mut running = 0.0;
        let mut x = *x0;
        let mut k = 0usize;
        let finish = |status, k: usize, lambda, running, x| ExitKillOutcome {
            status,
            steps_taken: k,
            exit_time_estimate: k as f64 * dt,
            integrated_intensity: lambda,
            running_integral: running,
            last_inside: x,
        };
        loop {
            if let Some(rec) = record.as_deref_mut() {
                rec.push(x);
            }
            if k >= self.cfg.max_steps {
                return Ok(finish(ExitStatus::Truncated, k, lambda, running, x));
            }
            k += 1;
            lambda += (self.intensity)(&x)? * dt;
            if self.clock == ClockMode::Kill && lambda >= threshold {
                return Ok(finish(ExitStatus::Killed, k, lambda, running, x));
            }
            if let Some(cost) = self.running_cost {
                running += cost(&x) * dt;
            }
            let z = rng.gaussian();
            let next = em_step(&x, self.coeffs, dt, &z);
            if !domain.contains(&next) {
                let exit = domain.project_exit(&x, &next)?;
                return Ok(finish(ExitStatus::Exited(exit), k, lambda, running, x));
            }
            if self.cfg.bridge {
                let u = rng.uniform();
                if u < self.bridge_crossing_probability(&x, &next) {
                    let near = if domain.boundary_distance(&next) < domain.boundary_distance(&x) {
                        next
                    } else {
                        x
                    };
                    let exit = domain.nearest_boundary_point(&near);
                    return Ok(finish(ExitStatus::Exited(exit), k, lambda, running, x));
                }
            }
            x = next;
        }
    }

    fn bridge_crossing_probability(&self, from: &Point, to: &Point) -> f64 {
        let d0 = self.domain.boundary_distance(from);
        let d1 = self.domain.boundary_distance(to);
        if !(d0 > 0.0 && d1 > 0.0) {
            return 1.0;
        }
        let grad = self.domain.level_gradient(from);
        let norm = grad.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let n = grad / norm;
        let s2 = ((self.coeffs.sigma)(from).transpose() * n).norm_squared();
        if s2 == 0.0 {
            return 0.0;
        }
        (-2.0 * d0 * d1 / (s2 * self.cfg.dt)).exp()
    }
}

/// One exit-kill trajectory with killing intensity `-d_u f(x, u(x))`.
pub fn simulate_exit_kill(
    x0: &Point,
    domain: &Domain,
    coeffs: &PdeCoefficients,
    solution: &dyn SolutionField,
    cfg: &SimConfig,
    rng: &mut PathRng,
) -> Result<ExitKillOutcome> {
    let intensity = |x: &Point| coeffs.killing_intensity(x, solution.u(x));
    PathDriver {
        domain,
        coeffs,
        intensity: &intensity,
        running_cost: None,
        clock: ClockMode::Kill,
        cfg,
    }
    .run(x0, rng)
}

/// `exp(sum_j d_u f(x_j, u(x_j)) dt)` along a discrete path.
pub fn discount_weight(
    path: &[Point],
    coeffs: &PdeCoefficients,
    solution: &dyn SolutionField,
    dt: f64,
) -> f64 {
    let sum: f64 = path
        .iter()
        .map(|x| (coeffs.df_du)(x, solution.u(x)) * dt)
        .sum();
    sum.exp()
}

/// Simulates `n_paths` independent trajectories from `x0` in index order.
pub fn simulate_many(
    x0: &Point,
    domain: &Domain,
    coeffs: &PdeCoefficients,
    solution: &dyn SolutionField,
    cfg: &SimConfig,
    purpose_tag: u64,
    n_paths: usize,
) -> Result<Vec<ExitKillOutcome>> {
    cfg.validate()?;
    crate::par::try_map_indices(cfg.backend, n_paths, |i| {
        let mut rng = PathRng::for_path(cfg, purpose_tag, i as u64);
        simulate_exit_kill(x0, domain, coeffs, solution, cfg, &mut rng)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::benchmark_solution;

    fn raw_cfg() -> SimConfig {
        SimConfig {
            bridge: false,
            ..SimConfig::default()
        }
    }

    #[test]
    fn em_step_examples() {
        let c = PdeCoefficients::benchmark();
        let x = Point::new(0.3, -0.2);
        assert_eq!(em_step(&x, &c, 1e-3, &Vector::zeros()), x);
        let mut drift = PdeCoefficients::benchmark();
        drift.mu = std::sync::Arc::new(|_| Vector::new(1.0, 0.0));
        drift.sigma = std::sync::Arc::new(|_| nalgebra::Matrix2::zeros());
        let y = em_step(&x, &drift, 0.5, &Vector::new(3.0, -1.0));
        assert_eq!(y, x + Vector::new(0.5, 0.0));
    }

    #[test]
    fn em_step_variance() {
        let c = PdeCoefficients::benchmark();
        let dt = 1e-3;
        let n = 1_000_000;
        let mut rng = PathRng::new(99, 0, 0);
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let z = rng.gaussian();
            let y = em_step(&Point::zeros(), &c, dt, &z);
            for k in 0..2 {
                sum[k] += y[k];
                sq[k] += y[k] * y[k];
            }
        }
        for k in 0..2 {
            let mean = sum[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            let tol = 3.0 * (2.0 / n as f64).sqrt() * 2.0 * dt;
            assert!((var - 2.0 * dt).abs() < tol, "coord {k}: var {var}");
        }
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let mut a = PathRng::new(5, 1, 17);
        let mut b = PathRng::new(5, 1, 17);
        let mut c = PathRng::new(5, 1, 18);
        let (ga, gb, gc) = (a.gaussian(), b.gaussian(), c.gaussian());
        assert_eq!(ga, gb);
        assert_ne!(ga, gc);
        assert_eq!(a.uniform(), b.uniform());
        let mut d = PathRng::new(5, 2, 17);
        assert_ne!(PathRng::new(5, 1, 17).gaussian(), d.gaussian());
    }

    #[test]
    fn antithetic_pairs_mirror_increments() {
        let cfg = SimConfig {
            antithetic: true,
            ..SimConfig::default()
        };
        let mut a = PathRng::for_path(&cfg, 1, 6);
        let mut b = PathRng::for_path(&cfg, 1, 7);
        assert_eq!(a.gaussian(), -b.gaussian());
        assert_eq!(a.uniform(), b.uniform());
    }

    #[test]
    fn zero_intensity_always_exits_on_the_circle() {
        let disk = Domain::unit_disk();
        let c = PdeCoefficients::benchmark();
        let s = benchmark_solution();
        for bridge in [false, true] {
            let cfg = SimConfig {
                bridge,
                ..SimConfig::default()
            };
            let out = simulate_many(&Point::new(0.2, 0.1), &disk, &c, &s, &cfg, 1, 2000).unwrap();
            for o in out {
                match o.status {
                    ExitStatus::Exited(p) => assert!((p.norm() - 1.0).abs() <= 1e-10),
                    other => panic!("unexpected {other:?}"),
                }
                assert_eq!(o.integrated_intensity, 0.0);
            }
        }
    }

    #[test]
    fn huge_intensity_kills_immediately() {
        let disk = Domain::unit_disk();
        let c = PdeCoefficients::with_constant_killing(1e9);
        let s = benchmark_solution();
        let out = simulate_many(&Point::zeros(), &disk, &c, &s, &raw_cfg(), 1, 1000).unwrap();
        assert!(out
            .iter()
            .all(|o| o.status == ExitStatus::Killed && o.steps_taken == 1));
    }

    #[test]
    fn positive_du_f_is_an_error() {
        let disk = Domain::unit_disk();
        let mut c = PdeCoefficients::benchmark();
        c.df_du = std::sync::Arc::new(|_, _| 1.0);
        let mut rng = PathRng::new(1, 1, 0);
        let r = simulate_exit_kill(
            &Point::zeros(),
            &disk,
            &c,
            &benchmark_solution(),
            &raw_cfg(),
            &mut rng,
        );
        assert!(matches!(r, Err(Error::Coefficient(_))));
    }

    #[test]
    fn start_outside_is_an_error() {
        let mut rng = PathRng::new(1, 1, 0);
        let r = simulate_exit_kill(
            &Point::new(2.0, 0.0),
            &Domain::unit_disk(),
            &PdeCoefficients::benchmark(),
            &benchmark_solution(),
            &raw_cfg(),
            &mut rng,
        );
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn truncation_is_reported() {
        let cfg = SimConfig {
            max_steps: 3,
            ..raw_cfg()
        };
        let out = simulate_many(
            &Point::zeros(),
            &Domain::unit_disk(),
            &PdeCoefficients::benchmark(),
            &benchmark_solution(),
            &cfg,
            1,
            50,
        )
        .unwrap();
        assert!(out.iter().all(|o| o.status == ExitStatus::Truncated));
    }

    #[test]
    fn discount_weight_closed_forms() {
        let path = vec![Point::new(0.1, 0.2); 37];
        let s = benchmark_solution();
        assert_eq!(
            discount_weight(&path, &PdeCoefficients::benchmark(), &s, 1e-3),
            1.0
        );
        let w = discount_weight(
            &path,
            &PdeCoefficients::with_constant_killing(3.0),
            &s,
            1e-3,
        );
        assert!((w - (-3.0 * 37.0 * 1e-3_f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn recorded_path_reproduces_accumulated_intensity() {
        let c = PdeCoefficients::with_constant_killing(2.0);
        let s = benchmark_solution();
        let disk = Domain::unit_disk();
        let cfg = SimConfig::default();
        let intensity = |x: &Point| c.killing_intensity(x, s.u(x));
        let driver = PathDriver {
            domain: &disk,
            coeffs: &c,
            intensity: &intensity,
            running_cost: None,
            clock: ClockMode::Accumulate,
            cfg: &cfg,
        };
        let mut path = Vec::new();
        let out = driver
            .run_recording(&Point::zeros(), &mut PathRng::new(3, 1, 0), Some(&mut path))
            .unwrap();
        assert_eq!(path.len(), out.steps_taken);
        let w = discount_weight(&path, &c, &s, cfg.dt);
        assert!((w - out.survival_weight()).abs() < 1e-12);
    }

    #[test]
    fn mean_exit_time_from_centre() {
        // E[tau] = u(0) = 1/4; the bridge test removes the overshoot bias
        let out = simulate_many(
            &Point::zeros(),
            &Domain::unit_disk(),
            &PdeCoefficients::benchmark(),
            &benchmark_solution(),
            &SimConfig::default(),
            purpose::PATHS,
            20_000,
        )
        .unwrap();
        let times: Vec<f64> = out.iter().map(|o| o.exit_time_estimate).collect();
        let n = times.len() as f64;
        let mean = times.iter().sum::<f64>() / n;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!((mean - 0.25).abs() < 3.0 * se + 0.01, "mean {mean} se {se}");
    }

    fn mean_exit_time(cfg: &SimConfig, n: usize) -> f64 {
        let out = simulate_many(
            &Point::zeros(),
            &Domain::unit_disk(),
            &PdeCoefficients::benchmark(),
            &benchmark_solution(),
            cfg,
            purpose::PATHS,
            n,
        )
        .unwrap();
        out.iter().map(|o| o.exit_time_estimate).sum::<f64>() / n as f64
    }

    #[test]
    fn step_bias_shrinks_with_dt() {
        let coarse = raw_cfg();
        let fine = SimConfig {
            dt: coarse.dt / 4.0,
            ..coarse
        };
        let a = mean_exit_time(&coarse, 20_000);
        let b = mean_exit_time(&fine, 20_000);
        assert!((b - a).abs() < (a - 0.25).abs(), "dt {a}, dt/4 {b}");
    }

    #[test]
    fn kill_probability_matches_weight_oracle_on_same_paths() {
        // kill iff Lambda_tau >= E, and P(Lambda >= E | path) = 1 - exp(-Lambda)
        let c = PdeCoefficients::with_constant_killing(2.0);
        let s = benchmark_solution();
        let disk = Domain::unit_disk();
        let cfg = SimConfig::default();
        let intensity = |x: &Point| c.killing_intensity(x, s.u(x));
        let n = 100_000;
        let run = |clock| {
            crate::par::map_indices(cfg.backend, n, |i| {
                PathDriver {
                    domain: &disk,
                    coeffs: &c,
                    intensity: &intensity,
                    running_cost: None,
                    clock,
                    cfg: &cfg,
                }
                .run(&Point::zeros(), &mut PathRng::for_path(&cfg, 9, i as u64))
                .unwrap()
            })
        };
        let killed: Vec<f64> = run(ClockMode::Kill)
            .iter()
            .map(|o| f64::from(o.status == ExitStatus::Killed))
            .collect();
        let oracle: Vec<f64> = run(ClockMode::Accumulate)
            .iter()
            .map(|o| 1.0 - o.survival_weight())
            .collect();
        let stats = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
            (m, var / v.len() as f64)
        };
        let (pk, vk) = stats(&killed);
        let (po, vo) = stats(&oracle);
        assert!((pk - po).abs() < 3.0 * (vk + vo).sqrt(), "{pk} vs {po}");
    }

    #[test]
    fn results_do_not_depend_on_backend() {
        let run = |backend| {
            let cfg = SimConfig {
                backend,
                ..SimConfig::default()
            };
            simulate_many(
                &Point::new(0.1, 0.0),
                &Domain::unit_disk(),
                &PdeCoefficients::with_constant_killing(1.0),
                &benchmark_solution(),
                &cfg,
                1,
                500,
            )
            .unwrap()
        };
        assert_eq!(run(Backend::Parallel), run(Backend::Sequential));
    }
}
