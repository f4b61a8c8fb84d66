//! Tracking functional on perturbed domains and the Taylor-test harness.
//!
//! The Taylor remainder is `|J(Omega_eps) - J(Omega) - eps D|`, with `D` the
//! pre-image derivative reported by the estimators. A correct `D` makes the
//! remainder decay like `eps^2`.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimators::{dphi_free, EngineConfig, Estimate};
use crate::fields::{PdeCoefficients, RadialSolution, SolutionField, TrackingData};
use crate::geometry::{Direction, Domain, PerturbationField, Point};
use crate::par::{compensated_sum, map_indices, try_map_indices};
use crate::problem::Problem;
use crate::quadrature::{gauss_legendre_unit, periodic_angles};
use crate::simulate::{
    purpose, ClockMode, ExitKillOutcome, ExitStatus, PathDriver, PathRng, SimConfig,
};

/// Remainders at or below this multiple of their stderr are noise.
pub const NOISE_FLOOR_FACTOR: f64 = 3.0;
/// Fewer valid points than this leaves the test inconclusive.
pub const MIN_FIT_POINTS: usize = 3;

/// `eps_k = first * 2^-k` for `k = 0..count`.
pub fn halving_eps(first: f64, count: usize) -> Vec<f64> {
    (0..count).map(|k| first * 0.5_f64.powi(k as i32)).collect()
}

/// Default sequence for analytic runs, down to `0.1 * 2^-7 = 7.8e-4`.
pub fn default_eps_analytic() -> Vec<f64> {
    halving_eps(0.1, 8)
}

/// Default sequence for nested Monte Carlo runs, down to `1.6e-3`.
pub fn default_eps_nested() -> Vec<f64> {
    halving_eps(0.1, 7)
}

fn tracking_density(u: f64, target: f64) -> f64 {
    let d = u - target;
    0.5 * d * d
}

/// `int_Omega 1/2 (u - u_target)^2` by masked midpoint quadrature on an
/// `n x n` grid over the bounding box.
pub fn functional_value(
    domain: &Domain,
    solution: &dyn SolutionField,
    tracking: &TrackingData,
    n: usize,
) -> f64 {
    let (lo, hi) = domain.bounding_box();
    let hx = (hi.x - lo.x) / n as f64;
    let hy = (hi.y - lo.y) / n as f64;
    let rows: Vec<f64> = (0..n)
        .map(|j| {
            let y = lo.y + (j as f64 + 0.5) * hy;
            compensated_sum((0..n).filter_map(|i| {
                let p = Point::new(lo.x + (i as f64 + 0.5) * hx, y);
                domain
                    .contains(&p)
                    .then(|| tracking_density(solution.u(&p), tracking.value(&p)))
            }))
        })
        .collect();
    compensated_sum(rows) * hx * hy
}

/// Radius where the ray from the origin at angle `theta` first leaves the
/// domain. The domain must be star-shaped about the origin.
pub fn boundary_radius(domain: &Domain, theta: f64) -> Result<f64> {
    let dir = Point::new(theta.cos(), theta.sin());
    if !domain.contains(&Point::zeros()) {
        return Err(Error::Domain("origin is not inside the domain".into()));
    }
    let (lo, hi) = domain.bounding_box();
    let r_max = lo.abs().sup(&hi.abs()).norm() * 1.01;
    const SCAN: usize = 256;
    let mut inner = 0.0;
    for k in 1..=SCAN {
        let r = r_max * k as f64 / SCAN as f64;
        if !domain.contains(&(dir * r)) {
            let mut a = inner;
            let mut b = r;
            while b - a > 1e-15 * b.max(1.0) {
                let mid = 0.5 * (a + b);
                if mid <= a || mid >= b {
                    break;
                }
                if domain.contains(&(dir * mid)) {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            return Ok(0.5 * (a + b));
        }
        inner = r;
    }
    Err(Error::Domain(format!(
        "ray at angle {theta} never leaves the domain"
    )))
}

/// Boundary-fitted polar rule: Gauss-Legendre in `s = r / R(theta)`,
/// trapezoid in `theta`.
#[derive(Debug, Clone)]
pub struct PolarRule {
    pub nodes: Vec<Point>,
    pub weights: Vec<f64>,
}

impl PolarRule {
    /// Nodes `s_i R(theta_k) e_theta` with weights `R^2 s_i w_i 2 pi / M`.
    pub fn new(domain: &Domain, radial: usize, angular: usize) -> Result<Self> {
        Self::with_radius(radial, angular, |theta| boundary_radius(domain, theta))
    }

    pub fn with_radius<F>(radial: usize, angular: usize, radius: F) -> Result<Self>
    where
        F: Fn(f64) -> Result<f64>,
    {
        if radial == 0 || angular == 0 {
            return Err(Error::Config(
                "polar rule needs at least one node per axis".into(),
            ));
        }
        let (s, ws) = gauss_legendre_unit(radial);
        let dtheta = 2.0 * PI / angular as f64;
        let mut nodes = Vec::with_capacity(radial * angular);
        let mut weights = Vec::with_capacity(radial * angular);
        for theta in periodic_angles(angular) {
            let r = radius(theta)?;
            let dir = Point::new(theta.cos(), theta.sin());
            for (si, wi) in s.iter().zip(&ws) {
                nodes.push(dir * (si * r));
                weights.push(r * r * si * wi * dtheta);
            }
        }
        Ok(PolarRule { nodes, weights })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate<F: Fn(&Point) -> f64>(&self, f: F) -> f64 {
        compensated_sum(self.nodes.iter().zip(&self.weights).map(|(p, w)| w * f(p)))
    }
}

/// `int_Omega 1/2 (u - u_target)^2` on a boundary-fitted polar rule.
pub fn functional_value_polar(
    domain: &Domain,
    solution: &dyn SolutionField,
    tracking: &TrackingData,
    radial: usize,
    angular: usize,
) -> Result<f64> {
    let rule = PolarRule::new(domain, radial, angular)?;
    Ok(rule.integrate(|p| tracking_density(solution.u(p), tracking.value(p))))
}

fn reject_semilinear(coeffs: &PdeCoefficients) -> Result<()> {
    if coeffs.semilinear {
        return Err(Error::Unsupported(
            "perturbed solutions need f independent of u".into(),
        ));
    }
    Ok(())
}

/// Feynman-Kac sample `int_0^tau f + g(X_tau)` of one finished path.
///
/// Without the bridge test the last left-Riemann step is halved, which
/// records the crossing at `(k - 1/2) dt`.
fn path_value(out: &ExitKillOutcome, coeffs: &PdeCoefficients, cfg: &SimConfig) -> Option<f64> {
    let ExitStatus::Exited(y) = out.status else {
        return None;
    };
    let mut value = out.running_integral + (coeffs.g)(&y);
    if !cfg.bridge {
        value -= 0.5 * cfg.dt * (coeffs.f)(&out.last_inside, 0.0);
    }
    Some(value)
}

struct SolutionSampler<'a> {
    domain: &'a Domain,
    coeffs: &'a PdeCoefficients,
    cfg: &'a SimConfig,
}

impl SolutionSampler<'_> {
    fn sample(&self, x: &Point, stream: u64) -> Result<Option<f64>> {
        let zero = |_: &Point| Ok(0.0);
        let cost = |p: &Point| (self.coeffs.f)(p, 0.0);
        let driver = PathDriver {
            domain: self.domain,
            coeffs: self.coeffs,
            intensity: &zero,
            running_cost: Some(&cost),
            clock: ClockMode::Accumulate,
            cfg: self.cfg,
        };
        let mut rng = PathRng::for_path(self.cfg, purpose::TAYLOR_NODES, stream);
        let out = driver.run(x, &mut rng)?;
        Ok(path_value(&out, self.coeffs, self.cfg))
    }
}

/// `u_eps(x)` on `domain` by Feynman-Kac: for `f = 1, g = 0` the mean exit
/// time of the diffusion.
pub fn perturbed_solution_mc(
    domain: &Domain,
    coeffs: &PdeCoefficients,
    x: &Point,
    n_paths: usize,
    cfg: &SimConfig,
) -> Result<Estimate> {
    let values = perturbed_solution_samples(domain, coeffs, x, n_paths, cfg)?;
    let n_truncated = values.iter().filter(|v| v.is_none()).count();
    let kept: Vec<f64> = values.into_iter().flatten().collect();
    Ok(Estimate::from_samples(&kept, n_truncated, cfg.seed))
}

/// Per-path samples behind [`perturbed_solution_mc`]; `None` marks a
/// truncated path. Path `j` uses the same stream on every domain, so samples
/// on two domains are paired.
pub fn perturbed_solution_samples(
    domain: &Domain,
    coeffs: &PdeCoefficients,
    x: &Point,
    n_paths: usize,
    cfg: &SimConfig,
) -> Result<Vec<Option<f64>>> {
    reject_semilinear(coeffs)?;
    cfg.validate()?;
    if !domain.contains(x) {
        return Err(Error::Domain(format!(
            "({}, {}) is not inside the domain",
            x.x, x.y
        )));
    }
    let sampler = SolutionSampler {
        domain,
        coeffs,
        cfg,
    };
    try_map_indices(cfg.backend, n_paths, |j| sampler.sample(x, j as u64))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TaylorRecord {
    pub eps: f64,
    pub j_perturbed: f64,
    /// Standard error of `j_perturbed - j_base`; zero in analytic mode.
    pub stderr: f64,
    pub j_base: f64,
    pub derivative: f64,
    pub remainder: f64,
}

impl TaylorRecord {
    pub fn new(eps: f64, j_perturbed: f64, stderr: f64, j_base: f64, derivative: f64) -> Self {
        TaylorRecord {
            eps,
            j_perturbed,
            stderr,
            j_base,
            derivative,
            remainder: signed_remainder(j_perturbed, j_base, eps, derivative).abs(),
        }
    }

    pub fn above_noise_floor(&self) -> bool {
        self.remainder > NOISE_FLOOR_FACTOR * self.stderr && self.remainder > 0.0
    }
}

/// `J(Omega_eps) - J(Omega) - eps D` for a pre-image derivative `D`.
pub fn signed_remainder(j_perturbed: f64, j_base: f64, eps: f64, derivative: f64) -> f64 {
    j_perturbed - j_base - eps * derivative
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub fit_range: (f64, f64),
    pub r_squared: f64,
    pub n_points: usize,
}

/// Least squares line through `(ln eps, ln remainder)`.
pub fn fit_slope(points: &[(f64, f64)]) -> Option<SlopeFit> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        sxy * sxy / (sxx * syy)
    };
    let lo = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    Some(SlopeFit {
        slope,
        intercept: my - slope * mx,
        fit_range: (lo, hi),
        r_squared,
        n_points: points.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DerivativeSource {
    Supplied(f64),
    /// Estimated with the mesh-free engine before the sweep.
    McFree(EngineConfig),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NestedConfig {
    pub radial_nodes: usize,
    pub angular_nodes: usize,
    pub paths_per_node: usize,
    pub sim: SimConfig,
}

impl Default for NestedConfig {
    fn default() -> Self {
        NestedConfig {
            radial_nodes: 12,
            angular_nodes: 40,
            paths_per_node: 400,
            sim: SimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaylorMode {
    /// Closed-form `J` on the balls `|x| < 1 / (1 + eps)`; needs `V1`.
    AnalyticRadial,
    NestedMc(NestedConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaylorOutcome {
    pub records: Vec<TaylorRecord>,
    pub fit: Option<SlopeFit>,
}

impl TaylorOutcome {
    pub fn from_records(records: Vec<TaylorRecord>) -> Self {
        let points: Vec<(f64, f64)> = records
            .iter()
            .filter(|r| r.above_noise_floor())
            .map(|r| (r.eps.abs(), r.remainder))
            .collect();
        let fit = if points.len() >= MIN_FIT_POINTS {
            fit_slope(&points)
        } else {
            None
        };
        TaylorOutcome { records, fit }
    }

    pub fn is_conclusive(&self) -> bool {
        self.fit.is_some()
    }
}

const RADIAL_GAUSS: usize = 16;
const RADIAL_ANGLES: usize = 64;

/// `J` on the ball of radius `R` with `u_R = (R^2 - |x|^2) / 4`. The rule is
/// exact for the benchmark's polynomial integrand.
pub fn radial_functional(radius: f64, tracking: &TrackingData) -> Result<f64> {
    let rule = PolarRule::with_radius(RADIAL_GAUSS, RADIAL_ANGLES, |_| Ok(radius))?;
    let u = RadialSolution { radius };
    Ok(rule.integrate(|p| tracking_density(u.u(p), tracking.value(p))))
}

fn require_radial_benchmark(problem: &Problem, field: &PerturbationField) -> Result<()> {
    if field.direction() != Some(Direction::V1) {
        return Err(Error::Unsupported(format!(
            "analytic radial mode needs V1, got {}",
            field.name()
        )));
    }
    if !matches!(problem.domain, Domain::UnitDisk) || problem.coeffs.semilinear {
        return Err(Error::Unsupported(
            "analytic radial mode needs the Poisson problem on the unit disk".into(),
        ));
    }
    Ok(())
}

/// Per-node Monte Carlo samples of `u` on one polar rule.
struct NodeSamples {
    weights: Vec<f64>,
    targets: Vec<f64>,
    values: Vec<Vec<f64>>,
    n_truncated: usize,
}

impl NodeSamples {
    fn collect(problem: &Problem, domain: &Domain, cfg: &NestedConfig) -> Result<Self> {
        reject_semilinear(&problem.coeffs)?;
        cfg.sim.validate()?;
        if cfg.paths_per_node < 2 {
            return Err(Error::Config("need at least two paths per node".into()));
        }
        let rule = PolarRule::new(domain, cfg.radial_nodes, cfg.angular_nodes)?;
        let sampler = SolutionSampler {
            domain,
            coeffs: &problem.coeffs,
            cfg: &cfg.sim,
        };
        let m = cfg.paths_per_node;
        let per_node = try_map_indices(cfg.sim.backend, rule.len(), |i| {
            let x = rule.nodes[i];
            (0..m)
                .map(|j| sampler.sample(&x, (i * m + j) as u64))
                .collect::<Result<Vec<Option<f64>>>>()
        })?;
        let mut n_truncated = 0;
        let values = per_node
            .into_iter()
            .map(|v| {
                // truncated paths fall back to the truncation time
                v.into_iter()
                    .map(|s| {
                        s.unwrap_or_else(|| {
                            n_truncated += 1;
                            cfg.sim.max_steps as f64 * cfg.sim.dt
                        })
                    })
                    .collect()
            })
            .collect();
        let targets = rule
            .nodes
            .iter()
            .map(|p| problem.tracking.value(p))
            .collect();
        Ok(NodeSamples {
            weights: rule.weights,
            targets,
            values,
            n_truncated,
        })
    }

    fn mean(v: &[f64]) -> f64 {
        compensated_sum(v.iter().copied()) / v.len() as f64
    }

    /// `sum w (1/2 (m - target)^2 - s^2 / (2n))`, unbiased per node.
    fn functional(&self) -> f64 {
        compensated_sum(self.values.iter().enumerate().map(|(i, v)| {
            let n = v.len() as f64;
            let m = Self::mean(v);
            let s2 = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
            self.weights[i] * 0.5 * ((m - self.targets[i]).powi(2) - s2 / n)
        }))
    }

    /// Delta-method influence `w (m - target) u_j` of each path sample.
    fn influence(&self, i: usize) -> Vec<f64> {
        let v = &self.values[i];
        let m = Self::mean(v);
        let c = self.weights[i] * (m - self.targets[i]);
        v.iter().map(|x| c * x).collect()
    }

    /// Standard error of `J_self - J_other` with paths paired by stream.
    fn paired_stderr(&self, other: &NodeSamples) -> f64 {
        let var: f64 = (0..self.values.len())
            .map(|i| {
                let a = self.influence(i);
                let b = other.influence(i);
                let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
                let n = d.len() as f64;
                let m = d.iter().sum::<f64>() / n;
                d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) / n
            })
            .sum();
        var.sqrt()
    }
}

/// Nested Monte Carlo `J` on `domain` with its own standard error.
pub fn functional_value_nested(
    problem: &Problem,
    domain: &Domain,
    cfg: &NestedConfig,
) -> Result<Estimate> {
    let samples = NodeSamples::collect(problem, domain, cfg)?;
    let zero = NodeSamples {
        values: samples.values.iter().map(|v| vec![0.0; v.len()]).collect(),
        weights: samples.weights.clone(),
        targets: samples.targets.clone(),
        n_truncated: 0,
    };
    let stderr = samples.paired_stderr(&zero);
    let n_paths = samples.values.iter().map(Vec::len).sum();
    Ok(Estimate {
        value: samples.functional(),
        stderr,
        n_effective: n_paths,
        n_truncated: samples.n_truncated,
        seed: cfg.sim.seed,
        flagged: samples.n_truncated > 0,
    })
}

fn resolve_derivative(
    problem: &Problem,
    field: &PerturbationField,
    source: DerivativeSource,
) -> Result<f64> {
    match source {
        DerivativeSource::Supplied(d) => Ok(d),
        DerivativeSource::McFree(config) => Ok(dphi_free(problem.clone(), field, config)?.value()),
    }
}

/// Taylor test along `field` over `eps_list`.
pub fn taylor_test(
    problem: &Problem,
    field: &PerturbationField,
    source: DerivativeSource,
    eps_list: &[f64],
    mode: TaylorMode,
) -> Result<TaylorOutcome> {
    if eps_list.is_empty() {
        return Err(Error::Config("empty eps list".into()));
    }
    for &eps in eps_list {
        if eps == 0.0 || eps.abs() > field.eps_max() {
            return Err(Error::Config(format!(
                "eps = {eps} outside (0, {}] for {}",
                field.eps_max(),
                field.name()
            )));
        }
    }
    let derivative = resolve_derivative(problem, field, source)?;
    let records = match mode {
        TaylorMode::AnalyticRadial => {
            require_radial_benchmark(problem, field)?;
            let j_base = radial_functional(1.0, &problem.tracking)?;
            eps_list
                .iter()
                .map(|&eps| {
                    let j = radial_functional(1.0 / (1.0 + eps), &problem.tracking)?;
                    Ok(TaylorRecord::new(eps, j, 0.0, j_base, derivative))
                })
                .collect::<Result<Vec<_>>>()?
        }
        TaylorMode::NestedMc(cfg) => {
            let base = NodeSamples::collect(problem, &problem.domain, &cfg)?;
            let j_base = base.functional();
            let mut records = Vec::with_capacity(eps_list.len());
            for &eps in eps_list {
                let domain = Domain::perturbed(problem.domain.clone(), field.clone(), eps)?;
                let pert = NodeSamples::collect(problem, &domain, &cfg)?;
                let stderr = pert.paired_stderr(&base);
                records.push(TaylorRecord::new(
                    eps,
                    pert.functional(),
                    stderr,
                    j_base,
                    derivative,
                ));
            }
            records
        }
    };
    Ok(TaylorOutcome::from_records(records))
}

/// Remainders of an analytic run, in parallel over `eps`.
pub fn radial_remainders(
    tracking: &TrackingData,
    derivative: f64,
    eps_list: &[f64],
) -> Result<Vec<f64>> {
    let j0 = radial_functional(1.0, tracking)?;
    let values = map_indices(crate::par::Backend::Parallel, eps_list.len(), |k| {
        let eps = eps_list[k];
        radial_functional(1.0 / (1.0 + eps), tracking)
            .map(|j| signed_remainder(j, j0, eps, derivative).abs())
    });
    values.into_iter().collect()
}
