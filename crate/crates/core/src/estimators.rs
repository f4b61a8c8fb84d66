//! Monte Carlo estimators for shape derivatives.
//!
//! * [`du_at`]: `Du[V](x) = E[beta_tau <grad u - grad g, V>(X_tau)]`, with
//!   `beta_t = exp(int_0^t d_u f ds)`.
//! * [`ShapeDerivativeEngine::dphi`]: the mesh-free functional derivative
//!   `C+ E[<V, grad u - grad g>(X^+)] - C- E[...(X^-)] - int <V, phi n>`,
//!   where `X^+-` are exit-kill variables started from `mu+-`.
//! * [`exit_time_l1_derivative`]: the L1 derivative of Poisson exit times.
//! * [`kill_weight_equivalence`]: killed versus discounted expectations.
//!
//! Killed paths contribute 0 (the cemetery state maps to zero). Truncated
//! paths are dropped and counted in [`Estimate::n_truncated`].

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{circle_quadrature, BoundaryQuadrature, PerturbationField, Point};
use crate::par::{compensated_sum, map_indices, try_map_indices};
use crate::problem::Problem;
use crate::sampling::{estimate_constants, ConstantsEstimate, InitialSampler, Side};
use crate::simulate::{purpose, ClockMode, ExitStatus, PathDriver, PathRng, SimConfig};

/// Truncated fraction above which an estimate is flagged.
pub const TRUNCATION_FLAG: f64 = 1e-3;

/// Monte Carlo result: mean, standard error, and sample bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub n_effective: usize,
    pub n_truncated: usize,
    pub seed: u64,
    pub flagged: bool,
}

impl Estimate {
    /// Mean and `sd / sqrt(n)` of `samples`, summed in index order.
    pub fn from_samples(samples: &[f64], n_truncated: usize, seed: u64) -> Self {
        let n = samples.len();
        let flagged = n_truncated as f64 >= TRUNCATION_FLAG * (n + n_truncated).max(1) as f64;
        if n == 0 {
            return Estimate {
                value: f64::NAN,
                stderr: f64::NAN,
                n_effective: 0,
                n_truncated,
                seed,
                flagged: true,
            };
        }
        let mean = compensated_sum(samples.iter().copied()) / n as f64;
        let var = if n > 1 {
            compensated_sum(samples.iter().map(|x| (x - mean) * (x - mean))) / (n - 1) as f64
        } else {
            0.0
        };
        Estimate {
            value: mean,
            stderr: (var / n as f64).sqrt(),
            n_effective: n,
            n_truncated,
            seed,
            flagged,
        }
    }

    /// A deterministic value with zero error.
    pub fn exact(value: f64, seed: u64) -> Self {
        Estimate {
            value,
            stderr: 0.0,
            n_effective: 0,
            n_truncated: 0,
            seed,
            flagged: false,
        }
    }

    pub fn truncated_fraction(&self) -> f64 {
        let total = self.n_effective + self.n_truncated;
        if total == 0 {
            0.0
        } else {
            self.n_truncated as f64 / total as f64
        }
    }
}

impl fmt::Display for Estimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.value, self.stderr)
    }
}

/// Which form of the killed expectation to simulate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Representation {
    /// Paths run to exit and are discounted by `exp(-Lambda)`.
    #[default]
    Weight,
    /// Paths are killed at the exponential clock and contribute 0.
    Kill,
}

impl Representation {
    fn clock(self) -> ClockMode {
        match self {
            Representation::Weight => ClockMode::Accumulate,
            Representation::Kill => ClockMode::Kill,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SignConvention {
    /// Derivative along pre-images `{x : x + eps V(x) in Omega}`.
    #[default]
    Preimage,
    /// Derivative along images `(I + eps V)(Omega)`; the negative of the
    /// pre-image value.
    Pushforward,
}

impl SignConvention {
    pub fn apply(self, preimage_value: f64) -> f64 {
        match self {
            SignConvention::Preimage => preimage_value,
            SignConvention::Pushforward => -preimage_value,
        }
    }
}

impl fmt::Display for SignConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignConvention::Preimage => "preimage",
            SignConvention::Pushforward => "pushforward",
        })
    }
}

/// One simulated path reduced to what the estimators need.
#[derive(Debug, Clone, Copy, PartialEq)]
enum PathEnd {
    /// Exit point and survival weight `exp(-Lambda)`.
    Exit(Point, f64),
    Killed,
    Truncated,
}

fn simulate_ends(
    problem: &Problem,
    cfg: &SimConfig,
    clock: ClockMode,
    purpose_tag: u64,
    n_paths: usize,
    start: &(dyn Fn(&mut PathRng) -> Result<Point> + Sync),
) -> Result<Vec<PathEnd>> {
    cfg.validate()?;
    let solution = problem.solution.as_ref();
    let coeffs = &problem.coeffs;
    let intensity = |x: &Point| coeffs.killing_intensity(x, solution.u(x));
    let driver = PathDriver {
        domain: &problem.domain,
        coeffs,
        intensity: &intensity,
        running_cost: None,
        clock,
        cfg,
    };
    try_map_indices(cfg.backend, n_paths, |i| {
        let mut rng = PathRng::for_path(cfg, purpose_tag, i as u64);
        let x0 = start(&mut rng)?;
        let out = driver.run(&x0, &mut rng)?;
        Ok(match out.status {
            ExitStatus::Exited(p) => PathEnd::Exit(p, out.survival_weight()),
            ExitStatus::Killed => PathEnd::Killed,
            ExitStatus::Truncated => PathEnd::Truncated,
        })
    })
}

fn reduce_ends<F: Fn(&Point) -> f64 + Sync>(
    ends: &[PathEnd],
    cfg: &SimConfig,
    eta: F,
    weighted: bool,
) -> Estimate {
    let values: Vec<Option<f64>> = map_indices(cfg.backend, ends.len(), |i| match ends[i] {
        PathEnd::Exit(p, w) => Some(if weighted { w * eta(&p) } else { eta(&p) }),
        PathEnd::Killed => Some(0.0),
        PathEnd::Truncated => None,
    });
    let n_truncated = values.iter().filter(|v| v.is_none()).count();
    let kept: Vec<f64> = values.into_iter().flatten().collect();
    Estimate::from_samples(&kept, n_truncated, cfg.seed)
}

/// `Du[V](x)` at an interior point.
pub fn du_at(
    problem: &Problem,
    x: &Point,
    field: &PerturbationField,
    n_paths: usize,
    cfg: &SimConfig,
    representation: Representation,
) -> Result<Estimate> {
    if !problem.domain.contains(x) {
        return Err(Error::Domain(format!(
            "({}, {}) is not inside the domain",
            x.x, x.y
        )));
    }
    let start = |_: &mut PathRng| Ok(*x);
    let ends = simulate_ends(
        problem,
        cfg,
        representation.clock(),
        purpose::PATHS,
        n_paths,
        &start,
    )?;
    Ok(reduce_ends(
        &ends,
        cfg,
        |y| problem.boundary_integrand(y, &field.eval(y)),
        representation == Representation::Weight,
    ))
}

/// `-int_{dOmega} 1/2 (g - u_target)^2 <V, n> dS`, without the minus sign.
pub fn surface_term(
    problem: &Problem,
    field: &PerturbationField,
    quad: &BoundaryQuadrature,
) -> f64 {
    if field.is_zero() {
        return 0.0;
    }
    quad.integrate(|y, n| {
        let diff = (problem.coeffs.g)(y) - problem.tracking.value(y);
        0.5 * diff * diff * field.eval(y).dot(n)
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    /// Paths per side.
    pub n_paths: usize,
    pub n_constant_samples: usize,
    pub quad_nodes: usize,
    pub sim: SimConfig,
    pub representation: Representation,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            n_paths: 200_000,
            n_constant_samples: 1_000_000,
            quad_nodes: 720,
            sim: SimConfig::default(),
            representation: Representation::Kill,
        }
    }
}

/// Exit-kill samples of one side, shared by every direction.
#[derive(Debug, Clone)]
struct SideSamples {
    ends: Vec<PathEnd>,
    envelope: f64,
}

/// Full decomposition of one mesh-free derivative evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapeDerivativeReport {
    pub direction: String,
    /// Pre-image convention value with its propagated standard error.
    pub dphi_free: Estimate,
    pub surface_term: f64,
    pub boundary_expectation_plus: Estimate,
    pub boundary_expectation_minus: Estimate,
    pub c_plus: Estimate,
    pub c_minus: Estimate,
    pub sign_convention: SignConvention,
}

impl ShapeDerivativeReport {
    /// The assembled value in the report's convention.
    pub fn value(&self) -> f64 {
        self.sign_convention.apply(self.dphi_free.value)
    }

    pub fn in_convention(&self, convention: SignConvention) -> ShapeDerivativeReport {
        ShapeDerivativeReport {
            sign_convention: convention,
            ..self.clone()
        }
    }
}

/// Simulates the V-independent parts once (constants, initial points,
/// exit-kill variables) and evaluates `DPhi[V]` for any number of fields.
#[derive(Debug, Clone)]
pub struct ShapeDerivativeEngine {
    problem: Problem,
    config: EngineConfig,
    constants: ConstantsEstimate,
    plus: Option<SideSamples>,
    minus: Option<SideSamples>,
    quad: BoundaryQuadrature,
}

impl ShapeDerivativeEngine {
    pub fn build(problem: Problem, config: EngineConfig) -> Result<Self> {
        config.sim.validate()?;
        if config.n_paths == 0 {
            return Err(Error::Config("n_paths must be positive".into()));
        }
        let constants = estimate_constants(
            &problem,
            config.n_constant_samples,
            config.sim.seed,
            config.sim.backend,
        )?;
        let quad = circle_quadrature(config.quad_nodes)?;
        let side = |side: Side, tag: u64| -> Result<Option<SideSamples>> {
            let sampler = InitialSampler::new(&problem, side);
            if sampler.is_void() || constants.get(side).value == 0.0 {
                return Ok(None);
            }
            let start = |rng: &mut PathRng| sampler.sample(&problem, rng).map(|(x, _)| x);
            let ends = simulate_ends(
                &problem,
                &config.sim,
                config.representation.clock(),
                tag,
                config.n_paths,
                &start,
            )?;
            Ok(Some(SideSamples {
                ends,
                envelope: sampler.envelope,
            }))
        };
        let plus = side(Side::Plus, purpose::PLUS_SIDE)?;
        let minus = side(Side::Minus, purpose::MINUS_SIDE)?;
        Ok(ShapeDerivativeEngine {
            problem,
            config,
            constants,
            plus,
            minus,
            quad,
        })
    }

    pub fn constants(&self) -> &ConstantsEstimate {
        &self.constants
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn envelope(&self, side: Side) -> Option<f64> {
        self.side(side).map(|s| s.envelope)
    }

    fn side(&self, side: Side) -> Option<&SideSamples> {
        match side {
            Side::Plus => self.plus.as_ref(),
            Side::Minus => self.minus.as_ref(),
        }
    }

    /// Exit points of contributing (exited) paths on a side.
    pub fn exit_points(&self, side: Side) -> Vec<Point> {
        self.side(side)
            .map(|s| {
                s.ends
                    .iter()
                    .filter_map(|e| match e {
                        PathEnd::Exit(p, _) => Some(*p),
                        _ => None,
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    /// `E[<V, grad u - grad g>(X^side)]`; a void side gives an exact 0.
    pub fn boundary_expectation(&self, side: Side, field: &PerturbationField) -> Estimate {
        match self.side(side) {
            None => Estimate::exact(0.0, self.config.sim.seed),
            Some(s) => reduce_ends(
                &s.ends,
                &self.config.sim,
                |y| self.problem.boundary_integrand(y, &field.eval(y)),
                self.config.representation == Representation::Weight,
            ),
        }
    }

    pub fn surface_term(&self, field: &PerturbationField) -> f64 {
        surface_term(&self.problem, field, &self.quad)
    }

    pub fn dphi(&self, field: &PerturbationField) -> ShapeDerivativeReport {
        let e_plus = self.boundary_expectation(Side::Plus, field);
        let e_minus = self.boundary_expectation(Side::Minus, field);
        let surface = self.surface_term(field);
        let (cp, cm) = (&self.constants.c_plus, &self.constants.c_minus);
        let value = cp.value * e_plus.value - cm.value * e_minus.value - surface;
        // delta method over independent path sets and correlated constants
        let var = (cp.value * e_plus.stderr).powi(2)
            + (cm.value * e_minus.stderr).powi(2)
            + (e_plus.value * cp.stderr).powi(2)
            + (e_minus.value * cm.stderr).powi(2)
            - 2.0 * e_plus.value * e_minus.value * self.constants.covariance;
        let n_truncated = e_plus.n_truncated + e_minus.n_truncated;
        let n_effective = e_plus.n_effective + e_minus.n_effective;
        let dphi_free = Estimate {
            value,
            stderr: var.max(0.0).sqrt(),
            n_effective,
            n_truncated,
            seed: self.config.sim.seed,
            flagged: e_plus.flagged || e_minus.flagged,
        };
        ShapeDerivativeReport {
            direction: field.name().to_string(),
            dphi_free,
            surface_term: surface,
            boundary_expectation_plus: e_plus,
            boundary_expectation_minus: e_minus,
            c_plus: *cp,
            c_minus: *cm,
            sign_convention: SignConvention::Preimage,
        }
    }
}

/// One-shot `DPhi[V]`; build a [`ShapeDerivativeEngine`] to reuse samples.
pub fn dphi_free(
    problem: Problem,
    field: &PerturbationField,
    config: EngineConfig,
) -> Result<ShapeDerivativeReport> {
    Ok(ShapeDerivativeEngine::build(problem, config)?.dphi(field))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbationMode {
    /// The perturbed domains grow along `V`.
    Inflating,
    /// The perturbed domains shrink along `V`.
    Deflating,
}

/// `lim eps^-1 E|tau_eps - tau|` as `+-E[<grad u, V>(X_tau)]` for the Poisson
/// exit-time problem `L[u] + 1 = 0`, `u = 0` on the boundary.
pub fn exit_time_l1_derivative(
    problem: &Problem,
    x: &Point,
    field: &PerturbationField,
    mode: PerturbationMode,
    n_paths: usize,
    cfg: &SimConfig,
) -> Result<Estimate> {
    if problem.coeffs.semilinear {
        return Err(Error::Unsupported(
            "exit-time derivative needs f = 1 and no killing".into(),
        ));
    }
    let mut est = du_at(problem, x, field, n_paths, cfg, Representation::Weight)?;
    if mode == PerturbationMode::Deflating {
        est.value = -est.value;
    }
    Ok(est)
}

/// Kill-based and weight-based estimates of `E[eta(X^)]` under intensity
/// `zeta`, each on its own path set.
pub fn kill_weight_equivalence(
    problem: &Problem,
    intensity: &(dyn Fn(&Point) -> f64 + Sync),
    eta: &(dyn Fn(&Point) -> f64 + Sync),
    x: &Point,
    n_paths: usize,
    cfg: &SimConfig,
) -> Result<(Estimate, Estimate)> {
    cfg.validate()?;
    let zeta = |p: &Point| {
        let z = intensity(p);
        if z < 0.0 || z.is_nan() {
            Err(Error::Coefficient(format!(
                "negative killing intensity {z}"
            )))
        } else {
            Ok(z)
        }
    };
    let run = |clock, tag| -> Result<Vec<PathEnd>> {
        let driver = PathDriver {
            domain: &problem.domain,
            coeffs: &problem.coeffs,
            intensity: &zeta,
            running_cost: None,
            clock,
            cfg,
        };
        try_map_indices(cfg.backend, n_paths, |i| {
            let mut rng = PathRng::for_path(cfg, tag, i as u64);
            let out = driver.run(x, &mut rng)?;
            Ok(match out.status {
                ExitStatus::Exited(p) => PathEnd::Exit(p, out.survival_weight()),
                ExitStatus::Killed => PathEnd::Killed,
                ExitStatus::Truncated => PathEnd::Truncated,
            })
        })
    };
    let killed = run(ClockMode::Kill, purpose::KILL_SET)?;
    let weighted = run(ClockMode::Accumulate, purpose::WEIGHT_SET)?;
    Ok((
        reduce_ends(&killed, cfg, eta, false),
        reduce_ends(&weighted, cfg, eta, true),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{PdeCoefficients, TrackingData};
    use crate::geometry::Direction;
    use std::f64::consts::PI;

    fn cfg() -> SimConfig {
        SimConfig::default()
    }

    #[test]
    fn estimate_statistics() {
        let e = Estimate::from_samples(&[1.0, 2.0, 3.0, 4.0], 0, 9);
        assert_eq!(e.value, 2.5);
        assert!((e.stderr - (5.0_f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
        assert!(!e.flagged);
        let f = Estimate::from_samples(&[1.0; 10], 1, 9);
        assert!(f.flagged);
    }

    #[test]
    fn du_zero_field_is_exactly_zero() {
        let p = Problem::benchmark();
        let e = du_at(
            &p,
            &Point::new(0.2, 0.3),
            &PerturbationField::zero(),
            500,
            &cfg(),
            Representation::Weight,
        )
        .unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.stderr, 0.0);
    }

    #[test]
    fn du_outward_normal_from_centre() {
        let p = Problem::benchmark();
        let v1 = PerturbationField::builtin(Direction::V1);
        let e = du_at(
            &p,
            &Point::zeros(),
            &v1,
            2000,
            &cfg(),
            Representation::Weight,
        )
        .unwrap();
        assert!((e.value + 0.5).abs() < 1e-12);
        assert!(e.stderr < 1e-12);
    }

    #[test]
    fn du_translation_vanishes_by_symmetry() {
        let p = Problem::benchmark();
        let v5 = PerturbationField::builtin(Direction::V5);
        let e = du_at(
            &p,
            &Point::zeros(),
            &v5,
            20_000,
            &cfg(),
            Representation::Weight,
        )
        .unwrap();
        assert!(e.value.abs() < 3.0 * e.stderr, "{e}");
    }

    #[test]
    fn du_outside_is_an_error() {
        let p = Problem::benchmark();
        let v1 = PerturbationField::builtin(Direction::V1);
        assert!(du_at(
            &p,
            &Point::new(1.0, 0.0),
            &v1,
            10,
            &cfg(),
            Representation::Weight
        )
        .is_err());
    }

    #[test]
    fn du_respects_sup_bound_per_path() {
        // |<grad u, V>| <= sup over the circle, checked on every exit point
        let p = Problem::benchmark();
        let v = PerturbationField::builtin(Direction::V3);
        let quad = circle_quadrature(4096).unwrap();
        let sup = quad
            .nodes
            .iter()
            .map(|y| p.boundary_integrand(y, &v.eval(y)).abs())
            .fold(0.0, f64::max);
        let x = Point::new(0.3, -0.4);
        let start = |_: &mut PathRng| Ok(x);
        let ends = simulate_ends(&p, &cfg(), ClockMode::Accumulate, 1, 3000, &start).unwrap();
        for end in ends {
            if let PathEnd::Exit(y, w) = end {
                assert!((w * p.boundary_integrand(&y, &v.eval(&y))).abs() <= sup * (1.0 + 1e-6));
            }
        }
    }

    #[test]
    fn surface_term_examples() {
        let p = Problem::benchmark();
        let quad = circle_quadrature(720).unwrap();
        assert_eq!(surface_term(&p, &PerturbationField::zero(), &quad), 0.0);
        let rot = surface_term(&p, &PerturbationField::rotation(), &quad);
        assert!(rot.abs() < 1e-12);
        // int 1/2 u_target^2 over the circle is 35 pi / 128
        let v1 = surface_term(&p, &PerturbationField::builtin(Direction::V1), &quad);
        assert!((v1 - 35.0 * PI / 128.0).abs() < 1e-8);
    }

    #[test]
    fn kill_and_weight_coincide_without_killing() {
        let p = Problem::benchmark();
        let cfg = cfg();
        let eta = |y: &Point| y.x;
        let (k, w) =
            kill_weight_equivalence(&p, &|_| 0.0, &eta, &Point::new(0.1, 0.2), 2000, &cfg).unwrap();
        // same law; with zero intensity each set is a plain exit sample
        assert!((k.value - w.value).abs() < 3.0 * (k.stderr.powi(2) + w.stderr.powi(2)).sqrt());
        let start = |_: &mut PathRng| Ok(Point::new(0.1, 0.2));
        let a = simulate_ends(&p, &cfg, ClockMode::Kill, 3, 500, &start).unwrap();
        let b = simulate_ends(&p, &cfg, ClockMode::Accumulate, 3, 500, &start).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kill_and_weight_agree_with_constant_intensity() {
        let p = Problem::benchmark();
        let (k, w) =
            kill_weight_equivalence(&p, &|_| 2.0, &|_| 1.0, &Point::zeros(), 40_000, &cfg())
                .unwrap();
        let tol = 3.0 * (k.stderr.powi(2) + w.stderr.powi(2)).sqrt();
        assert!((k.value - w.value).abs() < tol, "{k} vs {w}");
        let (k, w) =
            kill_weight_equivalence(&p, &|_| 2.0, &|y| y.x, &Point::zeros(), 40_000, &cfg())
                .unwrap();
        assert!(k.value.abs() < 3.0 * k.stderr && w.value.abs() < 3.0 * w.stderr);
    }

    #[test]
    fn exit_time_derivative_examples() {
        let p = Problem::benchmark();
        let v1 = PerturbationField::builtin(Direction::V1);
        let d = exit_time_l1_derivative(
            &p,
            &Point::zeros(),
            &v1,
            PerturbationMode::Deflating,
            1000,
            &cfg(),
        )
        .unwrap();
        assert!((d.value - 0.5).abs() < 1e-12);
        let i = exit_time_l1_derivative(
            &p,
            &Point::zeros(),
            &v1,
            PerturbationMode::Inflating,
            1000,
            &cfg(),
        )
        .unwrap();
        assert!((i.value + 0.5).abs() < 1e-12);
        let z = exit_time_l1_derivative(
            &p,
            &Point::zeros(),
            &PerturbationField::zero(),
            PerturbationMode::Deflating,
            100,
            &cfg(),
        )
        .unwrap();
        assert_eq!(z.value, 0.0);
        let r = exit_time_l1_derivative(
            &p,
            &Point::zeros(),
            &PerturbationField::rotation(),
            PerturbationMode::Deflating,
            5000,
            &cfg(),
        )
        .unwrap();
        assert!(r.value.abs() < 3.0 * r.stderr + 1e-12);
        let killing = Problem {
            coeffs: PdeCoefficients::with_constant_killing(1.0),
            ..Problem::benchmark()
        };
        assert!(matches!(
            exit_time_l1_derivative(
                &killing,
                &Point::zeros(),
                &v1,
                PerturbationMode::Deflating,
                10,
                &cfg()
            ),
            Err(Error::Unsupported(_))
        ));
    }

    fn small_engine(problem: Problem) -> ShapeDerivativeEngine {
        ShapeDerivativeEngine::build(
            problem,
            EngineConfig {
                n_paths: 4000,
                n_constant_samples: 100_000,
                ..EngineConfig::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_direction_gives_exact_zero() {
        let engine = small_engine(Problem::benchmark());
        let r = engine.dphi(&PerturbationField::zero());
        assert_eq!(r.dphi_free.value, 0.0);
        assert_eq!(r.surface_term, 0.0);
        assert_eq!(r.boundary_expectation_plus.value, 0.0);
        assert_eq!(r.boundary_expectation_minus.value, 0.0);
        assert_eq!(r.dphi_free.stderr, 0.0);
    }

    #[test]
    fn report_assembly_and_sign_duality() {
        let engine = small_engine(Problem::benchmark());
        let r = engine.dphi(&PerturbationField::builtin(Direction::V3));
        let assembled = r.c_plus.value * r.boundary_expectation_plus.value
            - r.c_minus.value * r.boundary_expectation_minus.value
            - r.surface_term;
        assert_eq!(r.dphi_free.value, assembled);
        let push = r.in_convention(SignConvention::Pushforward);
        assert_eq!(push.value().to_bits(), (-r.value()).to_bits());
    }

    #[test]
    fn boundary_expectations_are_linear_in_v() {
        let engine = small_engine(Problem::benchmark());
        let v1 = PerturbationField::builtin(Direction::V1);
        let v5 = PerturbationField::builtin(Direction::V5);
        let combo = PerturbationField::linear_combo(vec![(2.0, v1.clone()), (-3.0, v5.clone())]);
        for side in [Side::Plus, Side::Minus] {
            let c = engine.boundary_expectation(side, &combo).value;
            let a = engine.boundary_expectation(side, &v1).value;
            let b = engine.boundary_expectation(side, &v5).value;
            assert!((c - (2.0 * a - 3.0 * b)).abs() < 1e-12);
        }
    }

    #[test]
    fn exit_points_lie_on_the_circle() {
        let engine = small_engine(Problem::benchmark());
        for side in [Side::Plus, Side::Minus] {
            let pts = engine.exit_points(side);
            assert!(!pts.is_empty());
            assert!(pts.iter().all(|y| (y.norm() - 1.0).abs() <= 1e-10));
        }
    }

    #[test]
    fn void_minus_side_is_skipped() {
        let engine = small_engine(Problem::benchmark().with_tracking(TrackingData::zero()));
        let r = engine.dphi(&PerturbationField::builtin(Direction::V1));
        assert_eq!(r.c_minus.value, 0.0);
        assert_eq!(r.boundary_expectation_minus.value, 0.0);
        // -C+ / 2 with zero surface term: C+ = pi / 8
        assert!((r.dphi_free.value + PI / 16.0).abs() < 3.0 * r.dphi_free.stderr + 1e-3);
    }

    #[test]
    fn killed_paths_contribute_zero() {
        let p = Problem {
            coeffs: PdeCoefficients::with_constant_killing(1e9),
            ..Problem::benchmark()
        };
        let e = du_at(
            &p,
            &Point::zeros(),
            &PerturbationField::builtin(Direction::V1),
            200,
            &cfg(),
            Representation::Kill,
        )
        .unwrap();
        assert_eq!(e.value, 0.0);
    }
}
