use std::sync::Arc;

use crate::fields::{benchmark_solution, PdeCoefficients, SolutionField, TrackingData};
use crate::geometry::{Domain, Point};

/// A state equation on a domain together with its tracking functional
/// `Phi(u) = int 1/2 |u - u_target|^2`.
#[derive(Clone)]
pub struct Problem {
    pub domain: Domain,
    pub coeffs: PdeCoefficients,
    pub solution: Arc<dyn SolutionField>,
    pub tracking: TrackingData,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem")
            .field("domain", &self.domain)
            .field("coeffs", &self.coeffs)
            .finish_non_exhaustive()
    }
}

impl Problem {
    /// Unit disk, `Delta u + 1 = 0`, `u = 0` on the circle, target
    /// `x1 (1 - x1) x2 (1 - x2)`.
    pub fn benchmark() -> Self {
        Problem {
            domain: Domain::unit_disk(),
            coeffs: PdeCoefficients::benchmark(),
            solution: Arc::new(benchmark_solution()),
            tracking: TrackingData::benchmark(),
        }
    }

    pub fn with_tracking(mut self, tracking: TrackingData) -> Self {
        self.tracking = tracking;
        self
    }

    pub fn with_solution(mut self, solution: Arc<dyn SolutionField>) -> Self {
        self.solution = solution;
        self
    }

    /// `d_u phi(x, u(x)) = u(x) - u_target(x)`.
    pub fn sensitivity_weight(&self, x: &Point) -> f64 {
        self.solution.u(x) - self.tracking.value(x)
    }

    /// Integrand `<grad u - grad g, V>` of the boundary expectations.
    pub fn boundary_integrand(&self, y: &Point, v: &crate::geometry::Vector) -> f64 {
        (self.solution.grad_u(y) - (self.coeffs.grad_g)(y)).dot(v)
    }
}
