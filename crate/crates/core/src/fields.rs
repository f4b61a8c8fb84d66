//! PDE coefficients, solution providers and tracking data.
//!
//! The state equation is `L[u] + f(x, u) = 0` in the domain with `u = g` on
//! the boundary, where `L = mu . grad + 1/2 tr(sigma sigma^T Hess)`.

use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use nalgebra::Matrix2;

use crate::error::{Error, Result};
use crate::geometry::{Point, Vector};

type ScalarFn = Arc<dyn Fn(&Point) -> f64 + Send + Sync>;
type VecFn = Arc<dyn Fn(&Point) -> Vector + Send + Sync>;
type MatFn = Arc<dyn Fn(&Point) -> Matrix2<f64> + Send + Sync>;
type SemilinearFn = Arc<dyn Fn(&Point, f64) -> f64 + Send + Sync>;

/// Coefficients `mu, sigma, f, d_u f, g, grad g` of the state equation.
#[derive(Clone)]
pub struct PdeCoefficients {
    pub mu: VecFn,
    pub sigma: MatFn,
    pub f: SemilinearFn,
    pub df_du: SemilinearFn,
    pub g: ScalarFn,
    pub grad_g: VecFn,
    /// False when `f` does not depend on `u`; such equations are linear
    /// Poisson-type problems with no killing.
    pub semilinear: bool,
}

impl std::fmt::Debug for PdeCoefficients {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PdeCoefficients")
            .field("semilinear", &self.semilinear)
            .finish_non_exhaustive()
    }
}

impl PdeCoefficients {
    /// `mu = 0, sigma = sqrt(2) I, f = 1, g = 0`: the generator is the
    /// Laplacian and the solution on the unit disk is `(1 - |x|^2) / 4`.
    pub fn benchmark() -> Self {
        let s = std::f64::consts::SQRT_2;
        PdeCoefficients {
            mu: Arc::new(|_| Vector::zeros()),
            sigma: Arc::new(move |_| Matrix2::identity() * s),
            f: Arc::new(|_, _| 1.0),
            df_du: Arc::new(|_, _| 0.0),
            g: Arc::new(|_| 0.0),
            grad_g: Arc::new(|_| Vector::zeros()),
            semilinear: false,
        }
    }

    /// Benchmark diffusion with `f(x, u) = 1 - c u`, i.e. constant killing
    /// intensity `c >= 0`.
    pub fn with_constant_killing(c: f64) -> Self {
        PdeCoefficients {
            f: Arc::new(move |_, u| 1.0 - c * u),
            df_du: Arc::new(move |_, _| -c),
            semilinear: c != 0.0,
            ..Self::benchmark()
        }
    }

    /// Killing intensity `-d_u f(x, u(x))`, rejecting violations of
    /// `d_u f <= 0`.
    pub fn killing_intensity(&self, x: &Point, u: f64) -> Result<f64> {
        let d = (self.df_du)(x, u);
        if d > 0.0 || d.is_nan() {
            return Err(Error::Coefficient(format!(
                "d_u f = {d} > 0 at ({}, {}); the equation must be monotone",
                x.x, x.y
            )));
        }
        Ok(-d)
    }
}

/// Converts `v . grad u + div(K grad u)` into generator form:
/// `sigma = sqrt(2) chol(K)`, `mu = v + div K`.
///
/// `K` is checked for positive definiteness at every probe point.
pub fn convert_convection_diffusion<K, V, D>(
    k: K,
    v: V,
    div_k: D,
    probes: &[Point],
) -> Result<(VecFn, MatFn)>
where
    K: Fn(&Point) -> Matrix2<f64> + Send + Sync + 'static,
    V: Fn(&Point) -> Vector + Send + Sync + 'static,
    D: Fn(&Point) -> Vector + Send + Sync + 'static,
{
    for p in probes {
        let m = k(p);
        if (m - m.transpose()).abs().max() > 1e-12 * m.abs().max().max(1.0)
            || m.cholesky().is_none()
        {
            return Err(Error::Coefficient(format!(
                "diffusion matrix is not symmetric positive definite at ({}, {})",
                p.x, p.y
            )));
        }
    }
    let s = std::f64::consts::SQRT_2;
    let sigma: MatFn = Arc::new(move |x| {
        let factor = k(x)
            .cholesky()
            .expect("diffusion matrix lost positive definiteness")
            .l();
        factor * s
    });
    let mu: VecFn = Arc::new(move |x| v(x) + div_k(x));
    Ok((mu, sigma))
}

/// Provider of `u` and `grad u`, possibly beyond the closure of the domain.
pub trait SolutionField: Send + Sync {
    fn u(&self, x: &Point) -> f64;
    fn grad_u(&self, x: &Point) -> Vector;
}

/// `u(x) = (R^2 - |x|^2) / 4`, the Poisson solution on the ball of radius
/// `R` about the origin. Globally smooth, so it is its own extension.
#[derive(Debug, Clone, Copy)]
pub struct RadialSolution {
    pub radius: f64,
}

impl RadialSolution {
    pub fn benchmark() -> Self {
        RadialSolution { radius: 1.0 }
    }
}

impl SolutionField for RadialSolution {
    fn u(&self, x: &Point) -> f64 {
        0.25 * (self.radius * self.radius - x.norm_squared())
    }

    fn grad_u(&self, x: &Point) -> Vector {
        -x * 0.5
    }
}

pub fn benchmark_solution() -> RadialSolution {
    RadialSolution::benchmark()
}

/// Target data of the tracking functional `1/2 |u - u_target|^2`.
#[derive(Clone)]
pub struct TrackingData {
    target: ScalarFn,
}

impl std::fmt::Debug for TrackingData {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("TrackingData")
    }
}

impl TrackingData {
    /// `x1 (1 - x1) x2 (1 - x2)`.
    pub fn benchmark() -> Self {
        Self::from_fn(|x| x.x * (1.0 - x.x) * x.y * (1.0 - x.y))
    }

    pub fn zero() -> Self {
        Self::from_fn(|_| 0.0)
    }

    pub fn from_fn<F: Fn(&Point) -> f64 + Send + Sync + 'static>(f: F) -> Self {
        TrackingData {
            target: Arc::new(f),
        }
    }

    pub fn value(&self, x: &Point) -> f64 {
        (self.target)(x)
    }
}

/// Bilinear interpolant of samples on a regular grid.
#[derive(Debug, Clone)]
pub struct GridField {
    origin: Point,
    h: f64,
    nx: usize,
    ny: usize,
    /// Row-major, `x` fastest.
    values: Vec<f64>,
}

impl GridField {
    pub fn new(origin: Point, h: f64, nx: usize, ny: usize, values: Vec<f64>) -> Result<Self> {
        if nx < 2 || ny < 2 || values.len() != nx * ny || h.is_nan() || h <= 0.0 {
            return Err(Error::Field(format!(
                "invalid grid: {nx} x {ny} nodes, {} values, spacing {h}",
                values.len()
            )));
        }
        Ok(GridField {
            origin,
            h,
            nx,
            ny,
            values,
        })
    }

    /// Tabulates `f` on `[lo, hi]^2` with `n` nodes per axis.
    pub fn tabulate<F: Fn(&Point) -> f64>(lo: f64, hi: f64, n: usize, f: F) -> Result<Self> {
        let h = (hi - lo) / (n - 1) as f64;
        let mut values = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                values.push(f(&Point::new(lo + i as f64 * h, lo + j as f64 * h)));
            }
        }
        Self::new(Point::new(lo, lo), h, n, n, values)
    }

    /// Reads a `x,y,u` CSV, row-major over a regular grid.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["x", "y", "u"] {
            return Err(Error::Field(format!(
                "grid CSV header must be x,y,u, got {}",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| Error::Field(format!("bad number '{}': {e}", &rec[i])))
            };
            rows.push((parse(0)?, parse(1)?, parse(2)?));
        }
        if rows.len() < 4 {
            return Err(Error::Field("grid CSV has fewer than 4 rows".into()));
        }
        let (x0, y0, _) = rows[0];
        let nx = rows.iter().take_while(|r| r.1 == y0).count();
        if nx < 2 || rows.len() % nx != 0 {
            return Err(Error::Field(
                "grid CSV is not a complete row-major grid".into(),
            ));
        }
        let ny = rows.len() / nx;
        let h = rows[1].0 - x0;
        const TOL: f64 = 1e-9;
        for (k, &(x, y, _)) in rows.iter().enumerate() {
            let (i, j) = (k % nx, k / nx);
            if (x - (x0 + i as f64 * h)).abs() > TOL || (y - (y0 + j as f64 * h)).abs() > TOL {
                return Err(Error::Field(format!(
                    "non-uniform grid spacing at row {} ({x}, {y})",
                    k + 2
                )));
            }
        }
        Self::new(
            Point::new(x0, y0),
            h,
            nx,
            ny,
            rows.into_iter().map(|r| r.2).collect(),
        )
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path.as_ref())?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }

    pub fn spacing(&self) -> f64 {
        self.h
    }

    fn covers(&self, x: &Point) -> bool {
        let rel = (x - self.origin) / self.h;
        rel.x >= 0.0
            && rel.y >= 0.0
            && rel.x <= (self.nx - 1) as f64
            && rel.y <= (self.ny - 1) as f64
    }

    /// Interpolated value, or a field error outside the grid.
    pub fn try_u(&self, x: &Point) -> Result<f64> {
        if !self.covers(x) {
            return Err(Error::Field(format!(
                "query ({}, {}) outside grid coverage",
                x.x, x.y
            )));
        }
        let rel = (x - self.origin) / self.h;
        let i = (rel.x.floor() as usize).min(self.nx - 2);
        let j = (rel.y.floor() as usize).min(self.ny - 2);
        let (fx, fy) = (rel.x - i as f64, rel.y - j as f64);
        let at = |i: usize, j: usize| self.values[j * self.nx + i];
        Ok((1.0 - fx) * (1.0 - fy) * at(i, j)
            + fx * (1.0 - fy) * at(i + 1, j)
            + (1.0 - fx) * fy * at(i, j + 1)
            + fx * fy * at(i + 1, j + 1))
    }

    /// Central difference of the interpolant with half-spacing offsets.
    pub fn try_grad_u(&self, x: &Point) -> Result<Vector> {
        let d = 0.5 * self.h;
        let ex = Vector::new(d, 0.0);
        let ey = Vector::new(0.0, d);
        Ok(Vector::new(
            (self.try_u(&(x + ex))? - self.try_u(&(x - ex))?) / (2.0 * d),
            (self.try_u(&(x + ey))? - self.try_u(&(x - ey))?) / (2.0 * d),
        ))
    }
}

impl SolutionField for GridField {
    /// Panics outside the grid; use [`GridField::try_u`] to handle that case.
    fn u(&self, x: &Point) -> f64 {
        self.try_u(x).unwrap_or_else(|e| panic!("{e}"))
    }

    fn grad_u(&self, x: &Point) -> Vector {
        self.try_grad_u(x).unwrap_or_else(|e| panic!("{e}"))
    }
}
