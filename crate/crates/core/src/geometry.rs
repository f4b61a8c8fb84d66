//! Domains, perturbation fields and boundary quadrature.
//!
//! A perturbed domain is the pre-image `{x : x + eps V(x) in base}` of a base
//! domain, so a positive `eps` along an outward field shrinks the region.
//! Domains are open: boundary points are never contained.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};

pub type Point = Vector2<f64>;
pub type Vector = Vector2<f64>;

/// Half-width of the hold-all box `[-2, 2]^2` used for field bounds.
pub const HOLD_ALL_HALF_WIDTH: f64 = 2.0;
const BOUND_GRID: usize = 201;

/// The eight benchmark directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    V1,
    V2,
    V3,
    V4,
    V5,
    V6,
    V7,
    V8,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::V1,
        Direction::V2,
        Direction::V3,
        Direction::V4,
        Direction::V5,
        Direction::V6,
        Direction::V7,
        Direction::V8,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Direction::V1 => "V1",
            Direction::V2 => "V2",
            Direction::V3 => "V3",
            Direction::V4 => "V4",
            Direction::V5 => "V5",
            Direction::V6 => "V6",
            Direction::V7 => "V7",
            Direction::V8 => "V8",
        }
    }

    fn eval(self, x: &Point) -> Vector {
        let (x1, x2) = (x.x, x.y);
        match self {
            Direction::V1 => *x,
            Direction::V2 => Vector::new(x1 - x2, x2 - x1),
            Direction::V3 => Vector::new(x1.cos(), x2.sin()),
            Direction::V4 => Vector::new(x1 * x2, x2),
            Direction::V5 => Vector::new(1.0, 0.0),
            Direction::V6 => x * x1,
            Direction::V7 => Vector::new(0.3 - x1, 0.2 - x2),
            Direction::V8 => {
                if x1 == 0.0 && x2 == 0.0 {
                    return Vector::zeros();
                }
                // angle measured from the x2 axis, i.e. atan2(x1, x2)
                x * (6.0 * x1.atan2(x2)).sin()
            }
        }
    }

    fn jacobian(self, x: &Point) -> Matrix2<f64> {
        let (x1, x2) = (x.x, x.y);
        match self {
            Direction::V1 => Matrix2::identity(),
            Direction::V2 => Matrix2::new(1.0, -1.0, -1.0, 1.0),
            Direction::V3 => Matrix2::new(-x1.sin(), 0.0, 0.0, x2.cos()),
            Direction::V4 => Matrix2::new(x2, x1, 0.0, 1.0),
            Direction::V5 => Matrix2::zeros(),
            Direction::V6 => Matrix2::new(2.0 * x1, 0.0, x2, x1),
            Direction::V7 => -Matrix2::identity(),
            Direction::V8 => {
                let r2 = x1 * x1 + x2 * x2;
                if r2 == 0.0 {
                    return Matrix2::zeros();
                }
                let theta = x1.atan2(x2);
                let s = (6.0 * theta).sin();
                let c = (6.0 * theta).cos();
                let grad_theta = Vector::new(x2 / r2, -x1 / r2);
                Matrix2::identity() * s + (x * grad_theta.transpose()) * (6.0 * c)
            }
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

type VecFn = Arc<dyn Fn(&Point) -> Vector + Send + Sync>;
type JacFn = Arc<dyn Fn(&Point) -> Matrix2<f64> + Send + Sync>;

#[derive(Clone)]
enum FieldKind {
    Zero,
    Builtin(Direction),
    /// Rigid rotation `(-x2, x1)`, tangential on every circle about 0.
    Rotation,
    Combo(Vec<(f64, PerturbationField)>),
    Custom {
        eval: VecFn,
        jacobian: JacFn,
    },
}

/// A smooth vector field `V` together with computable bounds.
#[derive(Clone)]
pub struct PerturbationField {
    name: String,
    kind: FieldKind,
    sup_norm: f64,
    lipschitz: f64,
}

impl fmt::Debug for PerturbationField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PerturbationField")
            .field("name", &self.name)
            .field("sup_norm", &self.sup_norm)
            .field("lipschitz", &self.lipschitz)
            .finish()
    }
}

impl PerturbationField {
    fn from_kind(name: String, kind: FieldKind) -> Self {
        let mut field = PerturbationField {
            name,
            kind,
            sup_norm: 0.0,
            lipschitz: 0.0,
        };
        let (sup, lip) = field.scan_bounds();
        field.sup_norm = sup;
        field.lipschitz = lip;
        field
    }

    pub fn builtin(direction: Direction) -> Self {
        Self::from_kind(direction.name().to_string(), FieldKind::Builtin(direction))
    }

    pub fn zero() -> Self {
        Self::from_kind("V0".to_string(), FieldKind::Zero)
    }

    pub fn rotation() -> Self {
        Self::from_kind("rot".to_string(), FieldKind::Rotation)
    }

    pub fn linear_combo(terms: Vec<(f64, PerturbationField)>) -> Self {
        let name = terms
            .iter()
            .map(|(c, f)| format!("{c}*{}", f.name))
            .collect::<Vec<_>>()
            .join("+");
        Self::from_kind(name, FieldKind::Combo(terms))
    }

    pub fn custom<F, J>(name: impl Into<String>, eval: F, jacobian: J) -> Self
    where
        F: Fn(&Point) -> Vector + Send + Sync + 'static,
        J: Fn(&Point) -> Matrix2<f64> + Send + Sync + 'static,
    {
        Self::from_kind(
            name.into(),
            FieldKind::Custom {
                eval: Arc::new(eval),
                jacobian: Arc::new(jacobian),
            },
        )
    }

    /// Parses `V0`..`V8`, `rot`, or a linear combination such as `2*V1-3*V5`.
    pub fn parse(spec: &str) -> Result<Self> {
        let s: String = spec.chars().filter(|c| !c.is_whitespace()).collect();
        if s.is_empty() {
            return Err(Error::Config("empty direction".into()));
        }
        if let Some(field) = Self::parse_atom(&s) {
            return Ok(field);
        }
        let mut terms = Vec::new();
        let mut start = 0;
        let bytes = s.as_bytes();
        for i in 1..=bytes.len() {
            // split before a sign that is not part of an exponent
            let at_end = i == bytes.len();
            let split = at_end
                || ((bytes[i] == b'+' || bytes[i] == b'-')
                    && !matches!(bytes[i - 1], b'e' | b'E' | b'*'));
            if split {
                terms.push(Self::parse_term(&s[start..i], spec)?);
                start = i;
            }
        }
        Ok(Self::linear_combo(terms))
    }

    fn parse_atom(s: &str) -> Option<Self> {
        match s {
            "V0" | "v0" | "0" => Some(Self::zero()),
            "rot" => Some(Self::rotation()),
            _ => Direction::ALL
                .iter()
                .find(|d| d.name().eq_ignore_ascii_case(s))
                .map(|&d| Self::builtin(d)),
        }
    }

    fn parse_term(term: &str, whole: &str) -> Result<(f64, Self)> {
        let bad = || Error::Config(format!("cannot parse direction '{whole}'"));
        let (sign, body) = match term.as_bytes().first() {
            Some(b'+') => (1.0, &term[1..]),
            Some(b'-') => (-1.0, &term[1..]),
            _ => (1.0, term),
        };
        let (coef, atom) = match body.split_once('*') {
            Some((c, a)) => (c.parse::<f64>().map_err(|_| bad())?, a),
            None => (1.0, body),
        };
        let field = Self::parse_atom(atom).ok_or_else(bad)?;
        Ok((sign * coef, field))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn eval(&self, x: &Point) -> Vector {
        match &self.kind {
            FieldKind::Zero => Vector::zeros(),
            FieldKind::Builtin(d) => d.eval(x),
            FieldKind::Rotation => Vector::new(-x.y, x.x),
            FieldKind::Combo(terms) => terms
                .iter()
                .fold(Vector::zeros(), |acc, (c, f)| acc + f.eval(x) * *c),
            FieldKind::Custom { eval, .. } => eval(x),
        }
    }

    pub fn jacobian(&self, x: &Point) -> Matrix2<f64> {
        match &self.kind {
            FieldKind::Zero => Matrix2::zeros(),
            FieldKind::Builtin(d) => d.jacobian(x),
            FieldKind::Rotation => Matrix2::new(0.0, -1.0, 1.0, 0.0),
            FieldKind::Combo(terms) => terms
                .iter()
                .fold(Matrix2::zeros(), |acc, (c, f)| acc + f.jacobian(x) * *c),
            FieldKind::Custom { jacobian, .. } => jacobian(x),
        }
    }

    /// The benchmark direction this field is, if it is one.
    pub fn direction(&self) -> Option<Direction> {
        match self.kind {
            FieldKind::Builtin(d) => Some(d),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, FieldKind::Zero)
    }

    /// `sup |V|` over the hold-all box.
    pub fn sup_norm(&self) -> f64 {
        self.sup_norm
    }

    /// Max Jacobian operator norm over the hold-all box.
    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz
    }

    /// Largest admissible `|eps|`; `I + eps DV` stays invertible below it.
    pub fn eps_max(&self) -> f64 {
        if self.lipschitz > 0.0 {
            0.9 / self.lipschitz
        } else {
            f64::INFINITY
        }
    }

    fn scan_bounds(&self) -> (f64, f64) {
        let h = 2.0 * HOLD_ALL_HALF_WIDTH / (BOUND_GRID - 1) as f64;
        let mut sup = 0.0_f64;
        let mut lip = 0.0_f64;
        for i in 0..BOUND_GRID {
            for j in 0..BOUND_GRID {
                let x = Point::new(
                    -HOLD_ALL_HALF_WIDTH + i as f64 * h,
                    -HOLD_ALL_HALF_WIDTH + j as f64 * h,
                );
                sup = sup.max(self.eval(&x).norm());
                lip = lip.max(operator_norm(&self.jacobian(&x)));
            }
        }
        (sup, lip)
    }
}

/// Spectral norm of a 2x2 matrix.
pub fn operator_norm(m: &Matrix2<f64>) -> f64 {
    let ata = m.transpose() * m;
    let tr = ata.trace();
    let det = ata.determinant();
    let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
    (0.5 * tr + disc).max(0.0).sqrt()
}

/// `T(x) = x + eps V(x)`, rejecting inadmissible `eps`.
pub fn shift(field: &PerturbationField, eps: f64, x: &Point) -> Result<Point> {
    if eps.abs() > field.eps_max() {
        return Err(Error::Config(format!(
            "eps = {eps} exceeds admissible bound {} for {}",
            field.eps_max(),
            field.name()
        )));
    }
    Ok(x + field.eval(x) * eps)
}

#[derive(Debug, Clone)]
pub enum Domain {
    UnitDisk,
    Perturbed {
        base: Box<Domain>,
        field: PerturbationField,
        eps: f64,
    },
}

impl Domain {
    pub fn unit_disk() -> Self {
        Domain::UnitDisk
    }

    /// The pre-image `{x : x + eps V(x) in base}`.
    pub fn perturbed(base: Domain, field: PerturbationField, eps: f64) -> Result<Self> {
        if !eps.is_finite() || eps.abs() > field.eps_max() {
            return Err(Error::Config(format!(
                "eps = {eps} outside admissible range |eps| <= {} for {}",
                field.eps_max(),
                field.name()
            )));
        }
        Ok(Domain::Perturbed {
            base: Box::new(base),
            field,
            eps,
        })
    }

    pub fn dimension(&self) -> usize {
        2
    }

    pub fn contains(&self, x: &Point) -> bool {
        self.level(x) < 0.0
    }

    /// Level-set function, negative exactly inside.
    pub fn level(&self, x: &Point) -> f64 {
        match self {
            Domain::UnitDisk => x.norm_squared() - 1.0,
            Domain::Perturbed { base, field, eps } => base.level(&(x + field.eval(x) * *eps)),
        }
    }

    pub fn level_gradient(&self, x: &Point) -> Vector {
        match self {
            Domain::UnitDisk => x * 2.0,
            Domain::Perturbed { base, field, eps } => {
                let t = x + field.eval(x) * *eps;
                let dt = Matrix2::identity() + field.jacobian(x) * *eps;
                dt.transpose() * base.level_gradient(&t)
            }
        }
    }

    /// Distance to the boundary, positive inside. Exact for the disk; a
    /// perturbed domain maps the base distance back through `I + eps DV`,
    /// which is exact for dilations and reduces to the base at `eps = 0`.
    pub fn boundary_distance(&self, x: &Point) -> f64 {
        match self {
            Domain::UnitDisk => 1.0 - x.norm(),
            Domain::Perturbed { base, field, eps } => {
                let t = x + field.eval(x) * *eps;
                let d = base.boundary_distance(&t);
                let gb = base.level_gradient(&t);
                let nb = gb.norm();
                if nb == 0.0 {
                    return d;
                }
                let dt = Matrix2::identity() + field.jacobian(x) * *eps;
                let stretch = (dt.transpose() * (gb / nb)).norm();
                if stretch > 0.0 {
                    d / stretch
                } else {
                    f64::INFINITY
                }
            }
        }
    }

    /// Boundary point nearest to `x`.
    pub fn nearest_boundary_point(&self, x: &Point) -> Point {
        match self {
            Domain::UnitDisk => {
                let r = x.norm();
                if r == 0.0 {
                    Point::new(1.0, 0.0)
                } else {
                    x / r
                }
            }
            Domain::Perturbed { .. } => {
                let mut y = *x;
                for _ in 0..50 {
                    let g = self.level_gradient(&y);
                    let l = self.level(&y);
                    let g2 = g.norm_squared();
                    if g2 == 0.0 {
                        break;
                    }
                    let step = g * (l / g2);
                    y -= step;
                    if step.norm() < 1e-14 {
                        break;
                    }
                }
                y
            }
        }
    }

    /// Point where the segment from `inside` to `outside` leaves the closure.
    ///
    /// Among the points of the segment lying in the closed domain this is the
    /// one closest to `outside`.
    pub fn project_exit(&self, inside: &Point, outside: &Point) -> Result<Point> {
        let no_crossing = || Error::NoCrossing {
            inside: *inside,
            outside: *outside,
        };
        if !self.contains(inside) || self.contains(outside) {
            return Err(no_crossing());
        }
        match self {
            Domain::UnitDisk => {
                // |a + t d|^2 = 1 has exactly one root in (0, 1] for a inside
                let d = outside - inside;
                let qa = d.norm_squared();
                let qb = 2.0 * inside.dot(&d);
                let qc = inside.norm_squared() - 1.0;
                if qa == 0.0 {
                    return Err(no_crossing());
                }
                let disc = qb * qb - 4.0 * qa * qc;
                if disc < 0.0 {
                    return Err(no_crossing());
                }
                let sq = disc.sqrt();
                // stable positive root
                let t = if qb >= 0.0 {
                    -2.0 * qc / (qb + sq)
                } else {
                    (-qb + sq) / (2.0 * qa)
                };
                if !(0.0..=1.0 + 1e-12).contains(&t) {
                    return Err(no_crossing());
                }
                let p = inside + d * t.min(1.0);
                Ok(p / p.norm())
            }
            Domain::Perturbed { .. } => {
                let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
                let at = |t: f64| inside + (outside - inside) * t;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if self.contains(&at(mid)) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo < 1e-15 {
                        break;
                    }
                }
                Ok(at(hi))
            }
        }
    }

    pub fn outward_normal(&self, y: &Point) -> Result<Vector> {
        match self {
            Domain::UnitDisk => {
                let r = y.norm();
                if (r - 1.0).abs() > 1e-8 {
                    return Err(Error::Domain(format!(
                        "({}, {}) is not on the unit circle",
                        y.x, y.y
                    )));
                }
                Ok(y / r)
            }
            Domain::Perturbed { .. } => {
                if self.boundary_distance(y).abs() > 1e-8 {
                    return Err(Error::Domain(format!(
                        "({}, {}) is not on the perturbed boundary",
                        y.x, y.y
                    )));
                }
                Ok(self.level_gradient(y).normalize())
            }
        }
    }

    /// Axis-aligned box containing the closure.
    pub fn bounding_box(&self) -> (Point, Point) {
        match self {
            Domain::UnitDisk => (Point::new(-1.0, -1.0), Point::new(1.0, 1.0)),
            Domain::Perturbed { base, field, eps } => {
                let (lo, hi) = base.bounding_box();
                let pad = eps.abs() * field.sup_norm();
                // pre-image of the box under x + eps V(x) stays within pad
                let grow = pad / (1.0 - eps.abs() * field.lipschitz_bound()).max(0.1);
                (lo.add_scalar(-grow), hi.add_scalar(grow))
            }
        }
    }
}

/// Nodes, weights and outward normals for a boundary integral.
#[derive(Debug, Clone)]
pub struct BoundaryQuadrature {
    pub nodes: Vec<Point>,
    pub weights: Vec<f64>,
    pub normals: Vec<Vector>,
}

impl BoundaryQuadrature {
    pub fn integrate<F: Fn(&Point, &Vector) -> f64>(&self, f: F) -> f64 {
        crate::par::compensated_sum(
            self.nodes
                .iter()
                .zip(&self.normals)
                .zip(&self.weights)
                .map(|((y, n), w)| w * f(y, n)),
        )
    }

    pub fn total_weight(&self) -> f64 {
        crate::par::compensated_sum(self.weights.iter().copied())
    }
}

/// Periodic trapezoid rule on the unit circle.
pub fn circle_quadrature(n_nodes: usize) -> Result<BoundaryQuadrature> {
    if n_nodes < 4 {
        return Err(Error::Config(format!(
            "circle quadrature needs at least 4 nodes, got {n_nodes}"
        )));
    }
    let w = 2.0 * PI / n_nodes as f64;
    let nodes: Vec<Point> = crate::quadrature::periodic_angles(n_nodes)
        .into_iter()
        .map(|t| Point::new(t.cos(), t.sin()))
        .collect();
    Ok(BoundaryQuadrature {
        normals: nodes.clone(),
        weights: vec![w; n_nodes],
        nodes,
    })
}
