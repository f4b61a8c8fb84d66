//! The sign split `Omega+ / Omega-` of the domain, the constants `C+-`, and
//! acceptance-rejection sampling from the initial measures `mu+-`.
//!
//! With `w(x) = d_u phi(x, u(x))`, `Omega+ = {w >= 0}` and
//! `C+- = +-int_{Omega+-} w`. The measure `mu+-` has density `|w| / C+-` on
//! its side. None of this depends on the perturbation direction.

use std::fmt;

use crate::error::{Error, Result};
use crate::estimators::Estimate;
use crate::geometry::Point;
use crate::par::{compensated_sum, Backend};
use crate::problem::Problem;
use crate::simulate::{purpose, PathRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Plus,
    Minus,
}

impl Side {
    pub fn of_weight(w: f64) -> Side {
        // ties go to Omega+
        if w >= 0.0 {
            Side::Plus
        } else {
            Side::Minus
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Side::Plus => 1.0,
            Side::Minus => -1.0,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Plus => "plus",
            Side::Minus => "minus",
        })
    }
}

/// Side and weight `u(x) - u_target(x)` of an interior point.
pub fn classify(problem: &Problem, x: &Point) -> Result<(Side, f64)> {
    if !problem.domain.contains(x) {
        return Err(Error::Domain(format!(
            "({}, {}) is not inside the domain",
            x.x, x.y
        )));
    }
    let w = problem.sensitivity_weight(x);
    Ok((Side::of_weight(w), w))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantsEstimate {
    pub c_plus: Estimate,
    pub c_minus: Estimate,
    /// Covariance of the two sample means (they share proposals).
    pub covariance: f64,
    pub n_inside: usize,
}

impl ConstantsEstimate {
    pub fn get(&self, side: Side) -> &Estimate {
        match side {
            Side::Plus => &self.c_plus,
            Side::Minus => &self.c_minus,
        }
    }
}

const CHUNK: usize = 4096;

/// Hit-or-miss estimate of `C+-` from `n_samples` uniform points in the
/// bounding box.
pub fn estimate_constants(
    problem: &Problem,
    n_samples: usize,
    seed: u64,
    backend: Backend,
) -> Result<ConstantsEstimate> {
    if n_samples < 1000 {
        return Err(Error::Config(format!(
            "constants need at least 1000 samples, got {n_samples}"
        )));
    }
    let (lo, hi) = problem.domain.bounding_box();
    let area = (hi.x - lo.x) * (hi.y - lo.y);
    let n_chunks = n_samples.div_ceil(CHUNK);
    // per chunk: [sum+, sum+^2, sum-, sum-^2, inside]
    let partial = crate::par::map_indices(backend, n_chunks, |c| {
        let mut rng = PathRng::new(seed, purpose::CONSTANTS, c as u64);
        let count = CHUNK.min(n_samples - c * CHUNK);
        let mut acc = [0.0_f64; 5];
        for _ in 0..count {
            let x = Point::new(rng.uniform_range(lo.x, hi.x), rng.uniform_range(lo.y, hi.y));
            if !problem.domain.contains(&x) {
                continue;
            }
            acc[4] += 1.0;
            let w = problem.sensitivity_weight(&x);
            let a = area * w.abs();
            let k = if Side::of_weight(w) == Side::Plus {
                0
            } else {
                2
            };
            acc[k] += a;
            acc[k + 1] += a * a;
        }
        acc
    });
    let total = |k: usize| compensated_sum(partial.iter().map(|p| p[k]));
    let n_inside = total(4) as usize;
    if n_inside == 0 {
        return Err(Error::Sampling("no sample fell inside the domain".into()));
    }
    let n = n_samples as f64;
    let moments = |k: usize| {
        let mean = total(k) / n;
        let var = ((total(k + 1) - n * mean * mean) / (n - 1.0)).max(0.0);
        (mean, var)
    };
    let (mp, vp) = moments(0);
    let (mm, vm) = moments(2);
    // the per-sample products vanish since a point lies on one side only
    let covariance = -n * mp * mm / (n - 1.0) / n;
    let make = |mean: f64, var: f64| Estimate {
        value: mean,
        stderr: (var / n).sqrt(),
        n_effective: n_samples,
        n_truncated: 0,
        seed,
        flagged: false,
    };
    Ok(ConstantsEstimate {
        c_plus: make(mp, vp),
        c_minus: make(mm, vm),
        covariance,
        n_inside,
    })
}

/// Grid resolution of the envelope scan.
pub const ENVELOPE_GRID: usize = 401;
/// Safety factor on the scanned maximum.
pub const ENVELOPE_HEADROOM: f64 = 1.05;
const MAX_PROPOSALS: u64 = 100_000_000;

/// Acceptance-rejection sampler for `mu+` or `mu-` with a uniform proposal on
/// the bounding box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialSampler {
    pub side: Side,
    pub envelope: f64,
    lo: Point,
    hi: Point,
}

/// Proposal bookkeeping for one accepted sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ProposalStats {
    pub proposals: u64,
    /// Proposals that landed inside the domain on the sampler's side.
    pub on_side: u64,
}

impl InitialSampler {
    /// Envelope is `1.05 * max |w|` over a 401 x 401 scan of the box,
    /// restricted to interior points of the side.
    pub fn new(problem: &Problem, side: Side) -> Self {
        let (lo, hi) = problem.domain.bounding_box();
        let n = ENVELOPE_GRID;
        let mut peak = 0.0_f64;
        for i in 0..n {
            for j in 0..n {
                let x = Point::new(
                    lo.x + (hi.x - lo.x) * i as f64 / (n - 1) as f64,
                    lo.y + (hi.y - lo.y) * j as f64 / (n - 1) as f64,
                );
                if !problem.domain.contains(&x) {
                    continue;
                }
                let w = problem.sensitivity_weight(&x);
                if Side::of_weight(w) == side {
                    peak = peak.max(w.abs());
                }
            }
        }
        Self::with_envelope(problem, side, ENVELOPE_HEADROOM * peak)
    }

    pub fn with_envelope(problem: &Problem, side: Side, envelope: f64) -> Self {
        let (lo, hi) = problem.domain.bounding_box();
        InitialSampler {
            side,
            envelope,
            lo,
            hi,
        }
    }

    /// True when the scan found no mass on this side.
    pub fn is_void(&self) -> bool {
        self.envelope <= 0.0
    }

    /// Draws one point from the side's initial measure.
    pub fn sample(&self, problem: &Problem, rng: &mut PathRng) -> Result<(Point, ProposalStats)> {
        if self.is_void() {
            return Err(Error::Sampling(format!("side {} has no mass", self.side)));
        }
        let mut stats = ProposalStats::default();
        while stats.proposals < MAX_PROPOSALS {
            stats.proposals += 1;
            let x = Point::new(
                rng.uniform_range(self.lo.x, self.hi.x),
                rng.uniform_range(self.lo.y, self.hi.y),
            );
            let accept_u = rng.uniform();
            if !problem.domain.contains(&x) {
                continue;
            }
            let w = problem.sensitivity_weight(&x);
            if Side::of_weight(w) != self.side {
                continue;
            }
            stats.on_side += 1;
            if w.abs() > self.envelope {
                return Err(Error::Envelope {
                    bound: self.envelope,
                    weight: w,
                    at: x,
                });
            }
            if accept_u * self.envelope < w.abs() {
                return Ok((x, stats));
            }
        }
        Err(Error::Sampling(format!(
            "no acceptance on side {} after {MAX_PROPOSALS} proposals",
            self.side
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::TrackingData;
    use std::f64::consts::PI;

    #[test]
    fn classify_examples() {
        let p = Problem::benchmark();
        assert_eq!(classify(&p, &Point::zeros()).unwrap(), (Side::Plus, 0.25));
        let (side, w) = classify(&p, &Point::new(0.9, 0.35)).unwrap();
        assert_eq!(side, Side::Minus);
        assert!((w + 0.0036).abs() < 1e-12);
        assert_eq!(classify(&p, &Point::new(-0.5, 0.0)).unwrap().0, Side::Plus);
        assert!(classify(&p, &Point::new(1.5, 0.0)).is_err());
    }

    #[test]
    fn constants_difference_is_pi_over_12() {
        let p = Problem::benchmark();
        let c = estimate_constants(&p, 400_000, 7, Backend::Parallel).unwrap();
        let diff = c.c_plus.value - c.c_minus.value;
        let se = (c.c_plus.stderr.powi(2) + c.c_minus.stderr.powi(2) - 2.0 * c.covariance).sqrt();
        assert!((diff - PI / 12.0).abs() < 3.0 * se, "{diff} +- {se}");
        assert!(c.c_plus.value >= 0.0 && c.c_minus.value >= 0.0);
    }

    #[test]
    fn zero_target_gives_no_minus_side() {
        let p = Problem::benchmark().with_tracking(TrackingData::zero());
        let c = estimate_constants(&p, 200_000, 3, Backend::Parallel).unwrap();
        assert_eq!(c.c_minus.value, 0.0);
        assert!((c.c_plus.value - PI / 8.0).abs() < 3.0 * c.c_plus.stderr);
        assert!(InitialSampler::new(&p, Side::Minus).is_void());
    }

    #[test]
    fn stderr_scales_like_inverse_sqrt() {
        let p = Problem::benchmark();
        let a = estimate_constants(&p, 50_000, 1, Backend::Parallel).unwrap();
        let b = estimate_constants(&p, 200_000, 2, Backend::Parallel).unwrap();
        let ratio = a.c_plus.stderr / b.c_plus.stderr;
        assert!((ratio - 2.0).abs() < 0.4, "ratio {ratio}");
    }

    #[test]
    fn too_few_samples_rejected() {
        assert!(estimate_constants(&Problem::benchmark(), 10, 1, Backend::Sequential).is_err());
    }

    #[test]
    fn accepted_points_lie_on_their_side() {
        let p = Problem::benchmark();
        for side in [Side::Plus, Side::Minus] {
            let s = InitialSampler::new(&p, side);
            assert!(!s.is_void());
            for i in 0..2000 {
                let mut rng = PathRng::new(11, purpose::PLUS_SIDE, i);
                let (x, _) = s.sample(&p, &mut rng).unwrap();
                assert!(p.domain.contains(&x));
                assert_eq!(classify(&p, &x).unwrap().0, side);
            }
        }
    }

    #[test]
    fn envelope_violation_is_reported() {
        let p = Problem::benchmark();
        let s = InitialSampler::with_envelope(&p, Side::Plus, 0.01);
        let mut rng = PathRng::new(1, 1, 0);
        let mut saw = false;
        for _ in 0..100 {
            if let Err(Error::Envelope { .. }) = s.sample(&p, &mut rng) {
                saw = true;
                break;
            }
        }
        assert!(saw);
    }

    #[test]
    fn constant_weight_gives_uniform_disk_samples() {
        // u - target = 1 everywhere: mu+ is uniform on the disk
        let p = Problem::benchmark().with_tracking(TrackingData::from_fn(|x| {
            0.25 * (1.0 - x.norm_squared()) - 1.0
        }));
        let s = InitialSampler::new(&p, Side::Plus);
        let n = 20_000;
        let mut sum = Point::zeros();
        for i in 0..n {
            let mut rng = PathRng::new(5, 0, i);
            sum += s.sample(&p, &mut rng).unwrap().0;
        }
        let mean = sum / n as f64;
        // each coordinate of a uniform disk point has variance 1/4
        let se = (0.25 / n as f64).sqrt();
        assert!(
            mean.x.abs() <= 3.0 * se && mean.y.abs() <= 3.0 * se,
            "{mean:?}"
        );
    }

    #[test]
    fn acceptance_rate_matches_constants() {
        // P(accept | proposal in Omega+) = C+ / (M area(Omega+))
        let p = Problem::benchmark();
        let s = InitialSampler::new(&p, Side::Plus);
        let n = 20_000;
        let mut stats = ProposalStats::default();
        for i in 0..n {
            let mut rng = PathRng::new(8, 0, i);
            let st = s.sample(&p, &mut rng).unwrap().1;
            stats.proposals += st.proposals;
            stats.on_side += st.on_side;
        }
        let rate = n as f64 / stats.on_side as f64;
        let c = estimate_constants(&p, 1_000_000, 4, Backend::Parallel).unwrap();
        // area of Omega+ by hit-or-miss on a fine grid
        let m = 1000;
        let mut hits = 0usize;
        for i in 0..m {
            for j in 0..m {
                let x = Point::new(
                    -1.0 + (i as f64 + 0.5) * 2.0 / m as f64,
                    -1.0 + (j as f64 + 0.5) * 2.0 / m as f64,
                );
                if p.domain.contains(&x) && p.sensitivity_weight(&x) >= 0.0 {
                    hits += 1;
                }
            }
        }
        let area_plus = 4.0 * hits as f64 / (m * m) as f64;
        let predicted = c.c_plus.value / (s.envelope * area_plus);
        let se = (rate * (1.0 - rate) / stats.on_side as f64).sqrt();
        assert!(
            (rate - predicted).abs()
                < 3.0 * se + 3.0 * predicted * c.c_plus.stderr / c.c_plus.value + 1e-3,
            "rate {rate} predicted {predicted}"
        );
    }
}
