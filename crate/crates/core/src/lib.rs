//! Mesh-free Eulerian shape derivatives of PDE-constrained shape functionals.
//!
//! The derivative of a tracking-type functional with respect to a domain
//! perturbation `x -> x + eps V(x)` is written as a boundary expectation over
//! exit-kill diffusions started from sign-split initial measures, plus a
//! deterministic surface integral. Everything here is simulated directly on
//! the continuous geometry; no mesh of the domain is ever built.
//!
//! Module map:
//!
//! * [`geometry`]: domains, pre-image perturbed domains, perturbation fields,
//!   boundary quadrature.
//! * [`fields`]: PDE coefficients, solution providers, tracking data.
//! * [`simulate`]: Euler-Maruyama paths with exit detection and killing.
//! * [`problem`]: a state equation bundled with its tracking target.
//! * [`sampling`]: the sign split of the domain and its initial measures.
//! * [`estimators`]: Monte Carlo estimators for `Du[V]` and `DPhi[V]`.
//! * [`taylor`]: functional evaluation on perturbed domains and Taylor tests.
//! * [`cli`]: run configuration and CSV reports behind the `probshape` binary.

pub mod cli;
pub mod error;
pub mod estimators;
pub mod fields;
pub mod geometry;
pub mod par;
pub mod problem;
pub mod quadrature;
pub mod sampling;
pub mod simulate;
pub mod taylor;

pub use error::{Error, Result};
pub use geometry::{Domain, PerturbationField, Point, Vector};
pub use problem::Problem;
