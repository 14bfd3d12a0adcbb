//! Finite-element solver for the steady Stokes–Darcy problem with random
//! hydraulic conductivity, coupled across a horizontal interface by
//! Beavers–Joseph–Saffman conditions and solved by a Robin–Robin domain
//! decomposition iteration.
//!
//! The distinguishing feature is the *ensemble* formulation: all `J` sampled
//! systems share a single pair of coefficient matrices built from the ensemble
//! means of the interface friction coefficient and the conductivity tensor,
//! with per-sample fluctuations moved to the right-hand sides. Each subdomain
//! operator is therefore factorized exactly once and reused across every
//! sample and every iteration, which is where the speedup over the traditional
//! per-sample iteration comes from.
//!
//! Module map:
//! - [`mesh`]: structured triangulations of the two rectangular subdomains,
//!   nested refinement, interface matching.
//! - [`fem`]: MINI-element (P1+bubble / P1) Stokes and P1 Darcy spaces,
//!   operator/right-hand-side assembly, traces, error norms.
//! - [`randfield`]: truncated Karhunen–Loève-style random conductivity,
//!   ensemble means and fluctuation diagnostics.
//! - [`linalg`]: sparse systems, one-time direct factorization, multi
//!   right-hand-side solves (backed by `faer`).
//! - [`ddm`]: the ensemble Robin–Robin iteration, the traditional per-sample
//!   baseline, optimized Robin parameters, contraction diagnostics.
//! - [`uq`]: Monte Carlo and multilevel Monte Carlo estimators over the
//!   random field, prolongation between nested levels, rate fitting.
//! - [`oracle`]: manufactured solutions, a monolithic coupled solver, and
//!   finite-difference strong-form residual checks used as independent
//!   references in the test suite.
//! - [`cli`]: the `sde` experiment runner (configs, CSV output, manifests).

pub mod cli;
pub mod ddm;
pub mod fem;
pub mod linalg;
pub mod mesh;
pub mod oracle;
pub mod randfield;
pub mod uq;

use thiserror::Error;

/// Unified error type for the whole crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A linear system could not be factorized.
    #[error("singular system: {0}")]
    Singular(String),

    /// The DDM iteration hit its iteration cap before the stopping rule fired.
    #[error("solver diverged: no convergence after {iterations} iterations (last relative increment {last_increment:.3e})")]
    Diverged {
        iterations: usize,
        last_increment: f64,
    },

    /// A random-field draw violated the configured positivity floor.
    #[error("sample rejected: {0}")]
    Sampling(String),

    /// Experiment configuration could not be parsed or validated.
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
