//! Finite-element toolkit for recovering a piecewise-constant Robin
//! boundary coefficient on an inaccessible boundary segment from noisy
//! Cauchy data on an accessible segment.
//!
//! The pipeline: triangulate a convex polygon with labeled boundary
//! segments ([`mesh`]), represent the unknown coefficient as a piecewise
//! constant on the inaccessible arc ([`coeff`]), assemble P1 operators and
//! solve the two forward problems ([`fem`], [`elliptic`], [`parabolic`]),
//! score a candidate coefficient with an energy-misfit functional and its
//! exact discrete-adjoint gradient ([`objective`]), and drive a projected
//! optimizer over values and breakpoints ([`inversion`]). Synthetic data
//! with seeded Gaussian noise comes from [`noise`]; [`experiment`] runs
//! schedule-driven noise sweeps and rate fits, with SVG reports in
//! [`plot`].

pub mod coeff;
pub mod elliptic;
pub mod experiment;
pub mod fem;
pub mod inversion;
pub mod mesh;
pub mod noise;
pub mod objective;
pub mod parabolic;
pub mod plot;
pub mod sparse;

/// Crate-wide error type. `Validation` maps to CLI exit code 2,
/// `Solver` to exit code 3.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
    pub fn solver(msg: impl Into<String>) -> Self {
        Error::Solver(msg.into())
    }
}
