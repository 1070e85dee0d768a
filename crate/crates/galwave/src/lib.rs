//! Spectral Galerkin solver and verification harness for the initial-boundary
//! value problem `(R u')' + A(t) u + F(u) = f + g` on an axis-aligned box
//! with time- and space-dependent coefficients and a sign-condition
//! nonlinearity.
//!
//! The core is generic over the floating-point scalar (see [`scalar::Scalar`]);
//! the command-line tool and the aliases below instantiate it at `f64`.

pub mod assembly;
pub mod basis;
pub mod cli;
pub mod diagnostics;
pub mod exprlang;
pub mod integrate;
pub mod problem;
pub mod scalar;

pub use scalar::Scalar;

/// Scalar type used by the command-line tool.
pub type Real = f64;

pub type BoxDomain64 = basis::BoxDomain<Real>;
pub type BasisSet64 = basis::BasisSet<Real>;
pub type QuadratureRule64 = basis::QuadratureRule<Real>;
pub type ProblemSpec64 = problem::ProblemSpec<Real>;
pub type NonlinearitySpec64 = problem::NonlinearitySpec<Real>;
pub type GalerkinSystem64 = assembly::GalerkinSystem<Real>;
pub type State64 = integrate::State<Real>;
pub type Trajectory64 = integrate::Trajectory<Real>;
pub type EnergyRecord64 = diagnostics::EnergyRecord<Real>;
pub type BoundReport64 = diagnostics::BoundReport<Real>;
