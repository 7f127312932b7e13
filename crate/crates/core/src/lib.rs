//! Numerical toolkit for randomly perturbed non-self-adjoint systems on the
//! circle: symbol analysis, Fourier discretization, Gaussian perturbations,
//! eigenvalue counting against phase-space volume, and WKB quasimodes.
//!
//! The numerical core is generic over [`num::Real`] (`f32` or `f64`). The
//! aliases below fix the scalar to `f64`, which is what the experiment
//! harness and the command line tool use.

pub mod discretize;
pub mod domains;
pub mod harness;
pub mod linalg;
pub mod num;
pub mod quasimode;
pub mod randomness;
pub mod symbol;

pub use num::{Cplx, Real};

pub type Complex64 = Cplx<f64>;
pub type Complex32 = Cplx<f32>;

pub type Matrix = linalg::CMatrix<f64>;
pub type Matrix32 = linalg::CMatrix<f32>;

pub type TrigPolynomial = symbol::TrigPolynomial<f64>;
pub type MatrixSymbol = symbol::MatrixSymbol<f64>;
pub type MatrixSymbol32 = symbol::MatrixSymbol<f32>;
pub type PhaseSpacePoint = symbol::PhaseSpacePoint<f64>;
pub type ClassifiedRoot = symbol::ClassifiedRoot<f64>;
pub type RootInventory = symbol::RootInventory<f64>;

pub type RadialProfile = domains::RadialProfile<f64>;
pub type SpectralDomain = domains::SpectralDomain<f64>;
pub type SpectralDomain32 = domains::SpectralDomain<f32>;
pub type DyadicPieces = domains::DyadicPieces<f64>;

pub type FourierTruncation = discretize::FourierTruncation<f64>;
pub type OperatorMatrix = discretize::OperatorMatrix<f64>;
pub type OperatorMatrix32 = discretize::OperatorMatrix<f32>;
pub type SobolevWeights = discretize::SobolevWeights<f64>;

pub type Quasimode = quasimode::Quasimode<f64>;
pub type Phase = quasimode::Phase<f64>;
pub type EigenBranch = quasimode::EigenBranch<f64>;
