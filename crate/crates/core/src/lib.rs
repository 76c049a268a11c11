//! Galerkin solvers and audits for linear backward stochastic parabolic
//! equations on the torus.
//!
//! The unknown pair `(p, q)` solves
//! `dp = -(L p + M^k q^k + F) dt + q^k dW^k`, `p(T) = phi`, with `L` and `M^k`
//! in divergence or non-divergence form. Space is discretized by a truncated
//! Fourier basis ([`space`]), the Wiener filtration by a quadrature tree or a
//! path ensemble ([`wiener`]), and the resulting system of backward SDEs is
//! marched backward in [`solver`].

pub mod analysis;
pub mod cli;
pub mod error;
pub mod frozen;
pub mod oracle;
pub mod scenario;
pub mod solver;
pub mod space;
pub mod wiener;

pub use error::{Error, ErrorClass, Result};
pub use scenario::{
    evaluate_field, validate, CoefficientField, EquationForm, FieldKind, ModulusOfContinuity, SampleGrid, Scenario,
    ValidationReport, WienerHistory,
};
pub use solver::{solve_regression, solve_tree, AdaptedField, MCoupling, PerLevel, SchemeConfig, SolutionPair};
pub use space::{sobolev_norm, SpatialField, SpectralBasis};
pub use wiener::{build_tree, sample_paths, NodeId, PathEnsemble, WienerTree};
