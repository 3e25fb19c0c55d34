//! Kernel density estimation for stationary random fields on `Z^d`.
//!
//! The fields covered here are Bernoulli shifts `X_i = g(eps_{i-s}, s in Z^d)`
//! driven by i.i.d. innovations: linear fields, second-order Volterra fields,
//! and Lipschitz subordinations of either. The crate provides
//!
//! * lattice regions of arbitrary shape ([`lattice`]),
//! * reproducible counter-keyed innovation patches and their coupled copies
//!   ([`innovations`]),
//! * field generators with exact marginal and pair densities where they exist
//!   ([`fields`]),
//! * the physical dependence calculus, tail sums and the truncation schedule
//!   `m_n` ([`dependence`]),
//! * the Parzen-Rosenblatt estimator, its smoothed m-dependent counterpart and
//!   the L1 distance ([`kde`]),
//! * Monte Carlo experiments and inequality audits ([`experiments`]),
//! * configuration and report emission for the `rfkde` binary ([`config`],
//!   [`runner`]).
//!
//! The numerical core is generic over the scalar type through [`Real`]; the
//! aliases below fix it to `f64`, which is what the experiments use.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dependence;
pub mod error;
pub mod experiments;
pub mod fields;
pub mod innovations;
pub mod kde;
pub mod lattice;
pub mod quadrature;
pub mod rng;
pub mod runner;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

/// Kernel with `f64` evaluation.
pub type Kernel64 = kde::Kernel<f64>;
/// Field sample with `f64` values.
pub type FieldSample64 = fields::FieldSample<f64>;
/// Density model with `f64` evaluation.
pub type DensityModel64 = fields::DensityModel<f64>;
/// Density estimate with `f64` values.
pub type DensityEstimate64 = kde::DensityEstimate<f64>;

/// Kernel with `f32` evaluation.
pub type Kernel32 = kde::Kernel<f32>;
/// Field sample with `f32` values.
pub type FieldSample32 = fields::FieldSample<f32>;
/// Density estimate with `f32` values.
pub type DensityEstimate32 = kde::DensityEstimate<f32>;

/// Exact rational scalar for the closed-form exponent formulas.
pub type Rational = num_rational::Ratio<i64>;
