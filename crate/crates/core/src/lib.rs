//! Numerical toolkit for divergence-form parabolic systems with mixed
//! Dirichlet/Neumann boundary conditions.
//!
//! The crate bundles:
//!
//! * structured 2-D triangulations with per-component Dirichlet parts
//!   ([`geometry`]),
//! * pointwise ellipticity analyzers for complex coefficient tensors
//!   ([`tensors`]),
//! * P1 finite-element assembly of the system operator, shifted solves and a
//!   discrete coercivity (Gårding) estimator ([`elliptic`]),
//! * an implicit-Euler time stepper with discrete maximal-regularity norms
//!   and the associated constant checks ([`parabolic`]),
//! * quantitative inverse-extrapolation window arithmetic
//!   ([`extrapolation`]),
//! * a Picard/continuation solver for quasilinear systems with
//!   nonlocal-in-time (Volterra) coefficient maps ([`quasilinear`]),
//! * the two-species chemotaxis example system, its conditioning checks and
//!   the nonlocal reduction that eliminates the attractant equations
//!   ([`chemotaxis`]).
//!
//! All solvers are deterministic: fixed evaluation order, seeded iteration
//! starts, no data-dependent parallelism.

// Index loops mirror the block structure of the math; the negated float
// comparisons in validation guards reject NaN on purpose.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments)]
#![allow(clippy::type_complexity)]

pub mod chemotaxis;
pub mod elliptic;
pub mod error;
pub mod extrapolation;
pub mod fields;
pub mod geometry;
pub mod linalg;
pub mod parabolic;
pub mod quasilinear;
pub mod tensors;

pub use error::{Error, Result};

/// Complex scalar used throughout.
pub type C64 = num_complex::Complex64;

/// Finite-element coefficient vector over the free degrees of freedom.
pub type FeVec = Vec<C64>;
