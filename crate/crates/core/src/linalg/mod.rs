//! Minimal complex linear algebra: small dense Hermitian eigensolves,
//! sparse CSR matrices and a direct LU factorization, plus a generalized
//! eigenvalue driver for Hermitian pencils.
//!
//! Everything here is deterministic; iterative routines take explicit seeds.

pub mod dense;
pub mod eigen;
pub mod lu;
pub mod sparse;

pub use dense::DMat;
pub use lu::SparseLu;
pub use sparse::{Csr, Triplets};
