// NaN must fail positivity and ordering checks, so `!(x > 0.0)` is used on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activation;
pub mod error;
pub mod kernel;
pub mod legendre;
pub mod linalg;
pub mod quadrature;
pub mod rate;
pub mod scalar;
pub mod simulator;

pub use activation::Activation;
pub use error::{Error, Result};
pub use scalar::Scalar;

/// Covariance-type matrices (`q`, the chain `g^(l)`, `G_n^(l)`).
pub type CovMatrix = linalg::PsdMatrix<f64>;
/// Symmetric matrices of dual variables.
pub type DualMatrix = linalg::SymMatrix<f64>;
pub type Matrix = linalg::Matrix<f64>;
pub type CovMatrixF32 = linalg::PsdMatrix<f32>;
pub type DualMatrixF32 = linalg::SymMatrix<f32>;
