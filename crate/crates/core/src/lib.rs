//! Lyapunov-exponent analysis and regularization for recurrent networks.
//!
//! The crate computes the leading Lyapunov exponents of driven recurrent
//! networks with the Benettin QR procedure, differentiates them exactly
//! (reverse mode through the tangent dynamics and every QR step), and uses
//! that gradient to push selected exponents toward targets before or during
//! ordinary backpropagation-through-time training ("gradient flossing").

// `!(x >= y)` is used deliberately so that NaN takes the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conditioning;
pub mod criteria;
pub mod error;
pub mod experiments;
pub mod flossing;
pub mod linalg;
pub mod lyapunov;
pub mod models;
pub mod optim;
pub mod rng;
pub mod table;
pub mod tasks;
pub mod train;

pub use error::{Error, LinalgError, Result};
pub use linalg::DenseMatrix;
pub use models::{ArchitectureSpec, CellKind, ModelParams, NetworkState};
