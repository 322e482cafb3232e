//! Measuring and matching function-space learning rates in small neural nets.
//!
//! The crate trains models with a built-in reverse-mode autodiff engine and
//! estimates, per parameter tensor, the RMS magnitude of the first-order
//! change in the network output caused by one optimizer update (the
//! function-space learning rate). A recorded schedule of these magnitudes
//! from a cheap base model can then be replayed into scaled models by
//! adjusting per-layer parameter-space learning rates (FLeRM), which keeps
//! the optimal global learning rate stable across width, depth and
//! initialization scale. Everything is checkable at desk scale against an
//! exact brute-force oracle.

pub mod autograd;
pub mod data;
pub mod error;
pub mod estimator;
pub mod flerm;
pub mod models;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
