//! Exact Hessian spectra of small ReLU networks with respect to parameters
//! and inputs, first- and second-order adversarial attacks, min-max robust
//! training, and loss-landscape probes.

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod landscape;
pub mod nn;
pub mod spectrum;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Rng, Tensor};
