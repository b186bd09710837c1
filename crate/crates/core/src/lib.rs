//! Large-deviation rate functions for wide Bayesian neural networks on a
//! finite input set.

pub mod error;
pub mod experiments;
pub mod gp;
pub mod kernel;
pub mod linear;
pub mod mc;
pub mod mgf;
pub mod nngp;
pub mod optim;
pub mod quadrature;
pub mod rate;

pub use error::{LdpError, Result};
