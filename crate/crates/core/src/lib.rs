pub mod approx;
pub mod conformal;
pub mod data;
pub mod error;
pub mod experiments;
pub mod kernels;
pub mod losses;
pub mod solver;

pub use error::{Error, Result};
