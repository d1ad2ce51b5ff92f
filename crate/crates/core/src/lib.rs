pub mod analytic;
pub mod convergence;
pub mod error;
pub mod estimators;
pub mod greeks;
pub mod mlmc;
pub mod model;
pub mod rng;
pub mod schemes;
pub mod stats;

pub use error::{Error, Result};
