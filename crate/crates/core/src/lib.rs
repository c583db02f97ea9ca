pub mod autograd;
pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod context;
pub mod dataset;
pub mod e2e;
pub mod embed;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod mention;
pub mod metrics;
pub mod parallel;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod wordpiece;

pub use error::{Error, Result};
