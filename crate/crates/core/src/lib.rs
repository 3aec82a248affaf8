pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod ors;
pub mod reward;
pub mod rng;
pub mod scene;
pub mod sfa;
pub mod tensor;

pub use config::Config;
pub use error::{Error, Result};
