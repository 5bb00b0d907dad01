pub mod config;
pub mod error;
pub mod evaluation;
pub mod gradient;
pub mod integrators;
pub mod kernel;
pub mod models;
pub mod pipeline;
pub mod rng;
pub mod sparse_gp;
pub mod systems;
pub mod trainer;
pub mod trajectory;

pub use error::{Error, Result};
