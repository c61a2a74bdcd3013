pub mod distributions;
pub mod data;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod models;
pub mod objective;
pub mod topics;
pub mod training;

pub use error::{Error, Result};
