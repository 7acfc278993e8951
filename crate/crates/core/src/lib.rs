pub mod cli;
pub mod context;
pub mod data;
pub mod domain;
pub mod error;
pub mod hesd;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod packcodec;
pub mod par;
pub mod render;
pub mod training;

pub use error::{Error, Result};
pub use model::{Model, PreparedTrial};

#[cfg(test)]
mod tests;
