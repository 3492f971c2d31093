//! Knowledge distillation of toy image generators with an energy-based
//! variational distribution trained by short-run Langevin dynamics.

pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod distill_losses;
pub mod energy_model;
pub mod error;
pub mod image;
pub mod layers;
pub mod metrics;
pub mod nets;
pub mod sampler;
pub mod trainer;
pub mod vem_objective;

pub use error::{Error, Result};
pub use image::ImageBatch;
