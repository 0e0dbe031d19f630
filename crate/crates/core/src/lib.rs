//! Topology-guided sampling of a latent diffusion model over 2D vector
//! fields.

pub mod checkpoint;
pub mod dataset;
pub mod diffmath;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod field_model;
pub mod guidance;
pub mod latent_fit;
pub mod optim;
pub mod rng;
pub mod run_dir;
pub mod topo_extract;

pub use error::{Error, Result};
