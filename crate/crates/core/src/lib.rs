//! Hierarchical-patch super-resolution network with its data pipeline,
//! metrics, optimizer and checkpoint format.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synthetic;
pub mod trainer;

pub use config::{ApeMode, Hierarchy, HipaConfig, ReceptiveField};
pub use error::{HipaError, Result};
pub use model::{hipa_loss, Hipa};
pub use params::ParamStore;
pub use hipa_tensor::Tensor;
