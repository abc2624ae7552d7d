//! Agent, training and evaluation for depth-camera multi-UAV navigation.

pub mod cfs;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nets;
pub mod replay;
pub mod sac;
pub mod trainer;

pub use config::{EvalConfig, NetConfig, RunConfig, TrainerConfig};
pub use error::{CoreError, Result};
pub use model::{Inputs, Model};
pub use replay::{Batch, ReplayBuffer, Transition};
