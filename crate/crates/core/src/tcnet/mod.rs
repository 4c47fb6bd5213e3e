//! The assembled segmentation network: configuration, forward pass, loss,
//! optimisation and checkpoints.

mod ablation;
mod checkpoint;
mod config;
mod loss;
mod network;
mod train;

pub use ablation::*;
pub use checkpoint::*;
pub use config::*;
pub use loss::*;
pub use network::*;
pub use train::*;
