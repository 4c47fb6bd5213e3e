//! Triple-context lesion segmentation: differentiable layers, the three
//! contextual blocks (patch attention, 2D/3D fusion, multi-scale
//! deconvolution), the assembled network with its training loop, evaluation
//! metrics and the data pipeline.

pub mod cff;
pub mod cpa;
pub mod dataio;
pub mod error;
pub mod mdu;
pub mod metrics;
pub mod nn;
pub mod tcnet;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
