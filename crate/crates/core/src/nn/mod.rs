//! Tensor-level building blocks: convolution kernels, the differentiation
//! tape, parameterized layers and the gradient checker.

pub mod conv;
pub mod functional;
pub mod gradcheck;
pub mod params;
pub mod tape;

pub use conv::ConvSpec;
pub use params::{BatchNorm, Conv, ConvBnRelu, Dense, ParamId, ParamStore, Session};
pub use tape::{BatchStats, BnMode, Grads, Tape, Var};
