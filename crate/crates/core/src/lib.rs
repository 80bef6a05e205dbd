//! Motion-space adversarial post-training for few-step flow-matching video
//! generators, at desk scale.

pub mod checkpoint;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod flow;
pub mod fm;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use candle_core::{DType, Device, Tensor};
pub use error::{Error, Result};
pub use tensor::{FlowField, MotionTensor, RngState, SeededRng, VideoTensor};
