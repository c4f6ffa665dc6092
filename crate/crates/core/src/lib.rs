//! Streaming convolutional inference and training with channel-wise masked
//! (CWM) convolutions.
//!
//! A CWM convolution recomputes only a contiguous subset of its output
//! channels at each time-step and reuses the previous step's output for the
//! rest. The crate provides the numeric kernels, mask schedules, the masked
//! layer, a small segmentation network with a streaming executor, a trainer,
//! mIoU evaluation, a synthetic moving-shapes dataset and FLOP/latency
//! profiling.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below name the common instantiations.

pub mod cwm;
pub mod error;
pub mod experiment;
pub mod label;
pub mod mask;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod parallel;
pub mod profiler;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;

pub use cwm::{Conv2d, CwmConvLayer, CwmState, CwmStepRecord};
pub use error::{Error, Result};
pub use label::{LabelMap, IGNORE_LABEL};
pub use mask::{bistep_generator, random_contiguous_generator, ChannelMask, MaskSchedule};
pub use metrics::{AbtConfig, ConfusionMatrix};
pub use net::{Network, NetworkSpec, StreamSession};
pub use scalar::{DType, Scalar};
pub use synth::{SequenceSample, SynthConfig};
pub use tensor::Tensor;
pub use train::{Sgd, TrainConfig, TrainReport};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
