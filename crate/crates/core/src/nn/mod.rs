//! Minimal CPU layer zoo: flat parameter storage, im2col convolution, group
//! normalization and the handful of elementwise/resampling ops the detector
//! architectures need. Forward passes run on single-sample `(C, H, W)` maps;
//! batching is done one level up, which keeps every backward pass
//! deterministic regardless of thread count.

pub mod conv;
pub mod norm;
pub mod ops;
pub mod params;

pub use conv::Conv2d;
pub use norm::GroupNorm;
pub use params::{GradBuf, InitKind, LayerInfo, LayerKind, ParamId, ParamReg, ParamSet};

use ndarray::Array3;

/// Single-sample feature map, `(channels, height, width)`.
pub type Feat<S> = Array3<S>;
