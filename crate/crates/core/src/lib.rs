//! Change-based convolutional inference for static-camera video.
//!
//! Each convolution keeps a copy of the input it last consumed. On a new
//! frame it finds the pixels that moved by more than a per-layer threshold,
//! widens that set to every output pixel whose receptive field touches it,
//! and recomputes only those outputs via partial im2col + GEMM. Everything
//! else is carried over from the previous frame.
//!
//! The crate is organised as:
//!
//! * [`tensor`] / [`gemm`] — dense tensors, convolution, im2col and GEMM;
//! * [`change`] — change detection, dilation and index extraction;
//! * [`layers`] — the stateful change-based layers;
//! * [`network`] — network graphs, the dense reference and sequence driving;
//! * [`calibration`] — metrics, threshold selection and factor sweeps;
//! * [`analysis`] — operation and memory accounting;
//! * [`io`] / [`presets`] — file formats, synthetic data and bundled models.

pub mod analysis;
pub mod calibration;
pub mod change;
pub mod error;
pub mod gemm;
pub mod io;
pub mod layers;
pub mod network;
pub mod presets;
pub mod tensor;

pub use calibration::{
    select_thresholds, sweep_threshold_factor, Aggregation, CalibConfig, Calibration, EvalConfig, EvalSequence,
    EvalWindow, LossMetric, TradeoffCurve,
};
pub use change::{ChangeMap, DetectionMode, IndexList, InputState};
pub use error::{Error, Result};
pub use layers::{CbConvLayer, CbPoolLayer, DetectionPolicy, LayerFrameStats};
pub use network::{
    build_network, convert_to_cb, CbNetwork, ConvGeometry, ConvWeights, DenseNetwork, LayerDesc, LayerKind,
    NetworkSpec, Reference, RunOptions, RunStats, Source,
};
pub use tensor::{ConvSpec, Pixel, PoolSpec, Shape3, Tensor3};
