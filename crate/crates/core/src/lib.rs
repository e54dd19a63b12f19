//! Spike camera toolkit: integrate-and-fire simulation, intensity
//! reconstruction from spike timing, and unsupervised optical flow learned
//! directly from binary spike streams.
//!
//! Numeric code is generic over [`Scalar`] (`f32` / `f64`). The aliases at the
//! bottom of this file fix the scalar to `f64`, which the gradient checks use;
//! training defaults to `f32` for speed.

pub mod camera_sim;
pub mod diff;
mod error;
pub mod nn;
pub mod eval;
pub mod flow;
pub mod intensity;
pub mod loss;
pub mod representation;
pub mod rng;
mod scalar;
pub mod spike_stream;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub use camera_sim::{simulate, CameraConfig, GroundTruth, NoiseMode, SceneSpec, Texture};
pub use flow::FlowField;
pub use intensity::{FusionWeights, IntensityMap, ReconConfig};
pub use spike_stream::{Pixel, SpikeIndex, SpikeStream, StreamWindow};

pub type Tensor64 = diff::Tensor<f64>;
pub type Graph64 = diff::Graph<f64>;
pub type ParamStore64 = diff::ParamStore<f64>;
pub type FlowField64 = FlowField<f64>;
pub type FlowField32 = FlowField<f32>;
pub type IntensityMap64 = IntensityMap<f64>;
pub type Model64 = train::SpikeFlowModel<f64>;
