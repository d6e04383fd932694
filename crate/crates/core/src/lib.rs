//! Speech-driven gesture synthesis: a recurrent temporal encoder feeding a
//! denoising-diffusion sampler over skeletal pose frames, together with the
//! motion/audio data pipeline, training loop, metrics, and ablation harness.

pub mod audio;
pub mod autodiff;
pub mod dataset;
pub mod diffusion;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod pipeline;
pub mod rngutil;
pub mod schedule;
pub mod smoothing;

pub use linalg::Mat;
pub use pipeline::{PipelineError, RunConfig};
