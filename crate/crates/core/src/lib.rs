//! Zero-shot video restoration by fusing image- and video-diffusion latent
//! trajectories, built on closed-form toy denoisers and Haar block codecs.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod codecs;
pub mod config;
pub mod degradation;
pub mod denoisers;
pub mod error;
pub mod fusion;
pub mod guidance;
pub mod io;
pub mod pipeline;
pub mod postprocess;
pub mod quality;
pub mod schedules;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Dims, FlowField, VideoTensor};
