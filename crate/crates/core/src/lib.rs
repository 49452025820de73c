//! Polyphonic sound event detection with a convolutional-recurrent network
//! whose recurrent layer can be conditioned on the class activities of the
//! previous frame, trained with a scheduled-sampling curriculum.
//!
//! Module map:
//!
//! - [`tensor`]: dense tensors and the reverse-mode autodiff tape
//! - [`nn`]: layers, initialization, Adam and per-layer gradient clipping
//! - [`features`]: WAV input, log-mel extraction, standardization, segmentation
//! - [`model`]: the CRNN, its conditioned variant, loss and inference
//! - [`schedule`]: teacher-forcing probability and the activity selector
//! - [`synthdata`]: synthetic corpora with and without temporal structure
//! - [`metrics`]: frame-based F1 and error rate
//! - [`trainer`]: training loop, checkpoints and the A/B experiment
//! - [`config`]: the run configuration file

pub mod config;
pub mod error;
pub mod features;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod roll;
pub mod schedule;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use roll::{EventRoll, FrameEvent};

pub use tensor::{Real, Tape, Tensor, TensorError, Var};
