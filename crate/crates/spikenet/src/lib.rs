//! Direct training of deep spiking neural networks.
//!
//! The building blocks: a rank-5 spatio-temporal tensor substrate, iterative
//! leaky integrate-and-fire neurons with a rectangular surrogate gradient,
//! batch normalization pooled over timesteps and scaled to the firing
//! threshold, residual spiking architectures, full backpropagation through
//! space and time, normalization-into-weights fusion for spike-only
//! inference, and a diagnostics suite (gradient-norm profiles, membrane
//! variance scans, firing-rate scans, accumulate/multiply operation counts).
//!
//! Start with the runnable programs under `examples/`; the `spikenet` binary
//! wraps training, evaluation, fusion, and diagnostics behind a small
//! config-file driven command line.

pub mod arch;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod neuron;
pub mod ops;
pub mod optim;
pub mod run;
pub mod tdbn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Shape5, Tensor5};
