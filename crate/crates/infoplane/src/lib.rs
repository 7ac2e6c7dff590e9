//! Information-plane analysis of tapped convolutional encoders.
//!
//! The crate trains a small tapped ResNet (classifier or autoencoder),
//! then estimates lower bounds on the mutual information between the tap
//! activations and both the input images and the labels, using a
//! re-trained classifier suffix in the forward direction and a conditional
//! autoregressive image decoder in the inverse direction. An exact
//! discrete-MI oracle over enumerable synthetic datasets validates the
//! decoder-based bounds end to end.
//!
//! Entry points:
//! - [`encoder`]: the tapped ResNet and its training loop.
//! - [`forward_decoder`]: frozen-prefix suffix decoders and linear probes.
//! - [`pixelcnn`]: the conditional autoregressive inverse decoder.
//! - [`density`]: discretized logistic mixture likelihood and sampling.
//! - [`mi`]: estimators, the record store, and the exact oracle.
//! - [`data`]: three-way splits and synthetic oracle datasets.
//! - [`experiment`]: the tracking orchestrator (checkpoints × taps).
//! - [`viz`]: figures and conditional sample grids.
//!
//! The runnable examples under `examples/` walk through each capability;
//! the `infoplane` binary exposes the same flows as subcommands.

pub mod data;
pub mod density;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod forward_decoder;
pub mod mi;
pub mod nn;
pub mod pixelcnn;
pub mod viz;

pub use error::{Error, Result};
