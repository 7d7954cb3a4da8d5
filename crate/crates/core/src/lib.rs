//! AudioMamba: selective state-space audio tagging on log-mel spectrograms.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] and [`autodiff`]: dense tensors and a reverse-mode tape.
//! * [`scan`]: the S6 selective scan (sequential and chunked) and the
//!   four-direction SS2D wrapper for 2D maps.
//! * [`frontend`]: WAV decoding, resampling, log-mel features and the
//!   patch-window layout.
//! * [`model`]: configurations, the hierarchical backbone and checkpoints.
//! * [`metrics`]: mAP, mAUC, d-prime, F1 and accuracy.
//! * [`train`]: loss, CutMix, optimizer, manifests, training and evaluation.

pub mod archive;
pub mod bench;
pub mod autodiff;
pub mod error;
pub mod frontend;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod scan;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
