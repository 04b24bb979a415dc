//! ConcateNet dialogue separation.
//!
//! The mixture spectrogram is packed as a two-channel real map, lifted to
//! `C` channels, mapped to `B` gammatone bands and passed through an
//! encoder / bottleneck / decoder stack whose blocks run a purely local
//! convolutional branch in parallel with a recurrent global branch. The
//! decoder output is synthesized back to linear bins and turned into a
//! bounded complex mask; a small causal convolution stack then adds a
//! nonlinear residual to the masked estimate.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod filterbank;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod par;
pub mod stft;
pub mod trainer;

pub use error::{Error, Result};
