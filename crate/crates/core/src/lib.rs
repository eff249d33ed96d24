//! Real-time score following with spectral-mixture Gaussian-process
//! likelihoods and a windowed Viterbi decoder.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod calibration;
pub mod capture;
pub mod duration;
pub mod error;
pub mod exec;
pub mod kernel;
pub mod lml;
pub mod pipeline;
pub mod score;
pub mod synth;
pub mod viterbi;

pub use error::{Error, Result};
pub use exec::Exec;
