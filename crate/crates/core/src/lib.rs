//! Articulatory-to-acoustic speech synthesis from ultrasound tongue imaging.
//!
//! Raw ultrasound and full-context labels become frame-synchronous network
//! inputs; a feed-forward model predicts vocoder parameters which are
//! smoothed with maximum-likelihood parameter generation and scored against
//! natural speech. A separate analysis tracks transducer drift across a
//! recording session.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acoustic;
pub mod binio;
pub mod dnn;
pub mod eigentongues;
pub mod error;
pub mod eval;
pub mod lingfeat;
pub mod misalign;
pub mod pipeline;
pub mod synth;
pub mod ultra_io;

pub use error::{Error, Result};
pub use pipeline::{ExperimentConfig, Split, System};
