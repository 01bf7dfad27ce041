//! Two-stage news-to-report generation.
//!
//! News tokens go through a bidirectional LSTM encoder; an attention LSTM
//! decoder produces a short outline of salient terms; a variational LSTM
//! decoder conditioned on the pooled news and outline encodings writes the
//! report. Both stages are trained jointly on the sum of their losses.

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod generation;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod outline_decoder;
pub mod report_decoder;
pub mod synthetic;
pub mod training;

pub use error::{CheckpointError, Error, Result};
