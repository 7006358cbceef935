//! Self-knowledge distillation laboratory for a tiny omnimodal transformer.
//!
//! A vision-text path (teacher) and a vision-audio path (student) of the same
//! model share one backbone; the student's audio encoder is trained to make the
//! backbone behave as it does for text queries.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autodiff::{Span, Tape, TensorError, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
