pub mod atlas;
pub mod denoise;
pub mod dict;
pub mod error;
pub mod masking;
pub mod model;
pub mod probe;
pub mod signal;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
