pub mod audio_encoder;
pub mod backbone;
pub mod content;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod harness;
pub mod nn;
pub mod speaker;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Padding, Tape, Tensor, Var};
