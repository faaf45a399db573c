pub mod compressor;
pub mod data;
pub mod error;
pub mod format;
pub mod layers;
pub mod pipeline;
pub mod prune;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
