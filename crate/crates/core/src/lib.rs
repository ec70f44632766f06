mod error;
pub mod data;
pub mod decoder;
pub mod graph;
pub mod harness;
pub mod init;
pub mod model;
pub mod pass;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
