pub mod analysis;
pub mod autograd;
pub mod data;
pub mod blocks;
pub mod error;
pub mod network;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
