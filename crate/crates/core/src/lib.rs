pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod qlstm;
pub mod quat;
pub mod scalar;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use error::{QnnError, Result};
