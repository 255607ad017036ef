pub mod autograd;
pub mod blocks;
mod error;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod memory;
pub mod ofa;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
