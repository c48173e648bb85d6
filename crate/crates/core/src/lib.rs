pub mod affinity;
pub mod blocks;
pub mod error;
#[doc(hidden)]
pub mod fault;
pub mod io;
pub mod random;
pub mod spectral;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::DenseArray;
