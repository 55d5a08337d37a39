pub mod error;
pub mod losses;

pub use error::{Error, Result};
