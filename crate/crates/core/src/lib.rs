pub mod checks;
pub mod cli;
pub mod datapipe;
pub mod error;
pub mod fclstm;
pub mod graphpart;
pub mod numcore;
pub mod trainer;
pub mod tgmm;

pub use error::{Error, Result};
