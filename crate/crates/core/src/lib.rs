pub mod attr_text;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
