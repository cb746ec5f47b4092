pub mod checks;
pub mod cli;
pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod retrieval;
pub mod training;
mod io;

pub use error::{Error, Result};
