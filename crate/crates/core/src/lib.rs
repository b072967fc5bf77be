pub mod dist;
pub mod catalog;
pub mod data;
pub mod dsl;
pub mod estimate;
pub mod nuisance;
pub mod population;
pub mod simlab;
pub mod error;

pub use error::{Error, Result};
