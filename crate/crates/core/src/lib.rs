pub mod data;
pub mod error;
pub mod featsim;
pub mod gradmatch;
pub mod model;
pub mod protocol;
pub mod report;
pub mod scenario;

pub use error::{Error, Result};
