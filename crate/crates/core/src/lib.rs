pub mod bounds;
pub mod cli;
pub mod config;
pub mod report;
pub mod error;
pub mod exhaustion;
pub mod heat;
pub mod hum;
pub mod lattice;
pub mod semilinear;
pub mod time_measure;
pub mod uc;

pub use error::{Error, Result};
