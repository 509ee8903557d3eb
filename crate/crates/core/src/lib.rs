pub mod acquisition;
pub mod config;
pub mod error;
pub mod gp;
pub mod multitask;
pub mod objective;
pub mod report;
pub mod space;
pub mod tuner;

pub use error::{Error, Result};
