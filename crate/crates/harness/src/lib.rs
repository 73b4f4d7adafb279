//! Config-driven experiment runner for the online-learning engines.

pub mod config;
pub mod error;
pub mod report;
pub mod run;
pub mod sweep;

pub use config::Config;
pub use error::{HarnessError, Result};
