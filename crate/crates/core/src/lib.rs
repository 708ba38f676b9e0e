//! Pool-based constructive preference elicitation.

pub mod bench;
pub mod elicit;
pub mod error;
pub mod learning;
pub mod oracle;
pub mod problems;
pub mod rng;
pub mod selection;
pub mod service;
pub mod types;

pub use error::{Error, Result};
