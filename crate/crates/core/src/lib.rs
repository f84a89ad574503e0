//! Hierarchical semi-supervised classification with coarsely labeled data.

pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod filter;
pub mod losses;
pub mod model;
pub mod objective;
pub mod report;
pub mod rng;
pub mod synthdata;
pub mod taxonomy;
pub mod trainers;

pub use error::{Error, ErrorCategory, Result};
pub use taxonomy::{MarginalizationMatrix, Taxonomy};
