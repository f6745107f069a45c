//! HAHE: hierarchical attention for hyper-relational knowledge graph link prediction.

pub mod check;
pub mod config;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod global;
pub mod hkg;
pub mod local;
pub mod model;
pub mod numerics;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
