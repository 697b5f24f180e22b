//! Desk-scale training stack for decoder-only text embedding models.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
