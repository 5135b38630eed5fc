//! Point-cloud feature learning with directional attention points.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dap;
pub mod data;
pub mod error;
pub mod knn;
pub mod localconv;
pub mod models;
pub mod param;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
