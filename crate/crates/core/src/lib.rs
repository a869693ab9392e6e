//! 1-bit segmentation engine for infrared small targets.

pub mod binconv;
pub mod bitcore;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod dbconv;
pub mod error;
pub mod grad;
mod kernels;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod param;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
