pub mod adapter;
pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod dpp;
mod error;
pub mod nn;
pub mod sfc;
pub mod sng;
pub mod train;

pub use error::Error;
