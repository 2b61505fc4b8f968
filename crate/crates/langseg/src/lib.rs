//! Files, training driver and command line around [`langseg_core`].

pub use langseg_core as core;

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod netpbm;
pub mod run;
pub mod tensor_io;

pub use error::{AppError, Result};
