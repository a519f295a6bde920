pub mod cli;
pub mod config;
pub mod costmodel;
pub mod datamodel;
pub mod encoder;
pub mod error;
pub mod finetune;
pub mod numerics;
pub mod runtime;

pub use error::{Error, Result};
