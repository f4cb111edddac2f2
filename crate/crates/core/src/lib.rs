pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod itrm;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod sram;
pub mod synth;
pub mod utrm;

pub use error::{Error, Result};
