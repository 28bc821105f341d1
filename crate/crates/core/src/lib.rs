pub mod asr;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod decoding;
pub mod error;
pub mod fusion;
pub mod labels;
pub mod lm;
pub mod lora;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod real;
pub mod seed;
pub mod synth;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
