pub mod cli;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod globalattn;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pdconv;
pub mod synth;
pub mod tagger;
pub mod tokenize;
pub mod trainer;
pub mod triple;

pub use error::{Error, Result};
