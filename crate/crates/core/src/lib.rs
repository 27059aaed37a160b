pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gnn;
pub mod kg;
pub mod numerics;
pub mod pipeline;
pub mod session_encoder;
pub mod synth;
pub mod time_enc;
pub mod training;

pub use error::{KsttError, Result};
