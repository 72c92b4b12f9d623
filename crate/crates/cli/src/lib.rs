//! Library surface of the `fd` command-line tool: run configuration and the
//! pipeline steps (generation, diffusion training, editing, predictor
//! training, evaluation, sweeps). The binary is a thin argument-parsing
//! shell over these functions, and the acceptance suite drives them
//! directly.

pub mod config;
pub mod pipeline;

pub use config::{AugmentMode, RunConfig};
pub use pipeline::Workspace;
