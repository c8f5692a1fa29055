//! File formats, evaluation harness and command line for the graph
//! embodiment transformer in [`getzero_core`].

pub mod cli;
pub mod config;
pub mod error;
pub mod evalsuite;
pub mod io;
pub mod pipeline;

pub use error::CliError;
