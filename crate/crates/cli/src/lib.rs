//! Command line and HTTP service over the concept-lab library.

pub mod cli;
pub mod config;
pub mod jobs;
pub mod server;
pub mod workspace;

pub use cli::main_with_args;
