//! Command line and network front end for the chunkplay engine.

pub mod commands;
pub mod server;

pub use commands::{run, Cli};
