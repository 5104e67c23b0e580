//! Command-line front end: training, attack sweeps, certification, sampling
//! and reconstruction, with checkpoint persistence and metric/image export.

pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod pgm;
pub mod source;

pub use commands::{run, Cli};
pub use error::{CliError, Result};
