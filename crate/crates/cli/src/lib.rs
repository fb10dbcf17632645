//! Library side of the `maskinv` command: configuration, artifact layout and
//! one function per subcommand.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::Context;
pub use config::RunConfig;
pub use error::CliError;
