//! The `affectune` command: one subcommand per pipeline step, plus the
//! listening-study server.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod server;

use clap::Parser;

pub use args::{Cli, Command};
pub use config::CliConfig;
pub use error::{CliError, Result};

/// Parses `argv` and runs the subcommand. Help and version requests come
/// back as `Ok` after printing.
pub fn run_args<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.render().to_string())),
    };
    run(cli)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = CliConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let ctx = commands::Context { config, dry_run: cli.dry_run };
    commands::run(&ctx, cli.command)
}
