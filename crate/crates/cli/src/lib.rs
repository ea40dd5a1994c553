//! Command implementations behind the `ctxkmp` binary.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numerical.

pub mod args;
pub mod commands;

use clap::Parser;
use ctxkmp::ErrorKind;

pub use args::{Cli, Command};
pub use commands::{cmd_eval, cmd_field, cmd_generate_context, cmd_rollout, cmd_serve, cmd_train};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ctxkmp::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            },
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let out = &cli.out_dir;
    match &cli.command {
        Command::GenerateContext(a) => {
            let p = cmd_generate_context(a, out)?;
            println!("{}", p.display());
        }
        Command::Train(a) => {
            let o = cmd_train(a, out)?;
            println!("{}\n{}", o.model.display(), o.manifest.display());
        }
        Command::Eval(a) => {
            let o = cmd_eval(a, out)?;
            print!("{}", ctxkmp::rollout::reports_to_csv(&o.reports));
            println!("{}", o.csv.display());
        }
        Command::Field(a) => {
            let (csv, json) = cmd_field(a, out)?;
            println!("{}\n{}", csv.display(), json.display());
        }
        Command::Rollout(a) => {
            let p = cmd_rollout(a, out)?;
            println!("{}", p.display());
        }
        Command::Serve(a) => cmd_serve(a)?,
    }
    Ok(())
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
