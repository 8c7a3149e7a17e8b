mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use thiserror::Error;
use tumorseg::ErrorKind;

/// Failure of one command, mapped onto the process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Library(#[from] tumorseg::Error),
    #[error("could not write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Plot(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Library(e) if e.kind() == ErrorKind::Data => 2,
            _ => 3,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "Usage",
            CliError::Library(e) => e.code(),
            CliError::Write { .. } => "DiskFull",
            CliError::Plot(_) => "PlotFailed",
        }
    }
}

macro_rules! lib_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Library(e.into())
            }
        }
    )*};
}

lib_error!(
    tumorseg::volume_io::VolumeError,
    tumorseg::data_pipeline::PipelineError,
    tumorseg::unet::ModelError,
    tumorseg::trainer::TrainError,
    tumorseg::evaluation_report::EvalError
);

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let matches = match config::build_cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind as K;
            let _ = e.print();
            return match e.kind() {
                K::DisplayHelp | K::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match commands::run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e.exit_code() {
                1 => "usage",
                2 => "data",
                _ => "runtime",
            };
            eprintln!("error code={} kind={kind} message={:?}", e.code(), e.to_string());
            ExitCode::from(e.exit_code())
        }
    }
}
