//! Errors mapped to process exit codes.

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_ABORT: u8 = 3;

#[derive(Debug)]
pub enum Failure {
    /// Bad flags, unreadable inputs or incompatible model and data.
    Usage(anyhow::Error),
    /// Training or serving stopped partway.
    Abort { error: anyhow::Error, checkpoint: Option<PathBuf> },
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Abort { .. } => EXIT_ABORT,
        })
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(e) => write!(f, "error: {e:#}"),
            Failure::Abort { error, checkpoint } => {
                write!(f, "aborted: {error:#}")?;
                match checkpoint {
                    Some(p) => write!(f, "\nresume with --resume {}", p.display()),
                    None => write!(f, "\nno checkpoint was written"),
                }
            }
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub trait OrFailure<T> {
    fn usage(self) -> CmdResult<T>;
    fn abort(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> OrFailure<T> for Result<T, E> {
    fn usage(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn abort(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Abort { error: e.into(), checkpoint: None })
    }
}

/// Training errors: aborted runs carry their last checkpoint, invalid
/// configurations are usage errors.
pub fn from_runtime(error: dfab_runtime::Error) -> Failure {
    use dfab_runtime::Error as E;
    match error {
        E::Aborted { ref checkpoint, .. } => {
            let checkpoint = checkpoint.clone();
            Failure::Abort { error: error.into(), checkpoint }
        }
        E::Config(_) | E::Checkpoint(_) | E::Core(dfab_core::Error::Contract(_)) => Failure::Usage(error.into()),
        other => Failure::Abort { error: other.into(), checkpoint: None },
    }
}
