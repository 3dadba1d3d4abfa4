use std::path::PathBuf;

use rosetta_core::datagen::GenError;
use rosetta_core::eval::EvalError;
use rosetta_core::model::ModelError;
use rosetta_core::train::TrainError;

/// Process exit status for a successful run.
pub const EXIT_OK: i32 = 0;
/// Invalid flags, configuration or input contents.
pub const EXIT_VALIDATION: i32 = 1;
/// A file or directory could not be read or written.
pub const EXIT_IO: i32 = 2;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}: no font files found")]
    NoFonts(PathBuf),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

fn gen_is_io(e: &GenError) -> bool {
    matches!(e, GenError::Io { .. })
}

fn model_is_io(e: &ModelError) -> bool {
    matches!(e, ModelError::Io { .. })
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        let io = match self {
            CliError::Io { .. } | CliError::NoFonts(_) => true,
            CliError::Gen(e) => gen_is_io(e),
            CliError::Model(e) => model_is_io(e),
            CliError::Train(e) => match e {
                TrainError::Io { .. } => true,
                TrainError::Gen(g) => gen_is_io(g),
                TrainError::Model(m) => model_is_io(m),
                _ => false,
            },
            CliError::Eval(e) => match e {
                EvalError::Io { .. } => true,
                EvalError::Gen(g) => gen_is_io(g),
                EvalError::Model(m) => model_is_io(m),
                _ => false,
            },
            CliError::Usage(_) | CliError::Config { .. } => false,
        };
        if io {
            EXIT_IO
        } else {
            EXIT_VALIDATION
        }
    }

    /// The message on one line, with any embedded line breaks folded.
    pub fn diagnostic(&self) -> String {
        self.to_string().replace(['\r', '\n'], " ")
    }
}
