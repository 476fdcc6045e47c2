use thiserror::Error;

use crate::evaluation::EvalError;
use crate::generator::GenerationError;
use crate::langmodel::LmError;
use crate::phonetics::PhoneticsError;
use crate::storyline::StorylineError;
use crate::templates::TemplateError;

/// Top-level error for callers that drive several modules at once.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Phonetics(#[from] PhoneticsError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    LanguageModel(#[from] LmError),
    #[error(transparent)]
    Storyline(#[from] StorylineError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Evaluation(#[from] EvalError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
