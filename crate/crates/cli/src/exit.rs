//! Stable exit codes: 0 ok, 2 usage or config, 3 IO or load, 4 numeric failure.

use std::fmt;

use duostream::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Io,
    Numeric,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Usage => 2,
            Kind::Io => 3,
            Kind::Numeric => 4,
        }
    }
}

/// A classified failure. Commands return `anyhow::Error`; this type rides
/// inside it to pick the exit code.
#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl Failure {
    pub fn new(kind: Kind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

fn classify_library(e: &Error) -> Kind {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Step { .. } | Error::Synth(_) => Kind::Usage,
        Error::NonFinite { .. } => Kind::Numeric,
        Error::Io { .. }
        | Error::Load { .. }
        | Error::Format { .. }
        | Error::MissingFiles { .. }
        | Error::Checkpoint(_)
        | Error::Data(_) => Kind::Io,
    }
}

/// Walks the error chain for the first classifiable cause. Unclassified
/// errors count as IO failures.
pub fn classify(err: &anyhow::Error) -> Kind {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return f.kind;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return classify_library(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return Kind::Io;
        }
    }
    Kind::Io
}
