use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a precondition. `field` names the
    /// offending configuration field or argument.
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    Shape {
        context: &'static str,
        expected: String,
        found: String,
    },

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss at step {step} ({what}): {value}")]
    NonFinite {
        what: &'static str,
        step: usize,
        value: f64,
    },

    /// A persisted artifact failed a magic, version or digest check, or its
    /// upstream hashes do not match the objects it is being loaded against.
    #[error("{what}: expected {expected}, found {found}")]
    Integrity {
        what: String,
        expected: String,
        found: String,
    },

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn integrity(what: impl Into<String>, expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::Integrity {
            what: what.into(),
            expected: expected.into(),
            found: found.into(),
        }
    }

    /// The field name when this is a validation error.
    pub fn field(&self) -> Option<&str> {
        match self {
            Error::Invalid { field, .. } => Some(field),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
