use thiserror::Error;

/// Errors raised by the geometry, optimizer, network and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or base points do not line up.
    #[error("structural error: {0}")]
    Structure(String),

    /// A point was expected on a manifold but fails its constraint.
    #[error("constraint violated: {what} (violation {violation:.3e}, tolerance {tolerance:.3e})")]
    Constraint {
        what: String,
        violation: f64,
        tolerance: f64,
    },

    /// Retraction input is degenerate (zero column, rank deficiency).
    #[error("singular step: {0}")]
    SingularStep(String),

    #[error("map not supported on the {0} manifold")]
    UnsupportedMap(&'static str),

    /// Non-finite values in gradients, activations or losses.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("state error: {0}")]
    State(String),

    /// Invalid configuration; `key` is the dotted path of the offending entry.
    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    /// Malformed dataset input, positioned by byte offset or row.
    #[error("input error at {position}: {message}")]
    Input { position: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn input(position: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Input {
            position: position.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
