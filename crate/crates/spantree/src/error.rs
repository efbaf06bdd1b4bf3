/// Errors produced by any part of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Malformed input text. The message carries the line number when known.
    #[error("parse error: {0}")]
    Parse(String),

    /// I/O failure with the path that was being accessed.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// The peer sent something that does not match the wire protocol, or the
    /// collective participants disagree (sequence, length or op mismatch).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A socket-level failure: connect/accept/read/write errors, peer
    /// disconnects mid-collective, session aborts.
    #[error("communication error: {0}")]
    Comm(String),

    /// A feature index does not fit the model dimension.
    #[error("feature index {index} outside model dimension {dim}")]
    Dimension { index: usize, dim: usize },

    /// Invalid configuration (bad strategy parameters, flag combinations).
    #[error("configuration error: {0}")]
    Config(String),

    /// A metric is undefined for the given input (e.g. single-class auROC).
    #[error("metric undefined: {0}")]
    Metric(String),

    /// A strategy phase failed; tags the failure with the phase name.
    #[error("{phase} phase failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    /// Cluster harness failure (worker crashes, launch timeouts).
    #[error("harness error: {0}")]
    Harness(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn parse_at(line: usize, msg: impl std::fmt::Display) -> Self {
        Error::Parse(format!("line {line}: {msg}"))
    }

    pub fn in_phase(phase: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Phase {
            phase,
            source: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
