use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor or layer contract was violated along a specific axis.
    #[error("{op}: shape mismatch on {axis}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        axis: String,
        expected: String,
        got: String,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("{op}: non-finite value encountered ({what})")]
    NonFinite { op: &'static str, what: String },

    #[error("{0}: empty input")]
    Empty(&'static str),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(
    op: &'static str,
    axis: impl Into<String>,
    expected: impl ToString,
    got: impl ToString,
) -> Error {
    Error::Shape {
        op,
        axis: axis.into(),
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        msg: msg.into(),
    }
}
