use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid label {label} at index {index} (class count {classes})")]
    InvalidLabel { label: u8, index: usize, classes: usize },
    #[error("configuration error in `{field}`: {reason}")]
    Config { field: &'static str, reason: String },
    #[error("shape error at layer {layer}: {reason}")]
    Shape { layer: usize, reason: String },
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("non-finite value in `{component}`")]
    NonFinite { component: &'static str },
    #[error("could not draw a non-degenerate scene after {attempts} attempts")]
    DegenerateGeometry { attempts: usize },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Config { field, reason: reason.into() }
    }

    pub fn shape(layer: usize, reason: impl Into<String>) -> Self {
        Error::Shape { layer, reason: reason.into() }
    }

    pub fn format(offset: usize, reason: impl Into<String>) -> Self {
        Error::Format { offset, reason: reason.into() }
    }
}
