use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch on {axis}: expected {expected}, got {actual}")]
    Dimension {
        axis: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("registration error: infrared is {ir_h}x{ir_w}, visible is {vi_h}x{vi_w}")]
    Registration {
        ir_h: usize,
        ir_w: usize,
        vi_h: usize,
        vi_w: usize,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(axis: &'static str, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            axis,
            expected,
            actual,
        }
    }

    /// True for failures reading or writing external files, as opposed to
    /// invalid inputs or configuration.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Format(_) | Error::Image(_))
    }
}
