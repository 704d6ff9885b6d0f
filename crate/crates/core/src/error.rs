use thiserror::Error;

/// Errors raised by the calibration, prediction and monitoring pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("probability vector needs at least 2 classes, got {0}")]
    TooFewClasses(usize),

    #[error("entry {index} is not a finite non-negative number ({value})")]
    InvalidEntry { index: usize, value: f64 },

    #[error("probabilities sum to {sum}, more than 1e-3 away from 1")]
    NotNormalized { sum: f64 },

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("class count mismatch: expected {expected}, got {actual}")]
    ClassCountMismatch { expected: usize, actual: usize },

    #[error("{name} must lie in {range}, got {value}")]
    OutOfRange {
        name: &'static str,
        range: &'static str,
        value: f64,
    },

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("test set is identical to the calibration set")]
    CalibrationReuse,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_unit(name: &'static str, value: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(Error::OutOfRange {
            name,
            range: "[0, 1]",
            value,
        })
    }
}
