use thiserror::Error;

use crate::geometry::Point;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("no boundary crossing between ({}, {}) and ({}, {})", .inside.x, .inside.y, .outside.x, .outside.y)]
    NoCrossing { inside: Point, outside: Point },

    #[error("coefficient error: {0}")]
    Coefficient(String),

    #[error("field error: {0}")]
    Field(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("envelope bound {bound} violated by weight {weight} at ({}, {})", .at.x, .at.y)]
    Envelope { bound: f64, weight: f64, at: Point },

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
