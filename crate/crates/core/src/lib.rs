//! Gist-token context compression experiments on a small decoder.

pub mod compress;
pub mod constructions;
pub mod error;
pub mod expcli;
pub mod gradsuite;
pub mod layers;
pub mod masks;
pub mod model;
pub mod optim;
pub mod recall;
pub mod rng;
pub mod scalar;
pub mod synthpool;
pub mod tape;

pub use error::{Error, Result};
pub use scalar::Scalar;
