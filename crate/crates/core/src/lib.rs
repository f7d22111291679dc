pub mod chx;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod fea;
pub mod linalg;
pub mod metamodel;
pub mod metrics;
pub mod pattern;
pub mod synth;

pub use error::{Error, Result};
pub use pattern::{Pattern, PatternMeta, PatternSource};

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
