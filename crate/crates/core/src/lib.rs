//! Multi-aspect knowledge-enhanced vision-language pretraining at desk scale.
//!
//! The crate covers the whole pipeline: an enhanced image-text data model
//! with a synthetic corpus generator ([`corpus`]), toy dual encoders
//! ([`encoders`]) on a small reverse-mode differentiation engine
//! ([`autodiff`]), the multi-positive contrastive / fine-grained alignment /
//! diagnosis-weighted loss stack ([`losses`]), a deterministic trainer
//! ([`trainer`]) and a zero-shot evaluation and ablation harness
//! ([`evaluator`]).

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod losses;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

/// FNV-1a, 64-bit. Used for token ids and config fingerprints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

#[cfg(test)]
mod tests {
    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(super::fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(super::fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(super::fnv1a64(b"foobar"), 0x85944171f73967e8);
    }
}
