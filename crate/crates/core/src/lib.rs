//! Hierarchical speech-text language modeling at desk scale.
//!
//! Speech-token runs are grouped into patches, the patches are modeled
//! jointly with text tokens by a global transformer, and a local decoder maps
//! global states back to speech tokens.

pub mod corpus;
pub mod patching;
pub mod rng;
pub mod tensor;
pub mod interleave;
pub mod model;
pub mod trainer;
pub mod eval;
