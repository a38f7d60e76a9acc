//! Dialogue act classification with a dynamic memory network over a hierarchical
//! pyramidal utterance encoder, trained with adversarial perturbations of the word
//! embeddings.

pub mod checkpoint;
pub mod convert;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod memory;
pub mod model;
pub mod params;
pub mod predict;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
