//! ProtoVAE: a prototypical variational-autoencoder classifier.
//!
//! The crate trains a self-explainable image classifier whose decisions are
//! linear readouts of similarities to decodable per-class prototypes, and
//! produces pixel-wise explanation maps by layer-wise relevance propagation
//! plus the quantitative faithfulness metrics used to score them.

pub mod error;
pub mod eval;
pub mod explain;
pub mod dataio;
pub mod losses;
pub mod trainer;
pub mod model;
pub mod pgm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
