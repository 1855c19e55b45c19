//! Probabilistic audio/text joint embeddings at desk scale.
//!
//! Every input maps to a diagonal Gaussian. Training combines a pairwise
//! sigmoid loss on the corrected similarity, cross-modal and hierarchical
//! inclusion losses over nested mask chains, a mask repulsive loss and a
//! variance regularizer. Evaluation covers retrieval, the inclusion test,
//! uncertainty profiles and embedding-space traversal.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod dump;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod masking;
pub mod model;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use geometry::{DiagGaussian, GaussianGrad, SimilarityParams};
