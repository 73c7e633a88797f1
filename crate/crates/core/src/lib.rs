//! Shared-specific component factorization of paired feature modalities and
//! a group-sparse linear classifier over the factorized components.
//!
//! The pipeline: [`preprocess`] whitens each modality, [`ssca`] trains one
//! autoencoder layer that splits both inputs into shared and specific parts,
//! [`deepnet`] stacks layers greedily, [`compose`] combines a per-segment
//! local network with a holistic one, and [`sslm`] classifies the resulting
//! component stack. [`baseline`] provides the linear CCA + RICA alternative.

pub mod baseline;
pub mod compose;
pub mod config;
pub mod deepnet;
pub mod error;
pub mod linalg;
pub mod matrixio;
pub mod optim;
pub mod pipeline;
pub mod preprocess;
pub mod ssca;
pub mod sslm;
pub mod stack;
pub mod synth;

pub use error::{Error, Result};
pub use matrixio::{FeatureMatrix, LabelVector};
pub use nalgebra::{DMatrix, DVector};
