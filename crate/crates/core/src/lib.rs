//! Motion capture from pairwise distances between a few body-worn ranging
//! sensors and fixed ground anchors.
//!
//! [`edm`] holds the distance-matrix geometry, [`dataio`] the synthetic data
//! and file formats, [`model`] the refinement-generative transformer,
//! [`training`] and [`inference`] its two-stage optimization and
//! autoregressive generation, and [`metrics`] the evaluation suite.

pub mod dataio;
pub mod edm;
pub mod error;
pub mod inference;
mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod training;

pub use dataio::{MotionSequence, SkeletonSpec};
pub use edm::{DistanceMatrix, NoiseConfig, Permutation, PoseFrame};
pub use error::{Result, WipError};
pub use losses::{LossReport, LossWeights, Stage};
pub use model::{ModelConfig, Variant, WipModel};

pub use candle_core::DType;
