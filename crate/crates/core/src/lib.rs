//! Face age progression and regression with a global-plus-local residual
//! generator, an age-conditioned quadrant discriminator and frozen
//! identity/age perceptors.
//!
//! Tensors handed to the networks are NCHW batches; [`FaceImage`] is the
//! HWC host-side representation used by the data pipeline and evaluation.

mod container;
pub mod datapipe;
pub mod discriminator;
pub mod error;
pub mod evalkit;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod perceptors;
pub mod toy;
pub mod trainer;

pub use candle_core::{DType, Device, Tensor};
pub use datapipe::{AgeGroup, FaceImage, Landmarks5, ManifestEntry, PatchSpec, NUM_AGE_GROUPS};
pub use discriminator::{Discriminator, DiscriminatorArch};
pub use error::{Error, Result};
pub use generator::{Generator, GeneratorArch};
pub use losses::{LossComponents, LossReport, LossWeights};
pub use perceptors::{ConvPerceptor, IdentityFeatures, Perceptor, PerceptorDescriptor};
pub use trainer::{TrainConfig, TrainState};
