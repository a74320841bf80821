//! Longitudinal deformation analysis for head-and-neck radiotherapy.
//!
//! The crate covers the full chain from volumes on disk to toxicity
//! predictions:
//!
//! * [`volio`]: the [`Volume`] data model, the `v3j` file format and
//!   preprocessing (isotropic resampling, normalization, cropping, masking).
//! * [`field`]: rigid transforms, displacement-field warping and
//!   composition, Jacobian matrix fields.
//! * [`sim`]: global NCC and the L2 gradient penalty used by registration.
//! * [`nn`]: a small reverse-mode autodiff graph with the layers needed by
//!   the registration UNet and the toxicity classifier.
//! * [`regnet`]: rigid pre-alignment, UNet and direct-field deformable
//!   registration, and the two-stage CT → CBCT₀ → CBCTₜ pipeline.
//! * [`toxnet`]: the multi-branch 3D ResNet + clinical MLP classifier.
//! * [`cohort`]: clinical records, one-hot encoding and synthetic
//!   phantom/cohort generators.
//! * [`evalx`]: metrics, cross-validation and study runners.
//!
//! Voxel loops run through [`par`], which uses rayon when the `parallel`
//! feature is enabled and falls back to plain iteration otherwise. Results
//! do not depend on the thread count.

pub mod checks;
pub mod cohort;
pub mod error;
pub mod evalx;
pub mod field;
pub mod interp;
pub mod nn;
pub mod par;
pub mod real;
pub mod regnet;
pub mod rng;
pub mod sim;
pub mod toxnet;
pub mod volio;

pub use error::{Error, Result};
pub use field::{DisplacementField, JacobianField, RigidTransform};
pub use real::Real;
pub use volio::{Grid, MaskVolume, Volume};
