//! Registration engines: rigid pre-alignment, the UNet registration model,
//! the per-pair direct-field optimizer, and the two-stage
//! CT → CBCT₀ → CBCTₜ pipeline.

mod direct;
mod pipeline;
mod rigid;
mod unet;

use serde::{Deserialize, Serialize};

pub use direct::{direct_field_register, direct_field_register_with, DirectConfig};
pub use pipeline::{two_stage_apply, DirectEngine, DvfEngine, TwoStageResult};
pub use rigid::{rigid_register, rigid_register_with, RigidConfig};
pub use unet::{predict_dvf, train_dir, DirModel, DirTrainConfig, UNet, UNetConfig};

/// Which half of the pipeline a deformable model serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Planning CT onto the first cone-beam scan.
    Modality,
    /// First cone-beam scan onto a later one.
    Anatomy,
}

impl Stage {
    /// Default regularization weight of the stage.
    pub fn default_lambda(self) -> f64 {
        match self {
            Stage::Modality => 1.0,
            Stage::Anatomy => 0.5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Modality => "modality",
            Stage::Anatomy => "anatomy",
        }
    }

    pub fn expect(self, found: Stage) -> crate::Result<()> {
        if self == found {
            Ok(())
        } else {
            Err(crate::Error::StageMismatch {
                expected: self.name().into(),
                found: found.name().into(),
            })
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub final_loss: f64,
    pub ncc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_ncc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub penalty: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deformed_fraction: Option<f64>,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    pub wall_time_s: f64,
}
