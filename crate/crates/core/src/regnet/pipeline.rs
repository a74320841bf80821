//! Two-stage application: rigid alignment, modality correction, then the
//! anatomical change, composed into one field.

use serde::{Deserialize, Serialize};

use super::direct::{direct_field_register_with, DirectConfig};
use super::unet::{predict_dvf, DirModel};
use super::Stage;
use crate::error::Result;
use crate::field::{apply_rigid, compose, deformed_fraction, jacobian_field, warp, DisplacementField, JacobianField, RigidTransform, DEFORMED_EPS};
use crate::volio::{MaskVolume, Volume};

/// Anything that maps a `(fixed, moving)` pair to a displacement field for
/// one pipeline stage.
pub trait DvfEngine {
    fn stage(&self) -> Stage;
    fn register(&self, fixed: &Volume, moving: &Volume) -> Result<DisplacementField>;
}

impl DvfEngine for DirModel {
    fn stage(&self) -> Stage {
        self.stage
    }

    fn register(&self, fixed: &Volume, moving: &Volume) -> Result<DisplacementField> {
        predict_dvf(self, fixed, moving)
    }
}

/// Per-pair optimization standing in for a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectEngine {
    pub stage: Stage,
    pub lambda: f64,
    pub config: DirectConfig,
    /// Restrict the similarity term to the fixed image's body.
    #[serde(skip)]
    pub mask: Option<MaskVolume>,
}

impl DirectEngine {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            lambda: stage.default_lambda(),
            config: DirectConfig::default(),
            mask: None,
        }
    }
}

impl DvfEngine for DirectEngine {
    fn stage(&self) -> Stage {
        self.stage
    }

    fn register(&self, fixed: &Volume, moving: &Volume) -> Result<DisplacementField> {
        Ok(direct_field_register_with(fixed, moving, self.lambda, &self.config, self.mask.as_ref())?.0)
    }
}

#[derive(Clone, Debug)]
pub struct TwoStageResult {
    pub aligned_ct: Volume,
    pub u_modality: DisplacementField,
    pub u_anatomy: DisplacementField,
    /// `compose(u_modality, u_anatomy)` on the scan grid.
    pub composed: DisplacementField,
    pub jf: JacobianField,
    pub deformed_fraction: f64,
}

/// Aligns `pct` rigidly onto `cbct_t`, corrects the modality gap with
/// `model_a`, then registers the aligned CT to `cbct_t` with `model_b`.
/// `warp(apply_rigid(pct, rigid), composed)` approximates `cbct_t`.
pub fn two_stage_apply(
    model_a: &dyn DvfEngine,
    model_b: &dyn DvfEngine,
    pct: &Volume,
    cbct_t: &Volume,
    rigid: &RigidTransform,
) -> Result<TwoStageResult> {
    Stage::Modality.expect(model_a.stage())?;
    Stage::Anatomy.expect(model_b.stage())?;
    pct.grid().ensure_same(cbct_t.grid(), "two_stage_apply")?;
    let pct_rigid = apply_rigid(pct, rigid)?;
    let u_a = model_a.register(cbct_t, &pct_rigid)?;
    let aligned_ct = warp(&pct_rigid, &u_a)?;
    let u_b = model_b.register(cbct_t, &aligned_ct)?;
    let composed = compose(&u_a, &u_b)?;
    let jf = jacobian_field(&composed)?;
    let frac = deformed_fraction(&jf, DEFORMED_EPS)?;
    Ok(TwoStageResult {
        aligned_ct,
        u_modality: u_a,
        u_anatomy: u_b,
        composed,
        jf,
        deformed_fraction: frac,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Anatomy;
    use crate::regnet::UNetConfig;
    use crate::rng;
    use crate::volio::Grid;

    fn phantom(n: usize) -> Volume {
        let g = Grid::cube(n, 128.0 / n as f64).unwrap();
        let a = Anatomy::random(&g, &mut rng::rng(2));
        Volume::from_fn(g.clone(), |x, y, z| a.intensity(g.voxel_to_world([x as f64, y as f64, z as f64])) as f32).unwrap()
    }

    #[test]
    fn stage_tags_are_enforced() {
        let v = phantom(16);
        let id = RigidTransform::identity(v.grid().center_world());
        let a = DirectEngine::new(Stage::Modality);
        let b = DirectEngine::new(Stage::Anatomy);
        assert!(matches!(two_stage_apply(&b, &a, &v, &v, &id), Err(crate::Error::StageMismatch { .. })));
        assert!(two_stage_apply(&a, &a, &v, &v, &id).is_err());
    }

    #[test]
    fn identity_inputs_give_small_composed_field() {
        let v = phantom(16);
        let id = RigidTransform::identity(v.grid().center_world());
        let cfg = UNetConfig { encoder_channels: vec![4, 8], decoder_channels: vec![8, 8, 4, 4] };
        let a = DirModel::new(&cfg, Stage::Modality, 1.0, 1).unwrap();
        let b = DirModel::new(&cfg, Stage::Anatomy, 0.5, 2).unwrap();
        let out = two_stage_apply(&a, &b, &v, &v, &id).unwrap();
        assert!(out.composed.mean_norm(None) < 0.2);
        let mut da = DirectEngine::new(Stage::Modality);
        da.config.iters = 20;
        let mut db = DirectEngine::new(Stage::Anatomy);
        db.config.iters = 20;
        let out = two_stage_apply(&da, &db, &v, &v, &id).unwrap();
        assert!(out.composed.mean_norm(None) < 0.2);
        assert!(out.u_anatomy.max_norm() < 0.1);
    }
}
