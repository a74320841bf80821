//! Six-parameter rigid registration maximizing global NCC over a Gaussian
//! pyramid, optimized with Adam.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::RegistrationReport;
use crate::error::{Error, Result};
use crate::field::{apply_rigid, RigidTransform};
use crate::interp::trilinear_grad;
use crate::par;
use crate::sim::{ncc, pearson};
use crate::volio::{downsample2, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidConfig {
    pub levels: usize,
    pub iters_per_level: usize,
    /// Initial translation step, in voxels of the current level.
    pub lr_translation_vox: f64,
    /// Initial rotation step in radians.
    pub lr_rotation: f64,
    /// Learning rate at the end of a level relative to its start.
    pub final_lr_ratio: f64,
}

impl Default for RigidConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            iters_per_level: 80,
            lr_translation_vox: 0.3,
            lr_rotation: 0.01,
            final_lr_ratio: 0.05,
        }
    }
}

fn center_of_mass(v: &Volume) -> Option<[f64; 3]> {
    let (lo, _) = v.min_max();
    let g = v.grid();
    let mut acc = [0.0; 3];
    let mut total = 0.0;
    for (i, &val) in v.channel(0).iter().enumerate() {
        let w = (val - lo) as f64;
        if w > 0.0 {
            let [x, y, z] = g.coords(i);
            let p = g.voxel_to_world([x as f64, y as f64, z as f64]);
            for k in 0..3 {
                acc[k] += w * p[k];
            }
            total += w;
        }
    }
    (total > 0.0).then(|| acc.map(|a| a / total))
}

/// NCC between `fixed` and `moving` resampled through `t`, and its
/// gradient with respect to `[rotation, translation]`.
fn ncc_and_grad(fixed: &[f64], moving: &[f64], vol: &Volume, t: &RigidTransform) -> Result<(f64, [f64; 6])> {
    let g = vol.grid();
    let dims = g.dims;
    let r = t.matrix();
    let dr: [_; 3] = std::array::from_fn(|k| t.matrix_derivative(k));
    let samples = par::map_collect(g.len(), |i| {
        let [x, y, z] = g.coords(i);
        let w = g.voxel_to_world([x as f64, y as f64, z as f64]);
        let q = t.apply_inverse(w);
        let v = g.world_to_voxel(q);
        let (val, gv) = trilinear_grad(moving, dims, v);
        // gradient with respect to world position of the sample
        let gw: [f64; 3] = std::array::from_fn(|a| gv[a] / g.spacing_mm[a]);
        let d: [f64; 3] = std::array::from_fn(|a| w[a] - t.center_mm[a] - t.translation_mm[a]);
        let mut jac = [0.0; 6];
        for k in 0..3 {
            // q = Rᵀ d + c: ∂q/∂θ_k = (∂R/∂θ_k)ᵀ d, ∂q/∂τ = −Rᵀ
            for a in 0..3 {
                let dq: f64 = (0..3).map(|b| dr[k][b][a] * d[b]).sum();
                jac[k] += gw[a] * dq;
            }
            jac[3 + k] = -(0..3).map(|a| gw[a] * r[k][a]).sum::<f64>();
        }
        (val, jac)
    });
    let warped: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let p = pearson(fixed, &warped, None)?;
    let norm = (p.saa * p.sbb).sqrt();
    let mut grad = [0.0; 6];
    for (i, (wv, jac)) in samples.iter().enumerate() {
        let dr_dw = (fixed[i] - p.mean_a) / norm - p.r * (wv - p.mean_b) / p.sbb;
        for k in 0..6 {
            grad[k] += dr_dw * jac[k];
        }
    }
    Ok((p.r, grad))
}

pub fn rigid_register(fixed: &Volume, moving: &Volume, levels: usize) -> Result<(RigidTransform, RegistrationReport)> {
    rigid_register_with(
        fixed,
        moving,
        &RigidConfig {
            levels,
            ..RigidConfig::default()
        },
    )
}

/// Transform `t` (moving → fixed) maximizing NCC between `fixed` and
/// `apply_rigid(moving, t)`. Starts from centre-of-mass alignment and never
/// returns a result worse than the identity.
pub fn rigid_register_with(fixed: &Volume, moving: &Volume, cfg: &RigidConfig) -> Result<(RigidTransform, RegistrationReport)> {
    let start = Instant::now();
    fixed.grid().ensure_same(moving.grid(), "rigid_register")?;
    if cfg.levels == 0 {
        return Err(Error::InvalidArgument("rigid_register needs at least one level".into()));
    }
    let initial = ncc(fixed, moving, None)?;
    let center = fixed.grid().center_world();
    let mut t = RigidTransform::identity(center);
    if let (Some(cf), Some(cm)) = (center_of_mass(fixed), center_of_mass(moving)) {
        t.translation_mm = std::array::from_fn(|k| cf[k] - cm[k]);
    }
    let mut pyramid = vec![(fixed.clone(), moving.clone())];
    for _ in 1..cfg.levels {
        let (f, m) = pyramid.last().unwrap();
        if f.dims().iter().any(|&d| d < 8) {
            break;
        }
        pyramid.push((downsample2(f)?, downsample2(m)?));
    }
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut iterations = 0;
    for (f, m) in pyramid.iter().rev() {
        let fd: Vec<f64> = f.channel(0).iter().map(|&v| v as f64).collect();
        let md: Vec<f64> = m.channel(0).iter().map(|&v| v as f64).collect();
        let sp = f.spacing().iter().fold(f64::INFINITY, |a, &b| a.min(b));
        let mut mom = [0.0; 6];
        let mut vel = [0.0; 6];
        for it in 0..cfg.iters_per_level {
            let (_, g) = ncc_and_grad(&fd, &md, f, &t)?;
            let frac = it as f64 / cfg.iters_per_level.max(2).saturating_sub(1) as f64;
            let decay = cfg.final_lr_ratio + (1.0 - cfg.final_lr_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
            let step = (it + 1) as i32;
            for k in 0..6 {
                // ascend NCC
                let gk = -g[k];
                mom[k] = b1 * mom[k] + (1.0 - b1) * gk;
                vel[k] = b2 * vel[k] + (1.0 - b2) * gk * gk;
                let upd = (mom[k] / (1.0 - b1.powi(step))) / ((vel[k] / (1.0 - b2.powi(step))).sqrt() + eps);
                let lr = if k < 3 { cfg.lr_rotation } else { cfg.lr_translation_vox * sp };
                if k < 3 {
                    t.rotation[k] -= lr * decay * upd;
                } else {
                    t.translation_mm[k - 3] -= lr * decay * upd;
                }
            }
            if !t.rotation.iter().chain(&t.translation_mm).all(|v| v.is_finite()) {
                return Err(Error::Diverged { iterations });
            }
            iterations += 1;
        }
    }
    let mut final_ncc = ncc(fixed, &apply_rigid(moving, &t)?, None)?;
    if final_ncc < initial {
        t = RigidTransform::identity(center);
        final_ncc = initial;
    }
    Ok((
        t,
        RegistrationReport {
            final_loss: -final_ncc,
            ncc: final_ncc,
            initial_ncc: Some(initial),
            iterations,
            wall_time_s: start.elapsed().as_secs_f64(),
            ..RegistrationReport::default()
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Anatomy;
    use crate::rng;
    use crate::volio::Grid;

    fn phantom(n: usize) -> Volume {
        let g = Grid::cube(n, 128.0 / n as f64).unwrap();
        let a = Anatomy::random(&g, &mut rng::rng(11));
        Volume::from_fn(g.clone(), |x, y, z| a.intensity(g.voxel_to_world([x as f64, y as f64, z as f64])) as f32).unwrap()
    }

    #[test]
    fn identical_images_stay_put() {
        let v = phantom(32);
        let (t, rep) = rigid_register(&v, &v, 3).unwrap();
        for k in 0..3 {
            assert!(t.translation_mm[k].abs() < 0.1 * 4.0, "{t:?}");
        }
        assert!(rep.ncc >= rep.initial_ncc.unwrap());
    }

    #[test]
    fn recovers_translation_and_rotation() {
        let m = phantom(32);
        let c = m.grid().center_world();
        let truth = RigidTransform {
            rotation: [0.0, 0.0, 5f64.to_radians()],
            translation_mm: [6.0, 0.0, 0.0],
            center_mm: c,
        };
        let f = apply_rigid(&m, &truth).unwrap();
        let (t, rep) = rigid_register(&f, &m, 4).unwrap();
        assert!((t.translation_mm[0] - 6.0).abs() < 0.5, "{t:?}");
        assert!(t.translation_mm[1].abs() < 0.5 && t.translation_mm[2].abs() < 0.5, "{t:?}");
        assert!((t.rotation[2].to_degrees() - 5.0).abs() < 0.5, "{t:?}");
        assert!(rep.ncc > rep.initial_ncc.unwrap());
    }

    #[test]
    fn flat_image_is_rejected() {
        let g = Grid::cube(8, 1.0).unwrap();
        let flat = Volume::filled(g.clone(), 1.0).unwrap();
        assert!(rigid_register(&flat, &flat, 2).is_err());
    }
}
