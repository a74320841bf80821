//! Per-pair optimization of a voxel-wise displacement field on the
//! registration objective, coarse to fine.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::RegistrationReport;
use crate::error::{Error, Result};
use crate::field::{deformed_fraction, jacobian_field, DisplacementField, DEFORMED_EPS};
use crate::interp::trilinear;
use crate::nn::{Adam, Graph, ParamStore, Tensor};
use crate::sim::{dir_loss_graph, volume_tensor};
use crate::volio::{downsample2, gaussian_smooth, Grid, MaskVolume, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectConfig {
    pub levels: usize,
    /// Adam iterations at each level.
    pub iters: usize,
    /// Adam step in voxels of the current level.
    pub lr_vox: f64,
    /// Gaussian smoothing of the gradient before each update, in voxels.
    /// Acts as a preconditioner; the objective is unchanged.
    pub grad_sigma_vox: f64,
}

impl Default for DirectConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            iters: 150,
            lr_vox: 0.05,
            grad_sigma_vox: 1.0,
        }
    }
}

fn to_field(grid: &Grid, t: &Tensor<f32>) -> Result<DisplacementField> {
    DisplacementField::new(Volume::new(grid.clone(), 3, t.data().to_vec())?)
}

/// Coarse field resampled onto the next finer pyramid grid.
fn upsample_field(coarse: &DisplacementField, fine: &Grid) -> Result<DisplacementField> {
    let cg = coarse.grid();
    let mut data = Vec::with_capacity(3 * fine.len());
    for c in 0..3 {
        let src = coarse.component(c);
        for i in 0..fine.len() {
            let [x, y, z] = fine.coords(i);
            let p = cg.world_to_voxel(fine.voxel_to_world([x as f64, y as f64, z as f64]));
            data.push(trilinear(src, cg.dims, p.map(|v| v as f32)));
        }
    }
    DisplacementField::new(Volume::new(fine.clone(), 3, data)?)
}

pub fn direct_field_register(
    fixed: &Volume,
    moving: &Volume,
    lambda: f64,
    iters: usize,
) -> Result<(DisplacementField, RegistrationReport)> {
    direct_field_register_with(
        fixed,
        moving,
        lambda,
        &DirectConfig {
            iters,
            ..DirectConfig::default()
        },
        None,
    )
}

/// Minimizes `−NCC(fixed, warp(moving, u)) + λ·penalty(u)` over `u`.
pub fn direct_field_register_with(
    fixed: &Volume,
    moving: &Volume,
    lambda: f64,
    cfg: &DirectConfig,
    mask: Option<&MaskVolume>,
) -> Result<(DisplacementField, RegistrationReport)> {
    let start = Instant::now();
    fixed.grid().ensure_same(moving.grid(), "direct_field_register")?;
    if let Some(m) = mask {
        fixed.grid().ensure_same(m.grid(), "direct_field_register mask")?;
    }
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda {lambda}")));
    }
    let mut pyramid = vec![(fixed.clone(), moving.clone(), mask.map(|m| m.to_volume()))];
    for _ in 1..cfg.levels.max(1) {
        let (f, m, k) = pyramid.last().unwrap();
        if f.dims().iter().any(|&d| d < 8) {
            break;
        }
        let k = k.as_ref().map(downsample2).transpose()?;
        pyramid.push((downsample2(f)?, downsample2(m)?, k));
    }
    let adam = Adam::default();
    let mut field: Option<DisplacementField> = None;
    let mut iterations = 0;
    let mut last = (0.0, 0.0, 0.0);
    for (f, m, k) in pyramid.iter().rev() {
        let grid = f.grid().clone();
        let init = match &field {
            Some(u) => upsample_field(u, &grid)?,
            None => DisplacementField::zeros(grid.clone()),
        };
        let level_mask: Option<Vec<u8>> = k.as_ref().map(|k| k.data().iter().map(|&v| (v >= 0.5) as u8).collect());
        let [nx, ny, nz] = grid.dims;
        let mut store = ParamStore::<f32>::new();
        let id = store.add_param("flow", Tensor::new(vec![1, 3, nz, ny, nx], init.volume().data().to_vec())?);
        let ft = volume_tensor::<f32>(f);
        let mt = volume_tensor::<f32>(m);
        let lr = cfg.lr_vox * grid.spacing_mm.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        let mut best: Option<(f64, Tensor<f32>)> = None;
        for _ in 0..cfg.iters {
            let mut g = Graph::<f32>::new();
            let fv = g.constant(ft.clone());
            let mv = g.constant(mt.clone());
            let flow = g.param(&store, id);
            let (loss, sim, pen) = dir_loss_graph(&mut g, fv, mv, flow, grid.spacing_mm, lambda, level_mask.as_deref())?;
            let l = g.value(loss).item() as f64;
            if !l.is_finite() {
                return Err(Error::Diverged { iterations });
            }
            last = (l, g.value(sim).item() as f64, g.value(pen).item() as f64);
            if best.as_ref().is_none_or(|(b, _)| l < *b) {
                best = Some((l, store.param(id).clone()));
            }
            let grads = g.backward(loss)?.params(&store);
            let grads = if cfg.grad_sigma_vox > 0.0 {
                grads
                    .into_iter()
                    .map(|(pid, gv)| {
                        let v = Volume::new(grid.clone(), 3, gv)?;
                        Ok((pid, gaussian_smooth(&v, cfg.grad_sigma_vox)?.into_data()))
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                grads
            };
            adam.step(&mut store, &grads, lr);
            iterations += 1;
        }
        // evaluate the final iterate too
        let mut g = Graph::<f32>::new();
        let fv = g.constant(ft.clone());
        let mv = g.constant(mt.clone());
        let flow = g.constant(store.param(id).clone());
        let (loss, sim, pen) = dir_loss_graph(&mut g, fv, mv, flow, grid.spacing_mm, lambda, level_mask.as_deref())?;
        let l = g.value(loss).item() as f64;
        if l.is_finite() && best.as_ref().is_none_or(|(b, _)| l < *b) {
            best = Some((l, store.param(id).clone()));
            last = (l, g.value(sim).item() as f64, g.value(pen).item() as f64);
        } else if let Some((b, t)) = &best {
            let mut g = Graph::<f32>::new();
            let fv = g.constant(ft.clone());
            let mv = g.constant(mt.clone());
            let flow = g.constant(t.clone());
            let (_, sim, pen) = dir_loss_graph(&mut g, fv, mv, flow, grid.spacing_mm, lambda, level_mask.as_deref())?;
            last = (*b, g.value(sim).item() as f64, g.value(pen).item() as f64);
        }
        let (_, t) = best.expect("at least one evaluation");
        field = Some(to_field(&grid, &t)?);
    }
    let field = field.expect("at least one level");
    let frac = deformed_fraction(&jacobian_field(&field)?, DEFORMED_EPS)?;
    Ok((
        field,
        RegistrationReport {
            final_loss: last.0,
            ncc: last.1,
            penalty: Some(last.2),
            deformed_fraction: Some(frac),
            iterations,
            wall_time_s: start.elapsed().as_secs_f64(),
            ..RegistrationReport::default()
        },
    ))
}
