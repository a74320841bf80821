//! Geometric transforms: rigid maps, displacement-field warping and
//! composition, and Jacobian matrix fields.
//!
//! Displacement fields use the pull-back convention: a field `u` stored on
//! the fixed grid maps the fixed point `x` to `x + u(x)` in the moving image,
//! so `warp(M, u)(x) = M(x + u(x))`. Displacements are in millimetres and are
//! divided by the spacing before sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::{trilinear, trilinear_f64};
use crate::par;
use crate::real::Real;
use crate::volio::{Grid, MaskVolume, Volume};

pub type Mat3 = [[f64; 3]; 3];

fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

fn transpose(a: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| a[j][i]))
}

fn matvec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| (0..3).map(|k| a[i][k] * v[k]).sum())
}

fn rot_x(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Derivatives of `rot_*` with respect to the angle.
fn drot(axis: usize, a: f64) -> Mat3 {
    let (s, c) = a.sin_cos();
    match axis {
        0 => [[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]],
        1 => [[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]],
        _ => [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]],
    }
}

/// Rigid map `p ↦ R·(p − center) + center + translation` taking moving
/// coordinates to fixed coordinates. `R = Rz(γ)·Ry(β)·Rx(α)` with
/// `rotation = [α, β, γ]` in radians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [f64; 3],
    pub translation_mm: [f64; 3],
    pub center_mm: [f64; 3],
}

impl RigidTransform {
    pub fn identity(center_mm: [f64; 3]) -> Self {
        Self {
            rotation: [0.0; 3],
            translation_mm: [0.0; 3],
            center_mm,
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            rotation: [0.0; 3],
            translation_mm: t,
            center_mm: [0.0; 3],
        }
    }

    pub fn matrix(&self) -> Mat3 {
        let [a, b, g] = self.rotation;
        matmul(&rot_z(g), &matmul(&rot_y(b), &rot_x(a)))
    }

    /// `∂R/∂rotation[k]`.
    pub fn matrix_derivative(&self, k: usize) -> Mat3 {
        let [a, b, g] = self.rotation;
        match k {
            0 => matmul(&rot_z(g), &matmul(&rot_y(b), &drot(0, a))),
            1 => matmul(&rot_z(g), &matmul(&drot(1, b), &rot_x(a))),
            _ => matmul(&drot(2, g), &matmul(&rot_y(b), &rot_x(a))),
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.matrix();
        let d = std::array::from_fn(|i| p[i] - self.center_mm[i]);
        let q = matvec(&r, d);
        std::array::from_fn(|i| q[i] + self.center_mm[i] + self.translation_mm[i])
    }

    pub fn apply_inverse(&self, q: [f64; 3]) -> [f64; 3] {
        let rt = transpose(&self.matrix());
        let d = std::array::from_fn(|i| q[i] - self.center_mm[i] - self.translation_mm[i]);
        let p = matvec(&rt, d);
        std::array::from_fn(|i| p[i] + self.center_mm[i])
    }

    pub fn inverse(&self) -> Self {
        let rt = transpose(&self.matrix());
        let t = matvec(&rt, self.translation_mm);
        Self {
            rotation: euler_zyx(&rt),
            translation_mm: [-t[0], -t[1], -t[2]],
            center_mm: self.center_mm,
        }
    }

    /// `self ∘ other` (apply `other` first), expressed about `other`'s centre.
    pub fn compose(&self, other: &Self) -> Self {
        let ra = self.matrix();
        let r = matmul(&ra, &other.matrix());
        let cb = other.center_mm;
        let inner: [f64; 3] =
            std::array::from_fn(|i| cb[i] + other.translation_mm[i] - self.center_mm[i]);
        let moved = matvec(&ra, inner);
        Self {
            rotation: euler_zyx(&r),
            translation_mm: std::array::from_fn(|i| {
                moved[i] + self.center_mm[i] + self.translation_mm[i] - cb[i]
            }),
            center_mm: cb,
        }
    }
}

/// Euler angles `[α, β, γ]` of `Rz(γ)·Ry(β)·Rx(α)`.
pub fn euler_zyx(r: &Mat3) -> [f64; 3] {
    let beta = (-r[2][0]).clamp(-1.0, 1.0).asin();
    let alpha = r[2][1].atan2(r[2][2]);
    let gamma = r[1][0].atan2(r[0][0]);
    [alpha, beta, gamma]
}

fn check_finite(v: &Volume, what: &str) -> Result<()> {
    if v.data().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Per-voxel displacement in millimetres, stored as a 3-channel volume
/// (channels x, y, z).
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField(Volume);

impl DisplacementField {
    pub fn new(vol: Volume) -> Result<Self> {
        if vol.channels() != 3 {
            return Err(Error::Shape(format!(
                "displacement field needs 3 channels, got {}",
                vol.channels()
            )));
        }
        check_finite(&vol, "displacement field")?;
        Ok(Self(vol))
    }

    pub fn zeros(grid: Grid) -> Self {
        Self(Volume::zeros(grid, 3).expect("validated grid"))
    }

    pub fn uniform(grid: Grid, d: [f64; 3]) -> Self {
        Self::from_fn(grid, |_, _, _| d)
    }

    /// Field from a function of the voxel index, values in millimetres.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> [f64; 3]) -> Self {
        let n = grid.len();
        let mut data = vec![0.0f32; 3 * n];
        for i in 0..n {
            let [x, y, z] = grid.coords(i);
            let v = f(x, y, z);
            for c in 0..3 {
                data[c * n + i] = v[c] as f32;
            }
        }
        Self(Volume::new(grid, 3, data).expect("consistent length"))
    }

    /// Pull-back field of a rigid map: `u(x) = t⁻¹(x) − x`.
    pub fn from_rigid(grid: Grid, t: &RigidTransform) -> Self {
        let g = grid.clone();
        Self::from_fn(grid, |x, y, z| {
            let w = g.voxel_to_world([x as f64, y as f64, z as f64]);
            let p = t.apply_inverse(w);
            [p[0] - w[0], p[1] - w[1], p[2] - w[2]]
        })
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    pub fn grid(&self) -> &Grid {
        self.0.grid()
    }

    pub fn component(&self, c: usize) -> &[f32] {
        self.0.channel(c)
    }

    pub fn vector(&self, i: usize) -> [f64; 3] {
        std::array::from_fn(|c| self.0.channel(c)[i] as f64)
    }

    /// Trilinear sample at a world point, millimetres.
    pub fn sample_world(&self, p: [f64; 3]) -> [f64; 3] {
        let v = self.grid().world_to_voxel(p);
        let dims = self.grid().dims;
        std::array::from_fn(|c| trilinear_f64(self.0.channel(c), dims, v))
    }

    pub fn norms(&self) -> Vec<f64> {
        (0..self.grid().len())
            .map(|i| {
                let v = self.vector(i);
                (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
            })
            .collect()
    }

    pub fn max_norm(&self) -> f64 {
        self.norms().into_iter().fold(0.0, f64::max)
    }

    /// Mean displacement magnitude, optionally restricted to a mask.
    pub fn mean_norm(&self, mask: Option<&MaskVolume>) -> f64 {
        let norms = self.norms();
        let (s, n) = norms
            .iter()
            .enumerate()
            .filter(|(i, _)| mask.is_none_or(|m| m.data()[*i] == 1))
            .fold((0.0, 0usize), |(s, n), (_, v)| (s + v, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self(self.0.map(|v| (v as f64 * k) as f32))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.grid().ensure_same(other.grid(), "field add")?;
        let data = self
            .0
            .data()
            .iter()
            .zip(other.0.data())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self(self.0.with_data(data)?))
    }
}

/// Per-voxel 3×3 Jacobian of `x ↦ x + u(x)`, 9 channels in row-major order
/// (`J11, J12, J13, J21, …, J33`), `J_ij = δ_ij + ∂u_i/∂x_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianField(Volume);

impl JacobianField {
    pub fn new(vol: Volume) -> Result<Self> {
        if vol.channels() != 9 {
            return Err(Error::Shape(format!(
                "jacobian field needs 9 channels, got {}",
                vol.channels()
            )));
        }
        Ok(Self(vol))
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    pub fn into_volume(self) -> Volume {
        self.0
    }

    pub fn grid(&self) -> &Grid {
        self.0.grid()
    }

    pub fn matrix(&self, i: usize) -> Mat3 {
        std::array::from_fn(|r| std::array::from_fn(|c| self.0.channel(3 * r + c)[i] as f64))
    }
}

/// Samples `vol` at `x + u(x)/spacing` for every voxel `x` of the shared grid.
pub fn warp(vol: &Volume, dvf: &DisplacementField) -> Result<Volume> {
    vol.grid().ensure_same(dvf.grid(), "warp")?;
    let g = vol.grid();
    let dims = g.dims;
    let sp = g.spacing_mm.map(|s| s as f32);
    let plane = dims[0] * dims[1];
    let nz = dims[2];
    let n = g.len();
    let (ux, uy, uz) = (dvf.component(0), dvf.component(1), dvf.component(2));
    let mut out = vec![0.0f32; vol.data().len()];
    par::for_each_chunk_mut(&mut out, plane, |i, chunk| {
        let (c, z) = (i / nz, i % nz);
        let src = vol.channel(c);
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let j = z * plane + y * dims[0] + x;
                let p = [
                    x as f32 + ux[j] / sp[0],
                    y as f32 + uy[j] / sp[1],
                    z as f32 + uz[j] / sp[2],
                ];
                chunk[y * dims[0] + x] = trilinear(src, dims, p);
            }
        }
    });
    debug_assert_eq!(out.len(), n * vol.channels());
    vol.with_data(out)
}

/// Pull-back through a rigid map: `out(x) = vol(t⁻¹(x))`, trilinear, border
/// clamping, on the input grid.
pub fn apply_rigid(vol: &Volume, t: &RigidTransform) -> Result<Volume> {
    let g = vol.grid().clone();
    let dims = g.dims;
    let plane = dims[0] * dims[1];
    let nz = dims[2];
    let mut out = vec![0.0f32; vol.data().len()];
    par::for_each_chunk_mut(&mut out, plane, |i, chunk| {
        let (c, z) = (i / nz, i % nz);
        let src = vol.channel(c);
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let w = g.voxel_to_world([x as f64, y as f64, z as f64]);
                let v = g.world_to_voxel(t.apply_inverse(w));
                chunk[y * dims[0] + x] = trilinear(src, dims, v.map(|a| a as f32));
            }
        }
    });
    vol.with_data(out)
}

/// `u₁₂(x) = u_second(x) + u_first(x + u_second(x))`, so that
/// `warp(warp(M, u_first), u_second) = warp(M, u₁₂)`.
pub fn compose(u_first: &DisplacementField, u_second: &DisplacementField) -> Result<DisplacementField> {
    u_first.grid().ensure_same(u_second.grid(), "compose")?;
    let g = u_first.grid();
    let dims = g.dims;
    let sp = g.spacing_mm.map(|s| s as f32);
    let plane = dims[0] * dims[1];
    let nz = dims[2];
    let (sx, sy, sz) = (u_second.component(0), u_second.component(1), u_second.component(2));
    let mut out = vec![0.0f32; 3 * g.len()];
    par::for_each_chunk_mut(&mut out, plane, |i, chunk| {
        let (c, z) = (i / nz, i % nz);
        let first = u_first.component(c);
        let second = u_second.component(c);
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let j = z * plane + y * dims[0] + x;
                let p = [
                    x as f32 + sx[j] / sp[0],
                    y as f32 + sy[j] / sp[1],
                    z as f32 + sz[j] / sp[2],
                ];
                chunk[y * dims[0] + x] = second[j] + trilinear(first, dims, p);
            }
        }
    });
    DisplacementField::new(Volume::new(g.clone(), 3, out)?)
}

/// Folds a rigid map into a deformable field: the result maps a fixed point
/// `x` to `t⁻¹(x + u(x))`.
pub fn compose_rigid(dvf: &DisplacementField, t: &RigidTransform) -> DisplacementField {
    let g = dvf.grid().clone();
    let gg = g.clone();
    DisplacementField::from_fn(g, |x, y, z| {
        let i = gg.index(x, y, z);
        let w = gg.voxel_to_world([x as f64, y as f64, z as f64]);
        let u = dvf.vector(i);
        let p = t.apply_inverse([w[0] + u[0], w[1] + u[1], w[2] + u[2]]);
        [p[0] - w[0], p[1] - w[1], p[2] - w[2]]
    })
}

/// Jacobian kernel over raw components (`u[c]` has x fastest), generic over
/// precision. Central differences over `2h` in the interior, one-sided at
/// the borders, derivatives in mm/mm. Returns 9 row-major channels.
pub fn jacobian_components<T: Real>(u: [&[T]; 3], dims: [usize; 3], spacing_mm: [f64; 3]) -> Result<Vec<Vec<T>>> {
    if dims.iter().any(|&d| d < 3) {
        return Err(Error::InvalidArgument(format!(
            "jacobian needs ≥ 3 voxels per axis, got {dims:?}"
        )));
    }
    let n: usize = dims.iter().product();
    if u.iter().any(|c| c.len() != n) {
        return Err(Error::Shape("component length differs from grid".into()));
    }
    let strides = [1usize, dims[0], dims[0] * dims[1]];
    let h: [T; 3] = spacing_mm.map(T::lit);
    let two = T::lit(2.0);
    let plane = dims[0] * dims[1];
    let mut out: Vec<Vec<T>> = Vec::with_capacity(9);
    for i in 0..3 {
        for j in 0..3 {
            let comp = u[i];
            let mut ch = vec![T::zero(); n];
            par::for_each_chunk_mut(&mut ch, plane, |z, chunk| {
                for y in 0..dims[1] {
                    for x in 0..dims[0] {
                        let idx = z * plane + y * dims[0] + x;
                        let pos = [x, y, z][j];
                        let s = strides[j];
                        let d = if pos == 0 {
                            (comp[idx + s] - comp[idx]) / h[j]
                        } else if pos == dims[j] - 1 {
                            (comp[idx] - comp[idx - s]) / h[j]
                        } else {
                            (comp[idx + s] - comp[idx - s]) / (two * h[j])
                        };
                        let delta = if i == j { T::one() } else { T::zero() };
                        chunk[y * dims[0] + x] = delta + d;
                    }
                }
            });
            out.push(ch);
        }
    }
    Ok(out)
}

pub fn jacobian_field(dvf: &DisplacementField) -> Result<JacobianField> {
    let g = dvf.grid();
    let comps = jacobian_components(
        [dvf.component(0), dvf.component(1), dvf.component(2)],
        g.dims,
        g.spacing_mm,
    )?;
    JacobianField::new(Volume::new(g.clone(), 9, comps.concat())?)
}

pub fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Per-voxel `det J`, single channel.
pub fn jacobian_determinant(jf: &JacobianField) -> Volume {
    let g = jf.grid().clone();
    let data = (0..g.len()).map(|i| det3(&jf.matrix(i)) as f32).collect();
    Volume::new(g, 1, data).expect("consistent length")
}

/// Fraction of voxels with `‖J − I‖_F > eps`.
pub fn deformed_fraction(jf: &JacobianField, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps {eps} must be positive")));
    }
    let n = jf.grid().len();
    let count = (0..n)
        .filter(|&i| {
            let m = jf.matrix(i);
            let mut s = 0.0;
            for (r, row) in m.iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    let d = v - if r == c { 1.0 } else { 0.0 };
                    s += d * d;
                }
            }
            s.sqrt() > eps
        })
        .count();
    Ok(count as f64 / n as f64)
}

/// Default threshold for "non-zero deformation amplitude".
pub const DEFORMED_EPS: f64 = 1e-6;

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize, sp: f64) -> Volume {
        Volume::from_fn(Grid::cube(n, sp).unwrap(), |x, y, z| {
            (x as f32) * 1.5 + (y as f32) * 0.25 - (z as f32) * 0.75 + ((x * y) % 3) as f32
        })
        .unwrap()
    }

    #[test]
    fn zero_warp_is_exact() {
        let v = ramp(6, 1.5);
        let w = warp(&v, &DisplacementField::zeros(v.grid().clone())).unwrap();
        assert_eq!(w, v);
    }

    #[test]
    fn one_voxel_shift() {
        let v = ramp(6, 1.5);
        let u = DisplacementField::uniform(v.grid().clone(), [1.5, 0.0, 0.0]);
        let w = warp(&v, &u).unwrap();
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..5 {
                    assert_eq!(w.get(0, x, y, z), v.get(0, x + 1, y, z));
                }
            }
        }
    }

    #[test]
    fn half_voxel_on_linear_ramp() {
        let v = Volume::from_fn(Grid::cube(8, 2.0).unwrap(), |x, _, _| 3.0 * x as f32).unwrap();
        let u = DisplacementField::uniform(v.grid().clone(), [1.0, 0.0, 0.0]);
        let w = warp(&v, &u).unwrap();
        for x in 0..7 {
            assert!((w.get(0, x, 3, 3) - (3.0 * x as f32 + 1.5)).abs() < 1e-6);
        }
    }

    #[test]
    fn grid_mismatch_is_an_error() {
        let v = ramp(6, 1.5);
        let u = DisplacementField::zeros(Grid::cube(6, 1.0).unwrap());
        assert!(matches!(warp(&v, &u), Err(Error::GridMismatch(_))));
        assert!(compose(&u, &DisplacementField::zeros(v.grid().clone())).is_err());
    }

    #[test]
    fn rigid_identity_translation_and_full_turn() {
        let v = ramp(7, 2.0);
        let c = v.grid().center_world();
        assert_eq!(apply_rigid(&v, &RigidTransform::identity(c)).unwrap(), v);

        let t = RigidTransform::translation([2.0, 0.0, 0.0]);
        let w = apply_rigid(&v, &t).unwrap();
        for x in 1..7 {
            assert_eq!(w.get(0, x, 2, 3), v.get(0, x - 1, 2, 3));
        }

        for axis in 0..3 {
            let mut r = RigidTransform::identity(c);
            r.rotation[axis] = 2.0 * std::f64::consts::PI;
            let w = apply_rigid(&v, &r).unwrap();
            for (a, b) in w.data().iter().zip(v.data()) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn rigid_inverse_composes_to_identity() {
        let t = RigidTransform {
            rotation: [0.1, -0.2, 0.3],
            translation_mm: [4.0, -1.0, 2.5],
            center_mm: [10.0, 12.0, 8.0],
        };
        let id = t.compose(&t.inverse());
        for v in id.rotation.iter().chain(id.translation_mm.iter()) {
            assert!(v.abs() < 1e-9, "{id:?}");
        }
        let p = [1.0, 2.0, 3.0];
        let q = t.apply(p);
        let back = t.apply_inverse(q);
        for a in 0..3 {
            assert!((back[a] - p[a]).abs() < 1e-12);
        }
        let e = euler_zyx(&t.matrix());
        for a in 0..3 {
            assert!((e[a] - t.rotation[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_derivative_matches_finite_difference() {
        let t = RigidTransform {
            rotation: [0.3, -0.4, 0.7],
            translation_mm: [0.0; 3],
            center_mm: [0.0; 3],
        };
        for k in 0..3 {
            let mut p = t.clone();
            let mut m = t.clone();
            p.rotation[k] += 1e-6;
            m.rotation[k] -= 1e-6;
            let (rp, rm, d) = (p.matrix(), m.matrix(), t.matrix_derivative(k));
            for i in 0..3 {
                for j in 0..3 {
                    assert!(((rp[i][j] - rm[i][j]) / 2e-6 - d[i][j]).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn compose_identity_and_translations() {
        let g = Grid::cube(6, 1.5).unwrap();
        let u = DisplacementField::from_fn(g.clone(), |x, y, z| {
            [0.1 * x as f64, -0.2 * y as f64, 0.05 * (z * x) as f64]
        });
        let zero = DisplacementField::zeros(g.clone());
        assert_eq!(compose(&u, &zero).unwrap(), u);
        assert_eq!(compose(&zero, &u).unwrap(), u);
        let a = DisplacementField::uniform(g.clone(), [1.5, -3.0, 0.5]);
        let b = DisplacementField::uniform(g.clone(), [0.25, 1.5, -1.0]);
        let ab = compose(&a, &b).unwrap();
        assert_eq!(ab, DisplacementField::uniform(g, [1.75, -1.5, -0.5]));
    }

    #[test]
    fn jacobian_of_constant_and_linear_fields() {
        let g = Grid::new([5, 4, 6], [2.0, 1.0, 0.5], [0.0; 3]).unwrap();
        for f in [
            DisplacementField::zeros(g.clone()),
            DisplacementField::uniform(g.clone(), [3.0, -1.0, 2.0]),
        ] {
            let jf = jacobian_field(&f).unwrap();
            for i in 0..g.len() {
                assert_eq!(jf.matrix(i), [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
            }
            assert_eq!(deformed_fraction(&jf, DEFORMED_EPS).unwrap(), 0.0);
            assert!(jacobian_determinant(&jf).data().iter().all(|&d| d == 1.0));
        }
        // dyadic A keeps every intermediate exact in f32
        let a = [[0.125, 0.0, -0.25], [0.0, 0.5, 0.0], [0.0625, 0.0, 0.0]];
        let gg = g.clone();
        let f = DisplacementField::from_fn(g.clone(), |x, y, z| {
            let p = gg.voxel_to_world([x as f64, y as f64, z as f64]);
            matvec(&a, p)
        });
        let jf = jacobian_field(&f).unwrap();
        for i in 0..g.len() {
            let m = jf.matrix(i);
            for r in 0..3 {
                for c in 0..3 {
                    assert_eq!(m[r][c], a[r][c] + if r == c { 1.0 } else { 0.0 });
                }
            }
        }
        let frac = deformed_fraction(&jf, 0.1).unwrap();
        assert_eq!(frac, 1.0);
        assert_eq!(deformed_fraction(&jf, 10.0).unwrap(), 0.0);
        assert!(jacobian_field(&DisplacementField::zeros(Grid::cube(2, 1.0).unwrap())).is_err());
    }

    #[test]
    fn determinant_examples() {
        let g = Grid::cube(5, 1.0).unwrap();
        let gg = g.clone();
        let f = DisplacementField::from_fn(g.clone(), |x, y, z| {
            let p = gg.voxel_to_world([x as f64, y as f64, z as f64]);
            [0.1 * p[0], 0.0, 0.0]
        });
        let det = jacobian_determinant(&jacobian_field(&f).unwrap());
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    assert!((det.get(0, x, y, z) - 1.1).abs() < 1e-6);
                }
            }
        }
        let twice = JacobianField::new(
            Volume::new(
                g.clone(),
                9,
                (0..9).flat_map(|c| vec![if c % 4 == 0 { 2.0 } else { 0.0 }; 125]).collect(),
            )
            .unwrap(),
        )
        .unwrap();
        assert!(jacobian_determinant(&twice).data().iter().all(|&d| d == 8.0));
    }

    #[test]
    fn rigid_field_matches_apply_rigid() {
        let v = ramp(8, 2.0);
        let t = RigidTransform {
            rotation: [0.0, 0.0, 0.05],
            translation_mm: [1.0, 0.5, 0.0],
            center_mm: v.grid().center_world(),
        };
        let a = apply_rigid(&v, &t).unwrap();
        let b = warp(&v, &DisplacementField::from_rigid(v.grid().clone(), &t)).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-4);
        }
    }
}
