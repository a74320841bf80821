//! Analytic head phantom. Anatomy and deformations are closed-form, so every
//! scan is rendered without resampling and ground truth is exact.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::MAX_FRACTION;
use crate::error::Result;
use crate::field::{DisplacementField, RigidTransform};
use crate::par;
use crate::rng::{self, Rng};
use crate::volio::{gaussian_smooth, Grid, Volume};

/// Soft-edged ellipsoid painted over what lies beneath it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub name: String,
    pub center_mm: [f64; 3],
    pub semi_mm: [f64; 3],
    pub value: f64,
}

impl Structure {
    /// Normalized ellipsoidal radius; 1 on the surface.
    pub fn rho(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|i| ((p[i] - self.center_mm[i]) / self.semi_mm[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.rho(p) <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anatomy {
    pub structures: Vec<Structure>,
    pub edge_mm: f64,
}

impl Anatomy {
    /// Randomized head-and-neck layout filling the grid's field of view.
    pub fn random(grid: &Grid, rng: &mut Rng) -> Self {
        let c = grid.center_world();
        let h = (0..3)
            .map(|i| grid.dims[i] as f64 * grid.spacing_mm[i])
            .fold(f64::INFINITY, f64::min)
            / 2.0;
        // x: left-right, y: posterior-anterior, z: inferior-superior
        let layout: [(&str, [f64; 3], [f64; 3], f64); 9] = [
            ("head", [0.0, 0.0, 0.0], [0.72, 0.8, 0.86], 0.45),
            ("spine", [0.0, -0.42, 0.0], [0.14, 0.14, 0.8], 0.9),
            ("spinal_canal", [0.0, -0.42, 0.0], [0.055, 0.055, 0.8], 0.3),
            ("mandible", [0.0, 0.42, 0.22], [0.42, 0.2, 0.12], 0.85),
            ("parotid_l", [-0.42, -0.05, 0.3], [0.14, 0.18, 0.2], 0.63),
            ("parotid_r", [0.42, -0.05, 0.3], [0.14, 0.18, 0.2], 0.63),
            ("constrictor", [0.0, 0.05, -0.18], [0.22, 0.15, 0.28], 0.72),
            ("airway", [0.0, 0.1, -0.1], [0.08, 0.1, 0.75], 0.05),
            ("tumor", [0.12, 0.2, 0.05], [0.12, 0.11, 0.13], 0.56),
        ];
        let structures = layout
            .iter()
            .map(|(name, cen, semi, value)| {
                let jitter = if *name == "head" { 0.02 } else { 0.04 };
                Structure {
                    name: name.to_string(),
                    center_mm: std::array::from_fn(|i| c[i] + h * (cen[i] + rng.random_range(-jitter..=jitter))),
                    semi_mm: std::array::from_fn(|i| h * semi[i] * rng.random_range(0.9..=1.1)),
                    value: value + rng.random_range(-0.03..=0.03),
                }
            })
            .collect();
        Self {
            structures,
            edge_mm: 0.35 * grid.spacing_mm.iter().fold(f64::INFINITY, |a, &b| a.min(b)),
        }
    }

    pub fn structure(&self, name: &str) -> Option<&Structure> {
        self.structures.iter().find(|s| s.name == name)
    }

    /// Noise-free tissue value at a world point.
    pub fn intensity(&self, p: [f64; 3]) -> f64 {
        let mut v = 0.0;
        for s in &self.structures {
            let scale = s.semi_mm.iter().fold(f64::INFINITY, |a, &b| a.min(b));
            let arg = (1.0 - s.rho(p)) * scale / self.edge_mm;
            let w = 1.0 / (1.0 + (-arg).exp());
            v = v * (1.0 - w) + s.value * w;
        }
        v
    }
}

/// `u(p) = v·exp(−|p−c|²/2σ²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center_mm: [f64; 3],
    pub sigma_mm: f64,
    pub vector_mm: [f64; 3],
}

/// `u(p) = A·(p−c)·exp(−|p−c|²/2σ²)`: local expansion (A > 0) or
/// compression (A < 0) with `det J = (1+A)³` at the centre.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialBump {
    pub center_mm: [f64; 3],
    pub sigma_mm: f64,
    pub amplitude: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Deformation {
    pub bumps: Vec<Bump>,
    pub radial: Vec<RadialBump>,
}

fn gauss(p: [f64; 3], c: [f64; 3], sigma: f64) -> f64 {
    let r2: f64 = (0..3).map(|i| (p[i] - c[i]).powi(2)).sum();
    (-r2 / (2.0 * sigma * sigma)).exp()
}

impl Deformation {
    pub fn eval(&self, p: [f64; 3]) -> [f64; 3] {
        let mut u = [0.0; 3];
        for b in &self.bumps {
            let w = gauss(p, b.center_mm, b.sigma_mm);
            for i in 0..3 {
                u[i] += b.vector_mm[i] * w;
            }
        }
        for r in &self.radial {
            let w = r.amplitude * gauss(p, r.center_mm, r.sigma_mm);
            for i in 0..3 {
                u[i] += (p[i] - r.center_mm[i]) * w;
            }
        }
        u
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            bumps: self
                .bumps
                .iter()
                .map(|b| Bump {
                    vector_mm: b.vector_mm.map(|v| v * k),
                    ..b.clone()
                })
                .collect(),
            radial: self
                .radial
                .iter()
                .map(|r| RadialBump {
                    amplitude: r.amplitude * k,
                    ..r.clone()
                })
                .collect(),
        }
    }

    pub fn plus(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.bumps.extend(other.bumps.iter().cloned());
        out.radial.extend(other.radial.iter().cloned());
        out
    }

    /// Largest displacement norm over the voxel centres of `grid`.
    pub fn max_norm(&self, grid: &Grid) -> f64 {
        let norms = par::map_collect(grid.len(), |i| {
            let [x, y, z] = grid.coords(i);
            let u = self.eval(grid.voxel_to_world([x as f64, y as f64, z as f64]));
            (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()
        });
        norms.into_iter().fold(0.0, f64::max)
    }

    /// Field sampled at the voxel centres of `grid`.
    pub fn sample(&self, grid: &Grid) -> DisplacementField {
        let g = grid.clone();
        DisplacementField::from_fn(grid.clone(), |x, y, z| self.eval(g.voxel_to_world([x as f64, y as f64, z as f64])))
    }

    /// Sampled field whose largest stored vector norm does not exceed `max_mm`.
    pub fn sample_capped(&self, grid: &Grid, max_mm: f64) -> DisplacementField {
        let mut field = self.sample(grid);
        for _ in 0..4 {
            let m = field.max_norm();
            if m <= max_mm {
                break;
            }
            field = field.scaled(max_mm / m * (1.0 - 1e-7));
        }
        field
    }
}

/// Corresponding points: `moving_mm` in the planning CT, `fixed_mm` in the
/// cone-beam scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: usize,
    pub fixed_mm: [f64; 3],
    pub moving_mm: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    /// Fraction indices with a cone-beam scan.
    pub fractions: Vec<u32>,
    pub noise_sigma: f64,
    /// Range of the setup translation magnitude.
    pub setup_translation_mm: [f64; 2],
    /// Bound on each setup rotation angle.
    pub setup_rotation_deg: f64,
    pub n_bumps: usize,
    pub n_landmarks: usize,
    pub blur_sigma_vox: f64,
}

impl PhantomConfig {
    /// 128 mm field of view at the given grid size.
    pub fn for_dims(dims: [usize; 3]) -> Self {
        let n = dims.iter().copied().max().unwrap_or(1).max(1);
        Self {
            dims,
            spacing_mm: 128.0 / n as f64,
            fractions: vec![1, 5, 10, 15, 20, 25, 30, 35],
            noise_sigma: 0.02,
            setup_translation_mm: [7.0, 9.0],
            setup_rotation_deg: 2.0,
            n_bumps: 4,
            n_landmarks: 6,
            blur_sigma_vox: 0.5,
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, [self.spacing_mm; 3], [0.0; 3])
    }
}

/// One cone-beam scan with its ground truth. The scan shows the planning
/// anatomy at `setup⁻¹(x + gt_dvf(x))`.
#[derive(Clone, Debug)]
pub struct FractionScan {
    pub t: u32,
    pub cbct: Volume,
    pub gt_dvf: DisplacementField,
    pub setup: RigidTransform,
    pub landmarks: Vec<Landmark>,
}

impl FractionScan {
    /// Ground-truth map from scan coordinates into the planning CT.
    pub fn total_dvf(&self) -> DisplacementField {
        crate::field::compose_rigid(&self.gt_dvf, &self.setup)
    }
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub anatomy: Anatomy,
    pub pct: Volume,
    /// Deformation at the last fraction; scan `t` shows it scaled by t/35.
    pub trend: Deformation,
    pub scans: Vec<FractionScan>,
}

pub(crate) fn random_unit(rng: &mut Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| StandardNormal.sample(rng));
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return v.map(|a| a / n);
        }
    }
}

/// Random point inside `s` at normalized radius below `max_rho`.
pub(crate) fn point_inside(s: &Structure, max_rho: f64, rng: &mut Rng) -> [f64; 3] {
    let d = random_unit(rng);
    let r = max_rho * rng.random::<f64>().cbrt();
    std::array::from_fn(|i| s.center_mm[i] + r * d[i] * s.semi_mm[i])
}

pub(crate) fn half_fov(grid: &Grid) -> f64 {
    (0..3)
        .map(|i| grid.dims[i] as f64 * grid.spacing_mm[i])
        .fold(f64::INFINITY, f64::min)
        / 2.0
}

/// Smooth random bumps inside the head, scaled to a maximum of `max_mm`
/// over the grid.
pub(crate) fn random_bumps(anatomy: &Anatomy, grid: &Grid, n: usize, sigma_frac: [f64; 2], max_mm: f64, rng: &mut Rng) -> Deformation {
    let head = anatomy.structure("head").expect("head structure");
    let h = half_fov(grid);
    let bumps = (0..n)
        .map(|_| Bump {
            center_mm: point_inside(head, 0.6, rng),
            sigma_mm: h * rng.random_range(sigma_frac[0]..=sigma_frac[1]),
            vector_mm: random_unit(rng).map(|v| v * rng.random_range(0.5..=1.0)),
        })
        .collect();
    let d = Deformation { bumps, radial: Vec::new() };
    let m = d.max_norm(grid);
    if m > 0.0 {
        d.scaled(max_mm / m)
    } else {
        d
    }
}

pub(crate) fn random_setup(grid: &Grid, translation_mm: [f64; 2], rotation_deg: f64, rng: &mut Rng) -> RigidTransform {
    let mag = rng.random_range(translation_mm[0]..=translation_mm[1].max(translation_mm[0]));
    let dir = random_unit(rng);
    let rot = rotation_deg.to_radians();
    RigidTransform {
        rotation: std::array::from_fn(|_| if rot > 0.0 { rng.random_range(-rot..=rot) } else { 0.0 }),
        translation_mm: dir.map(|d| d * mag),
        center_mm: grid.center_world(),
    }
}

/// Renders `anatomy` on `grid` through `p ↦ map(p)`, in parallel over
/// z-planes; deterministic.
pub(crate) fn render(anatomy: &Anatomy, grid: &Grid, map: impl Fn([f64; 3]) -> [f64; 3] + Sync) -> Vec<f32> {
    let [nx, ny, _] = grid.dims;
    let mut out = vec![0.0f32; grid.len()];
    par::for_each_chunk_mut(&mut out, nx * ny, |z, plane| {
        for y in 0..ny {
            for x in 0..nx {
                let p = grid.voxel_to_world([x as f64, y as f64, z as f64]);
                plane[y * nx + x] = anatomy.intensity(map(p)) as f32;
            }
        }
    });
    out
}

pub(crate) fn add_noise(data: &mut [f32], sigma: f64, rng: &mut Rng) {
    if sigma > 0.0 {
        for v in data {
            let n: f64 = StandardNormal.sample(rng);
            *v += (sigma * n) as f32;
        }
    }
}

/// Planning-CT rendering: the anatomy plus faint noise.
pub(crate) fn render_pct(anatomy: &Anatomy, grid: &Grid, rng: &mut Rng) -> Result<Volume> {
    let mut data = render(anatomy, grid, |p| p);
    add_noise(&mut data, 0.005, rng);
    Volume::new(grid.clone(), 1, data)
}

/// Cone-beam appearance: gain, offset, smooth bias field, blur, noise.
pub(crate) fn render_cbct(
    anatomy: &Anatomy,
    grid: &Grid,
    deformation: &Deformation,
    setup: &RigidTransform,
    noise_sigma: f64,
    blur_sigma_vox: f64,
    rng: &mut Rng,
) -> Result<Volume> {
    let gain = rng.random_range(0.92..=1.08);
    let shift = rng.random_range(-0.05..=0.05);
    let lin: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.08..=0.08));
    let quad = rng.random_range(-0.05..=0.05);
    let c = grid.center_world();
    let h = half_fov(grid);
    let map = |x: [f64; 3]| {
        let u = deformation.eval(x);
        setup.apply_inverse([x[0] + u[0], x[1] + u[1], x[2] + u[2]])
    };
    let mut data = render(anatomy, grid, map);
    for (i, v) in data.iter_mut().enumerate() {
        let [x, y, z] = grid.coords(i);
        let p = grid.voxel_to_world([x as f64, y as f64, z as f64]);
        let n: [f64; 3] = std::array::from_fn(|k| (p[k] - c[k]) / h);
        let bias = 1.0 + lin[0] * n[0] + lin[1] * n[1] + lin[2] * n[2] + quad * (n[0] * n[0] + n[1] * n[1] - 0.5);
        *v = (gain * bias * *v as f64 + shift) as f32;
    }
    let mut vol = Volume::new(grid.clone(), 1, data)?;
    if blur_sigma_vox > 0.0 {
        vol = gaussian_smooth(&vol, blur_sigma_vox)?;
    }
    let mut data = vol.into_data();
    add_noise(&mut data, noise_sigma, rng);
    Volume::new(grid.clone(), 1, data)
}

/// Landmarks on internal structure surfaces of the planning CT, away from
/// the grid border.
pub(crate) fn moving_landmarks(anatomy: &Anatomy, grid: &Grid, n: usize, rng: &mut Rng) -> Vec<[f64; 3]> {
    let head = anatomy.structure("head").expect("head structure");
    let candidates: Vec<&Structure> = anatomy
        .structures
        .iter()
        .filter(|s| !matches!(s.name.as_str(), "head" | "spinal_canal"))
        .collect();
    let margin = 4.0;
    let mut out = Vec::with_capacity(n);
    let mut guard = 0;
    while out.len() < n && guard < 10_000 {
        guard += 1;
        let s = candidates[out.len() % candidates.len()];
        let d = random_unit(rng);
        let p: [f64; 3] = std::array::from_fn(|i| s.center_mm[i] + d[i] * s.semi_mm[i]);
        let v = grid.world_to_voxel(p);
        let inside = (0..3).all(|i| v[i] >= margin && v[i] <= grid.dims[i] as f64 - 1.0 - margin);
        if inside && head.rho(p) < 0.9 {
            out.push(p);
        }
    }
    out
}

/// Scan-space point `x` with `setup⁻¹(x + u(x)) = moving`, by fixed-point
/// iteration on `x = setup(moving) − u(x)`.
pub(crate) fn fixed_point(moving: [f64; 3], deformation: &Deformation, setup: &RigidTransform) -> [f64; 3] {
    let target = setup.apply(moving);
    let mut x = target;
    for _ in 0..200 {
        let u = deformation.eval(x);
        let next: [f64; 3] = std::array::from_fn(|i| target[i] - u[i]);
        let step = (0..3).map(|i| (next[i] - x[i]).abs()).fold(0.0, f64::max);
        x = next;
        if step < 1e-12 {
            break;
        }
    }
    x
}

/// Phantom with default settings for `dims`: a 128 mm field of view and
/// scans at fractions 1, 5, …, 35.
pub fn synth_phantom(seed: u64, deformation_mm: f64, dims: [usize; 3]) -> Result<Phantom> {
    synth_phantom_with(seed, deformation_mm, &PhantomConfig::for_dims(dims))
}

pub fn synth_phantom_with(seed: u64, deformation_mm: f64, cfg: &PhantomConfig) -> Result<Phantom> {
    if !(deformation_mm >= 0.0) {
        return Err(crate::Error::InvalidArgument(format!("deformation_mm {deformation_mm} < 0")));
    }
    let grid = cfg.grid()?;
    let anatomy = Anatomy::random(&grid, &mut rng::child(seed, 1));
    let pct = render_pct(&anatomy, &grid, &mut rng::child(seed, 2))?;
    let trend = random_bumps(&anatomy, &grid, cfg.n_bumps, [0.25, 0.4], deformation_mm, &mut rng::child(seed, 3));
    let marks = moving_landmarks(&anatomy, &grid, cfg.n_landmarks, &mut rng::child(seed, 4));
    let scans = cfg
        .fractions
        .iter()
        .map(|&t| {
            let mut r = rng::child(seed, 100 + t as u64);
            let k = t as f64 / MAX_FRACTION as f64;
            let deformation = trend.scaled(k);
            let setup = random_setup(&grid, cfg.setup_translation_mm, cfg.setup_rotation_deg, &mut r);
            let cbct = render_cbct(&anatomy, &grid, &deformation, &setup, cfg.noise_sigma, cfg.blur_sigma_vox, &mut r)?;
            let landmarks = marks
                .iter()
                .enumerate()
                .map(|(id, &m)| Landmark {
                    id,
                    fixed_mm: fixed_point(m, &deformation, &setup),
                    moving_mm: m,
                })
                .collect();
            Ok(FractionScan {
                t,
                cbct,
                gt_dvf: deformation.sample_capped(&grid, deformation_mm * k),
                setup,
                landmarks,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Phantom {
        anatomy,
        pct,
        trend,
        scans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomConfig {
        let mut c = PhantomConfig::for_dims([24, 24, 24]);
        c.fractions = vec![1, 20, 35];
        c
    }

    #[test]
    fn zero_deformation_gives_zero_fields() {
        let p = synth_phantom_with(3, 0.0, &small()).unwrap();
        for s in &p.scans {
            assert_eq!(s.gt_dvf.max_norm(), 0.0);
        }
    }

    #[test]
    fn field_magnitude_is_capped() {
        let p = synth_phantom_with(4, 8.0, &small()).unwrap();
        let last = p.scans.last().unwrap();
        assert!(last.gt_dvf.max_norm() <= 8.0 + 1e-6);
        assert!(last.gt_dvf.max_norm() > 7.9);
        let mid = &p.scans[1];
        assert!(mid.gt_dvf.max_norm() <= 8.0 * 20.0 / 35.0 + 1e-6);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = synth_phantom_with(9, 5.0, &small()).unwrap();
        let b = synth_phantom_with(9, 5.0, &small()).unwrap();
        assert_eq!(a.pct, b.pct);
        for (x, y) in a.scans.iter().zip(&b.scans) {
            assert_eq!(x.cbct, y.cbct);
            assert_eq!(x.gt_dvf, y.gt_dvf);
            assert_eq!(x.landmarks, y.landmarks);
        }
        let c = synth_phantom_with(10, 5.0, &small()).unwrap();
        assert_ne!(a.pct, c.pct);
    }

    #[test]
    fn landmarks_correspond_through_ground_truth() {
        let p = synth_phantom_with(5, 8.0, &small()).unwrap();
        let s = p.scans.last().unwrap();
        assert!(s.landmarks.len() >= 3);
        let d = p.trend.scaled(1.0);
        for m in &s.landmarks {
            let u = d.eval(m.fixed_mm);
            let back = s.setup.apply_inverse([m.fixed_mm[0] + u[0], m.fixed_mm[1] + u[1], m.fixed_mm[2] + u[2]]);
            for i in 0..3 {
                assert!((back[i] - m.moving_mm[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn radial_bump_determinant_at_centre() {
        let g = Grid::cube(21, 1.0).unwrap();
        let c = g.center_world();
        let d = Deformation {
            bumps: Vec::new(),
            radial: vec![RadialBump { center_mm: c, sigma_mm: 4.0, amplitude: 0.2 }],
        };
        let jf = crate::field::jacobian_field(&d.sample(&g)).unwrap();
        let det = crate::field::jacobian_determinant(&jf);
        let i = g.index(10, 10, 10);
        // central differences at unit spacing see u(c±1) = ±A·exp(−1/2σ²)
        let expect = (1.0 + 0.2 * (-1.0f64 / 32.0).exp()).powi(3);
        assert!((det.data()[i] as f64 - expect).abs() < 1e-5);
    }
}
