use super::{Grid, Volume};
use crate::error::{Error, Result};
use crate::interp::trilinear;
use crate::par;

/// Fills each output plane (`nx·ny` values of one channel) from `f(c, z, plane)`.
fn fill_planes(
    grid: &Grid,
    channels: usize,
    f: impl Fn(usize, usize, &mut [f32]) + Sync + Send,
) -> Vec<f32> {
    let plane = grid.dims[0] * grid.dims[1];
    let nz = grid.dims[2];
    let mut out = vec![0.0f32; channels * grid.len()];
    par::for_each_chunk_mut(&mut out, plane, |i, chunk| f(i / nz, i % nz, chunk));
    out
}

/// Trilinear resampling onto an arbitrary target grid (world coordinates,
/// border clamping).
pub fn resample_to(vol: &Volume, target: &Grid) -> Result<Volume> {
    target.validate()?;
    let src = vol.grid();
    let dims = src.dims;
    let data = fill_planes(target, vol.channels(), |c, z, plane| {
        let ch = vol.channel(c);
        for y in 0..target.dims[1] {
            for x in 0..target.dims[0] {
                let w = target.voxel_to_world([x as f64, y as f64, z as f64]);
                let v = src.world_to_voxel(w);
                plane[y * target.dims[0] + x] =
                    trilinear(ch, dims, [v[0] as f32, v[1] as f32, v[2] as f32]);
            }
        }
    });
    Volume::new(target.clone(), vol.channels(), data)
}

/// Resamples to `(t, t, t)` spacing, keeping the origin. Output dims are
/// `round(n·s/t)`, at least 1.
pub fn resample_isotropic(vol: &Volume, target_spacing_mm: f64) -> Result<Volume> {
    if !(target_spacing_mm > 0.0 && target_spacing_mm.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "target spacing {target_spacing_mm} must be positive"
        )));
    }
    let g = vol.grid();
    let dims: [usize; 3] = std::array::from_fn(|a| {
        ((g.dims[a] as f64 * g.spacing_mm[a] / target_spacing_mm).round() as usize).max(1)
    });
    let target = Grid::new(dims, [target_spacing_mm; 3], g.origin_mm)?;
    let scale: [f64; 3] = std::array::from_fn(|a| target_spacing_mm / g.spacing_mm[a]);
    let src_dims = g.dims;
    let data = fill_planes(&target, vol.channels(), |c, z, plane| {
        let ch = vol.channel(c);
        let sz = (z as f64 * scale[2]) as f32;
        for y in 0..dims[1] {
            let sy = (y as f64 * scale[1]) as f32;
            for x in 0..dims[0] {
                let sx = (x as f64 * scale[0]) as f32;
                plane[y * dims[0] + x] = trilinear(ch, src_dims, [sx, sy, sz]);
            }
        }
    });
    Volume::new(target, vol.channels(), data)
}

/// Min-max normalization to exactly `[0, 1]` over all channels.
pub fn normalize_intensity(vol: &Volume) -> Result<Volume> {
    let (lo, hi) = vol.min_max();
    if !(hi > lo) {
        return Err(Error::DegenerateRange(lo as f64));
    }
    let (lo, hi) = (lo as f64, hi as f64);
    let range = hi - lo;
    Ok(vol.map(|v| (((v as f64) - lo) / range) as f32))
}

/// Extracts a `size` box centred on `center` (voxel indices). The box starts
/// at `center - size/2`; voxels outside the source are zero. The origin
/// moves so retained voxels keep their physical coordinates.
pub fn crop_centered(vol: &Volume, center: [i64; 3], size: [usize; 3]) -> Result<Volume> {
    if size.iter().any(|&s| s == 0) {
        return Err(Error::InvalidArgument(format!("crop size {size:?} must be ≥ 1")));
    }
    let g = vol.grid();
    let start: [i64; 3] = std::array::from_fn(|a| center[a] - (size[a] / 2) as i64);
    let origin: [f64; 3] =
        std::array::from_fn(|a| g.origin_mm[a] + start[a] as f64 * g.spacing_mm[a]);
    let target = Grid::new(size, g.spacing_mm, origin)?;
    let src = g.dims;
    let data = fill_planes(&target, vol.channels(), |c, z, plane| {
        let sz = start[2] + z as i64;
        if sz < 0 || sz >= src[2] as i64 {
            return;
        }
        for y in 0..size[1] {
            let sy = start[1] + y as i64;
            if sy < 0 || sy >= src[1] as i64 {
                continue;
            }
            for x in 0..size[0] {
                let sx = start[0] + x as i64;
                if sx >= 0 && sx < src[0] as i64 {
                    plane[y * size[0] + x] =
                        vol.get(c, sx as usize, sy as usize, sz as usize);
                }
            }
        }
    });
    Volume::new(target, vol.channels(), data)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let w: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

fn convolve_axis(src: &[f32], dims: [usize; 3], axis: usize, kernel: &[f64]) -> Vec<f32> {
    let r = (kernel.len() / 2) as i64;
    let n = dims[axis] as i64;
    let strides = [1, dims[0], dims[0] * dims[1]];
    let plane = dims[0] * dims[1];
    let mut out = vec![0.0f32; src.len()];
    par::for_each_chunk_mut(&mut out, plane, |z, chunk| {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let pos = [x as i64, y as i64, z as i64];
                let base = z * plane + y * dims[0] + x;
                let here = pos[axis];
                let mut acc = 0.0f64;
                for (k, w) in kernel.iter().enumerate() {
                    let j = (here + k as i64 - r).clamp(0, n - 1);
                    let idx = (base as i64 + (j - here) * strides[axis] as i64) as usize;
                    acc += w * src[idx] as f64;
                }
                chunk[y * dims[0] + x] = acc as f32;
            }
        }
    });
    out
}

/// Separable Gaussian blur, `sigma` in voxels, border clamping.
pub fn gaussian_smooth(vol: &Volume, sigma_vox: f64) -> Result<Volume> {
    if sigma_vox <= 0.0 {
        return Ok(vol.clone());
    }
    let kernel = gaussian_kernel(sigma_vox);
    let dims = vol.dims();
    let mut data = Vec::with_capacity(vol.data().len());
    for c in 0..vol.channels() {
        let mut ch = vol.channel(c).to_vec();
        for axis in 0..3 {
            if dims[axis] > 1 {
                ch = convolve_axis(&ch, dims, axis, &kernel);
            }
        }
        data.extend(ch);
    }
    vol.with_data(data)
}

/// One pyramid level down: Gaussian blur (σ = 1 voxel), then every second
/// voxel. Spacing doubles, origin stays.
pub fn downsample2(vol: &Volume) -> Result<Volume> {
    let smooth = gaussian_smooth(vol, 1.0)?;
    let g = vol.grid();
    let dims: [usize; 3] = std::array::from_fn(|a| g.dims[a].div_ceil(2));
    let spacing: [f64; 3] = std::array::from_fn(|a| g.spacing_mm[a] * 2.0);
    let target = Grid::new(dims, spacing, g.origin_mm)?;
    let data = fill_planes(&target, vol.channels(), |c, z, plane| {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                plane[y * dims[0] + x] = smooth.get(c, 2 * x, 2 * y, 2 * z);
            }
        }
    });
    Volume::new(target, vol.channels(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize, spacing: f64) -> Volume {
        Volume::from_fn(Grid::cube(n, spacing).unwrap(), |x, y, z| {
            (x as f32) * 0.25 + (y * y) as f32 * 0.01 - z as f32
        })
        .unwrap()
    }

    #[test]
    fn resample_dims_follow_rounding() {
        let g = Grid::new([160, 10, 3], [1.5, 1.5, 1.5], [0.0; 3]).unwrap();
        let v = Volume::filled(g, 1.0).unwrap();
        let r = resample_isotropic(&v, 2.0).unwrap();
        assert_eq!(r.dims(), [120, 8, 2]);
        assert_eq!(r.spacing(), [2.0; 3]);
        let tiny = Volume::filled(Grid::new([1, 1, 1], [1.0; 3], [0.0; 3]).unwrap(), 1.0).unwrap();
        assert_eq!(resample_isotropic(&tiny, 8.0).unwrap().dims(), [1, 1, 1]);
        assert!(resample_isotropic(&v, 0.0).is_err());
    }

    #[test]
    fn resample_identity_and_constant() {
        let v = ramp(7, 2.0);
        let r = resample_isotropic(&v, 2.0).unwrap();
        for (a, b) in v.data().iter().zip(r.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
        let c = Volume::filled(Grid::new([9, 5, 4], [1.0, 3.0, 0.7], [1.0, 2.0, 3.0]).unwrap(), 0.3)
            .unwrap();
        let r = resample_isotropic(&c, 1.3).unwrap();
        assert!(r.data().iter().all(|&x| (x - 0.3).abs() < 1e-6));
        assert_eq!(r.grid().origin_mm, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn normalize_examples() {
        let g = Grid::new([3, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::new(g.clone(), 1, vec![-1000.0, 0.0, 1000.0]).unwrap();
        assert_eq!(normalize_intensity(&v).unwrap().data(), &[0.0, 0.5, 1.0]);
        let u = Volume::new(g.clone(), 1, vec![0.0, 0.25, 1.0]).unwrap();
        assert_eq!(normalize_intensity(&u).unwrap(), u);
        let c = Volume::filled(g, 4.0).unwrap();
        assert!(matches!(normalize_intensity(&c), Err(Error::DegenerateRange(_))));
    }

    #[test]
    fn crop_identity_padding_and_corner() {
        let v = ramp(8, 1.0);
        let same = crop_centered(&v, [4, 4, 4], [8, 8, 8]).unwrap();
        assert_eq!(same, v);

        let small = Volume::filled(Grid::cube(6, 2.0).unwrap(), 1.0).unwrap();
        let big = crop_centered(&small, [3, 3, 3], [10, 10, 10]).unwrap();
        assert_eq!(big.dims(), [10; 3]);
        assert_eq!(big.data().iter().filter(|&&x| x == 1.0).count(), 216);
        assert_eq!(big.get(0, 2, 5, 5), 1.0);
        assert_eq!(big.get(0, 1, 5, 5), 0.0);
        assert_eq!(big.get(0, 7, 7, 7), 1.0);
        assert_eq!(big.get(0, 8, 7, 7), 0.0);
        assert_eq!(big.grid().origin_mm, [-4.0; 3]);

        // corner centre, size 4: brute-force index check
        let corner = crop_centered(&v, [0, 0, 0], [4, 4, 4]).unwrap();
        let mut from_source = 0;
        for z in 0..4usize {
            for y in 0..4usize {
                for x in 0..4usize {
                    let src = [x as i64 - 2, y as i64 - 2, z as i64 - 2];
                    let inside = src.iter().all(|&s| s >= 0);
                    let got = corner.get(0, x, y, z);
                    if inside {
                        from_source += 1;
                        assert_eq!(
                            got,
                            v.get(0, src[0] as usize, src[1] as usize, src[2] as usize)
                        );
                    } else {
                        assert_eq!(got, 0.0);
                    }
                }
            }
        }
        assert_eq!(from_source, 8);
    }

    #[test]
    fn crop_preserves_world_coordinates() {
        let v = ramp(8, 1.5);
        let c = crop_centered(&v, [5, 3, 4], [3, 3, 3]).unwrap();
        let w = c.grid().voxel_to_world([1.0, 1.0, 1.0]);
        assert_eq!(v.grid().world_to_voxel(w), [5.0, 3.0, 4.0]);
    }

    #[test]
    fn smoothing_keeps_constants_and_downsample_halves() {
        let c = Volume::filled(Grid::cube(9, 1.0).unwrap(), 0.7).unwrap();
        let s = gaussian_smooth(&c, 1.3).unwrap();
        assert!(s.data().iter().all(|&x| (x - 0.7).abs() < 1e-6));
        let d = downsample2(&c).unwrap();
        assert_eq!(d.dims(), [5; 3]);
        assert_eq!(d.spacing(), [2.0; 3]);
    }
}
