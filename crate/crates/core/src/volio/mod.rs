//! Volume data model, `v3j` file I/O and preprocessing.

mod io;
mod mask;
mod preprocess;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{raw_path_for, read_volume, write_volume};
pub use mask::{adaptive_mask, largest_component, otsu_bin, HISTOGRAM_BINS};
pub use preprocess::{
    crop_centered, downsample2, gaussian_smooth, normalize_intensity, resample_isotropic,
    resample_to,
};

/// Voxel grid geometry. Voxel `(i, j, k)` sits at `origin + (i, j, k)·spacing`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], origin_mm: [f64; 3]) -> Result<Self> {
        let g = Grid {
            dims,
            spacing_mm,
            origin_mm,
        };
        g.validate()?;
        Ok(g)
    }

    /// Cubic grid with isotropic spacing and zero origin.
    pub fn cube(n: usize, spacing_mm: f64) -> Result<Self> {
        Self::new([n; 3], [spacing_mm; 3], [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidMetadata(format!("dims {:?} must be ≥ 1", self.dims)));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidMetadata(format!(
                "spacing {:?} must be positive",
                self.spacing_mm
            )));
        }
        if self.origin_mm.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidMetadata("origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    pub fn voxel_to_world(&self, v: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin_mm[a] + v[a] * self.spacing_mm[a])
    }

    pub fn world_to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] - self.origin_mm[a]) / self.spacing_mm[a])
    }

    pub fn contains_world(&self, p: [f64; 3]) -> bool {
        let v = self.world_to_voxel(p);
        (0..3).all(|a| v[a] >= 0.0 && v[a] <= (self.dims[a] - 1) as f64)
    }

    pub fn center_voxel(&self) -> [i64; 3] {
        std::array::from_fn(|a| (self.dims[a] / 2) as i64)
    }

    /// Physical centre of the grid extent.
    pub fn center_world(&self) -> [f64; 3] {
        std::array::from_fn(|a| {
            self.origin_mm[a] + 0.5 * (self.dims[a] - 1) as f64 * self.spacing_mm[a]
        })
    }

    pub fn ensure_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: {:?}/{:?}/{:?} vs {:?}/{:?}/{:?}",
                self.dims,
                self.spacing_mm,
                self.origin_mm,
                other.dims,
                other.spacing_mm,
                other.origin_mm
            )))
        }
    }
}

/// Scalar or multi-channel 3D image, f32 values stored channel, z, y, x
/// (x fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: Grid,
    channels: usize,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid, channels: usize, data: Vec<f32>) -> Result<Self> {
        grid.validate()?;
        if channels == 0 {
            return Err(Error::InvalidMetadata("channels must be ≥ 1".into()));
        }
        let expected = channels * grid.len();
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            grid,
            channels,
            data,
        })
    }

    pub fn zeros(grid: Grid, channels: usize) -> Result<Self> {
        let n = grid.len() * channels;
        Self::new(grid, channels, vec![0.0; n])
    }

    pub fn filled(grid: Grid, value: f32) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, 1, vec![value; n])
    }

    /// Single-channel volume from a function of the voxel index.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> f32) -> Result<Self> {
        let [nx, ny, nz] = grid.dims;
        let mut data = Vec::with_capacity(grid.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(grid, 1, data)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing_mm
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.grid.len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[c * self.grid.len() + self.grid.index(x, y, z)]
    }

    /// Same grid and channel count, new data.
    pub fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.grid.clone(), self.channels, data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            grid: self.grid.clone(),
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Voxelwise product with a mask (all channels).
    pub fn masked(&self, mask: &MaskVolume) -> Result<Self> {
        self.grid.ensure_same(mask.grid(), "mask")?;
        let n = self.grid.len();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask.data[i % n] == 1 { v } else { 0.0 })
            .collect();
        Ok(Self {
            grid: self.grid.clone(),
            channels: self.channels,
            data,
        })
    }
}

/// Binary mask sharing a volume's grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    grid: Grid,
    data: Vec<u8>,
}

impl MaskVolume {
    pub fn new(grid: Grid, data: Vec<u8>) -> Result<Self> {
        grid.validate()?;
        if data.len() != grid.len() {
            return Err(Error::LengthMismatch {
                expected: grid.len(),
                found: data.len(),
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument("mask values must be 0 or 1".into()));
        }
        Ok(Self { grid, data })
    }

    pub fn full(grid: Grid) -> Self {
        let n = grid.len();
        Self {
            grid,
            data: vec![1; n],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            grid: self.grid.clone(),
            channels: 1,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}
