//! Adaptive-threshold head masking: Otsu on a 256-bin histogram, a
//! 6-connected closing, then the largest 6-connected component.

use std::collections::VecDeque;

use super::{Grid, MaskVolume, Volume};
use crate::error::{Error, Result};

pub const HISTOGRAM_BINS: usize = 256;

#[inline]
fn bin_of(v: f32) -> usize {
    ((v.clamp(0.0, 1.0) * HISTOGRAM_BINS as f32) as usize).min(HISTOGRAM_BINS - 1)
}

/// Otsu threshold bin: voxels whose bin is strictly greater are foreground.
pub fn otsu_bin(values: &[f32]) -> Result<usize> {
    let mut hist = [0u64; HISTOGRAM_BINS];
    for &v in values {
        hist[bin_of(v)] += 1;
    }
    if hist.iter().filter(|&&h| h > 0).count() < 2 {
        return Err(Error::DegenerateHistogram);
    }
    let total = values.len() as f64;
    let centre = |i: usize| (i as f64 + 0.5) / HISTOGRAM_BINS as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| h as f64 * centre(i)).sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (k, &h) in hist.iter().enumerate().take(HISTOGRAM_BINS - 1) {
        w0 += h as f64;
        sum0 += h as f64 * centre(k);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let between = (w0 / total) * (w1 / total) * (mu0 - mu1) * (mu0 - mu1);
        if between > best.0 {
            best = (between, k);
        }
    }
    Ok(best.1)
}

const NEIGHBOURS: [[i64; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

fn neighbour(g: &Grid, x: usize, y: usize, z: usize, d: [i64; 3]) -> Option<usize> {
    let p = [x as i64 + d[0], y as i64 + d[1], z as i64 + d[2]];
    if (0..3).all(|a| p[a] >= 0 && p[a] < g.dims[a] as i64) {
        Some(g.index(p[0] as usize, p[1] as usize, p[2] as usize))
    } else {
        None
    }
}

/// Dilation ignores out-of-grid neighbours; erosion treats them as
/// foreground, so closing never eats into the grid border.
fn close(g: &Grid, m: &[u8]) -> Vec<u8> {
    let mut dilated = m.to_vec();
    for i in 0..m.len() {
        if m[i] == 1 {
            continue;
        }
        let [x, y, z] = g.coords(i);
        if NEIGHBOURS
            .iter()
            .any(|&d| neighbour(g, x, y, z, d).is_some_and(|j| m[j] == 1))
        {
            dilated[i] = 1;
        }
    }
    let mut eroded = dilated.clone();
    for i in 0..m.len() {
        if dilated[i] == 0 {
            continue;
        }
        let [x, y, z] = g.coords(i);
        if NEIGHBOURS
            .iter()
            .any(|&d| neighbour(g, x, y, z, d).is_some_and(|j| dilated[j] == 0))
        {
            eroded[i] = 0;
        }
    }
    eroded
}

/// Keeps the largest 6-connected foreground component. Ties go to the
/// component containing the lowest voxel index.
pub fn largest_component(g: &Grid, m: &[u8]) -> Vec<u8> {
    let mut label = vec![0u32; m.len()];
    let mut sizes = vec![0usize];
    let mut queue = VecDeque::new();
    for start in 0..m.len() {
        if m[start] == 0 || label[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32;
        let mut size = 0;
        label[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let [x, y, z] = g.coords(i);
            for d in NEIGHBOURS {
                if let Some(j) = neighbour(g, x, y, z, d) {
                    if m[j] == 1 && label[j] == 0 {
                        label[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    let mut best = 0u32;
    for (id, &s) in sizes.iter().enumerate().skip(1) {
        if s > sizes[best as usize] {
            best = id as u32;
        }
    }
    label
        .iter()
        .map(|&l| u8::from(best != 0 && l == best))
        .collect()
}

/// Foreground mask of a normalized single-channel volume.
pub fn adaptive_mask(vol: &Volume) -> Result<MaskVolume> {
    if vol.channels() != 1 {
        return Err(Error::InvalidArgument(format!(
            "adaptive_mask expects one channel, got {}",
            vol.channels()
        )));
    }
    let k = otsu_bin(vol.data())?;
    let raw: Vec<u8> = vol.data().iter().map(|&v| u8::from(bin_of(v) > k)).collect();
    let closed = close(vol.grid(), &raw);
    let kept = largest_component(vol.grid(), &closed);
    MaskVolume::new(vol.grid().clone(), kept)
}
