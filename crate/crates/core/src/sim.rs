//! Registration objective: global normalized cross-correlation and the L2
//! gradient penalty on the displacement field.

use crate::error::{Error, Result};
use crate::field::{warp, DisplacementField};
use crate::nn::{Graph, Tensor, Var};
use crate::real::{pairwise_sum, Real};
use crate::volio::{MaskVolume, Volume};

/// Centered second moments of two sequences over the selected entries.
#[derive(Clone, Copy, Debug)]
pub struct Pearson {
    pub r: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub saa: f64,
    pub sbb: f64,
    pub sab: f64,
}

/// Pearson correlation of `a` and `b` where `mask` is nonzero (everywhere
/// when absent), accumulated in f64 with a fixed summation tree.
pub fn pearson<T: Real>(a: &[T], b: &[T], mask: Option<&[u8]>) -> Result<Pearson> {
    if a.len() != b.len() || mask.is_some_and(|m| m.len() != a.len()) {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let keep = |i: &usize| mask.is_none_or(|m| m[*i] != 0);
    let count = (0..a.len()).filter(keep).count();
    if count < 2 {
        return Err(Error::ZeroVariance);
    }
    let nf = count as f64;
    let mean_a = pairwise_sum((0..a.len()).filter(keep).map(|i| a[i].f64())) / nf;
    let mean_b = pairwise_sum((0..a.len()).filter(keep).map(|i| b[i].f64())) / nf;
    let saa = pairwise_sum((0..a.len()).filter(keep).map(|i| (a[i].f64() - mean_a).powi(2)));
    let sbb = pairwise_sum((0..a.len()).filter(keep).map(|i| (b[i].f64() - mean_b).powi(2)));
    let sab = pairwise_sum(
        (0..a.len())
            .filter(keep)
            .map(|i| (a[i].f64() - mean_a) * (b[i].f64() - mean_b)),
    );
    if !(saa > 0.0 && sbb > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok(Pearson {
        r: (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0),
        mean_a,
        mean_b,
        saa,
        sbb,
        sab,
    })
}

/// Global NCC of two volumes on a shared grid.
pub fn ncc(a: &Volume, b: &Volume, mask: Option<&MaskVolume>) -> Result<f64> {
    a.grid().ensure_same(b.grid(), "ncc")?;
    if a.channels() != b.channels() {
        return Err(Error::InvalidArgument("ncc: channel counts differ".into()));
    }
    let m = match mask {
        Some(m) => {
            a.grid().ensure_same(m.grid(), "ncc mask")?;
            Some(m.data().repeat(a.channels()))
        }
        None => None,
    };
    Ok(pearson(a.data(), b.data(), m.as_deref())?.r)
}

/// Penalty and its gradient for `n` stacked 3-component fields over
/// interpolation dims `[nx, ny, nz]`. Differences are taken between
/// neighbouring voxels of the stored values.
pub fn penalty_and_grad<T: Real>(u: &[T], n: usize, dims: [usize; 3]) -> Result<(f64, Vec<T>)> {
    if dims.iter().any(|&d| d < 2) {
        return Err(Error::InvalidArgument(format!("gradient penalty needs at least 2 voxels per axis, got {dims:?}")));
    }
    let s: usize = dims.iter().product();
    if u.len() != n * 3 * s {
        return Err(Error::LengthMismatch {
            expected: n * 3 * s,
            found: u.len(),
        });
    }
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut total = 0.0;
    let mut grad = vec![0.0f64; u.len()];
    for a in 0..3 {
        let valid = s / dims[a] * (dims[a] - 1);
        let denom = (n * 3 * valid) as f64;
        let st = strides[a];
        let terms = (0..n * 3).flat_map(|f| {
            (0..s).filter_map(move |j| {
                let pos = (j / st) % dims[a];
                (pos + 1 < dims[a]).then_some(f * s + j)
            })
        });
        let sq = pairwise_sum(terms.clone().map(|k| (u[k + st].f64() - u[k].f64()).powi(2)));
        total += sq / denom;
        for k in terms {
            let d = 2.0 * (u[k + st].f64() - u[k].f64()) / denom;
            grad[k + st] += d;
            grad[k] -= d;
        }
    }
    Ok((total, grad.into_iter().map(T::lit).collect()))
}

/// Mean over components and positions of the squared forward differences,
/// summed over the three axes. Zero for constant fields.
pub fn l2_gradient_penalty(dvf: &DisplacementField) -> Result<f64> {
    Ok(penalty_and_grad(dvf.volume().data(), 1, dvf.grid().dims)?.0)
}

/// `−ncc(fixed, warp(moving, dvf)) + λ·penalty(dvf)`.
pub fn dir_loss(fixed: &Volume, moving: &Volume, dvf: &DisplacementField, lambda: f64, mask: Option<&MaskVolume>) -> Result<f64> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda {lambda} < 0")));
    }
    fixed.grid().ensure_same(moving.grid(), "dir_loss")?;
    let warped = warp(moving, dvf)?;
    Ok(-ncc(fixed, &warped, mask)? + lambda * l2_gradient_penalty(dvf)?)
}

/// Graph form of [`dir_loss`] over batched tensors; `flow` carries the
/// gradient. Returns `(loss, ncc, penalty)` nodes.
pub fn dir_loss_graph<T: Real>(
    g: &mut Graph<T>,
    fixed: Var,
    moving: Var,
    flow: Var,
    spacing_mm: [f64; 3],
    lambda: f64,
    mask: Option<&[u8]>,
) -> Result<(Var, Var, Var)> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("lambda {lambda} < 0")));
    }
    let warped = g.warp(moving, flow, spacing_mm)?;
    let sim = g.ncc(fixed, warped, mask)?;
    let pen = g.grad_l2(flow)?;
    let neg = g.scale(sim, -1.0);
    let reg = g.scale(pen, lambda);
    let loss = g.add(neg, reg)?;
    Ok((loss, sim, pen))
}

/// Batched tensor view of a single volume: `[1, C, nz, ny, nx]`.
pub fn volume_tensor<T: Real>(v: &Volume) -> Tensor<T> {
    let [nx, ny, nz] = v.dims();
    Tensor::new(
        vec![1, v.channels(), nz, ny, nx],
        v.data().iter().map(|&x| T::lit(x as f64)).collect(),
    )
    .expect("volume length matches its grid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volio::Grid;

    fn vol(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f32) -> Volume {
        Volume::from_fn(Grid::new(dims, [1.0; 3], [0.0; 3]).unwrap(), f).unwrap()
    }

    #[test]
    fn ncc_examples() {
        let a = vol([4, 3, 2], |x, y, z| (x * 3 + y * y + z) as f32 * 0.1);
        assert!((ncc(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
        let b = a.map(|v| 2.5 * v - 0.3);
        assert!((ncc(&a, &b, None).unwrap() - 1.0).abs() < 1e-6);
        let p = pearson(&[0.0f64, 1.0, 0.0, 1.0], &[1.0, 0.0, 1.0, 0.0], None).unwrap();
        assert_eq!(p.r, -1.0);
        let c = vol([4, 3, 2], |_, _, _| 0.2);
        assert!(matches!(ncc(&a, &c, None), Err(Error::ZeroVariance)));
    }

    #[test]
    fn ncc_is_symmetric() {
        let a = vol([5, 4, 3], |x, y, z| ((x * 7 + y * 3 + z * 11) % 13) as f32);
        let b = vol([5, 4, 3], |x, y, z| ((x * 5 + y * 2 + z) % 7) as f32);
        let d = ncc(&a, &b, None).unwrap() - ncc(&b, &a, None).unwrap();
        assert!(d.abs() < 1e-12);
    }

    /// Brute-force: per component, per axis, squared forward differences.
    fn penalty_oracle(dvf: &DisplacementField) -> f64 {
        let [nx, ny, nz] = dvf.grid().dims;
        let g = dvf.grid();
        let mut total = 0.0;
        for a in 0..3 {
            let mut sum = 0.0;
            let mut count = 0usize;
            for c in 0..3 {
                let u = dvf.component(c);
                for z in 0..nz {
                    for y in 0..ny {
                        for x in 0..nx {
                            let nb = [x + 1, y + 1, z + 1];
                            let (xx, yy, zz) = match a {
                                0 if nb[0] < nx => (nb[0], y, z),
                                1 if nb[1] < ny => (x, nb[1], z),
                                2 if nb[2] < nz => (x, y, nb[2]),
                                _ => continue,
                            };
                            let d = u[g.index(xx, yy, zz)] as f64 - u[g.index(x, y, z)] as f64;
                            sum += d * d;
                            count += 1;
                        }
                    }
                }
            }
            total += sum / count as f64;
        }
        total
    }

    #[test]
    fn penalty_examples() {
        let grid = Grid::new([5, 4, 3], [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(l2_gradient_penalty(&DisplacementField::zeros(grid.clone())).unwrap(), 0.0);
        assert_eq!(l2_gradient_penalty(&DisplacementField::uniform(grid.clone(), [1.0, -2.0, 0.5])).unwrap(), 0.0);
        let ramp = DisplacementField::from_fn(grid.clone(), |x, _, _| [x as f64, 0.0, 0.0]);
        let p = l2_gradient_penalty(&ramp).unwrap();
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
        assert!((p - penalty_oracle(&ramp)).abs() < 1e-12);
        let wavy = DisplacementField::from_fn(grid, |x, y, z| {
            [(x as f64 * 0.7).sin(), (y * z) as f64 * 0.1, (x + y) as f64 * 0.05]
        });
        let p = l2_gradient_penalty(&wavy).unwrap();
        assert!((p - penalty_oracle(&wavy)).abs() < 1e-9);
        let p2 = l2_gradient_penalty(&wavy.scaled(2.0)).unwrap();
        assert!((p2 - 4.0 * p).abs() < 1e-9);
        let shifted = wavy.add(&DisplacementField::uniform(wavy.grid().clone(), [3.0, 1.0, -1.0])).unwrap();
        assert!((l2_gradient_penalty(&shifted).unwrap() - p).abs() < 1e-6);
    }

    #[test]
    fn dir_loss_examples() {
        let a = vol([6, 5, 4], |x, y, z| ((x + 2 * y + 3 * z) % 5) as f32);
        let zero = DisplacementField::zeros(a.grid().clone());
        for lambda in [0.0, 0.5, 1.0] {
            assert!((dir_loss(&a, &a, &zero, lambda, None).unwrap() + 1.0).abs() < 1e-12);
        }
        let u = DisplacementField::from_fn(a.grid().clone(), |x, y, _| [0.1 * x as f64, -0.05 * y as f64, 0.0]);
        let pen = l2_gradient_penalty(&u).unwrap();
        let l1 = dir_loss(&a, &a, &u, 1.0, None).unwrap();
        let l5 = dir_loss(&a, &a, &u, 0.5, None).unwrap();
        assert!((l1 - l5 - 0.5 * pen).abs() < 1e-12);
        let l0 = dir_loss(&a, &a, &u, 0.0, None).unwrap();
        let warped = warp(&a, &u).unwrap();
        assert!((l0 + ncc(&a, &warped, None).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn graph_and_volume_forms_agree() {
        let a = vol([6, 5, 4], |x, y, z| ((x * 3 + y + z * z) % 7) as f32 * 0.2);
        let b = vol([6, 5, 4], |x, y, z| ((x + 2 * y + z) % 5) as f32 * 0.3);
        let u = DisplacementField::from_fn(a.grid().clone(), |x, y, z| {
            [0.3 * (y as f64).sin(), 0.2 * x as f64 * 0.1, -0.4 + 0.05 * z as f64]
        });
        let want = dir_loss(&a, &b, &u, 0.7, None).unwrap();
        let mut g = Graph::<f64>::new();
        let fv = g.constant(volume_tensor(&a));
        let mv = g.constant(volume_tensor(&b));
        let fl = g.leaf(volume_tensor(u.volume()));
        let (loss, _, _) = dir_loss_graph(&mut g, fv, mv, fl, [1.0; 3], 0.7, None).unwrap();
        assert!((g.value(loss).item() - want).abs() < 1e-5);
    }
}
