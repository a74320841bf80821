//! Differentiable spatial transformer, global NCC and the gradient penalty
//! as graph operations. Volumes are `[N, C, D, H, W]` with x fastest.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::interp::{trilinear_grad, trilinear_scatter};
use crate::par;
use crate::real::Real;
use crate::sim::{penalty_and_grad, pearson};

/// `[N, C, D, H, W]` → (N, C, interpolation dims `[W, H, D]`).
fn vol_dims(shape: &[usize], what: &str) -> Result<(usize, usize, [usize; 3])> {
    if shape.len() != 5 {
        return Err(Error::Shape(format!("{what}: expected [N, C, D, H, W], got {shape:?}")));
    }
    Ok((shape[0], shape[1], [shape[4], shape[3], shape[2]]))
}

impl<T: Real> Graph<T> {
    /// Spatial transformer: `out(x) = moving(x + flow(x)/spacing)` per sample.
    /// `flow [N, 3, D, H, W]` holds x, y, z displacements in mm.
    pub fn warp(&mut self, moving: Var, flow: Var, spacing_mm: [f64; 3]) -> Result<Var> {
        let (n, c, dims) = vol_dims(self.value(moving).shape(), "warp")?;
        let (fnb, fc, fdims) = vol_dims(self.value(flow).shape(), "warp flow")?;
        if fnb != n || fc != 3 || fdims != dims {
            return Err(Error::Shape(format!(
                "warp: moving {:?}, flow {:?}",
                self.value(moving).shape(),
                self.value(flow).shape()
            )));
        }
        let s = dims.iter().product::<usize>();
        let plane = dims[0] * dims[1];
        let inv_sp = spacing_mm.map(|v| T::lit(1.0 / v));
        let coords = move |u: &[T], j: usize| -> [T; 3] {
            let x = j % dims[0];
            let y = (j / dims[0]) % dims[1];
            let z = j / plane;
            [
                T::from_usize(x).unwrap() + u[j] * inv_sp[0],
                T::from_usize(y).unwrap() + u[s + j] * inv_sp[1],
                T::from_usize(z).unwrap() + u[2 * s + j] * inv_sp[2],
            ]
        };
        let mv = self.value(moving).data();
        let fl = self.value(flow).data();
        let mut out = vec![T::zero(); n * c * s];
        par::for_each_chunk_mut(&mut out, s, |nc, chunk| {
            let b = nc / c;
            let src = &mv[nc * s..(nc + 1) * s];
            let u = &fl[b * 3 * s..(b + 1) * 3 * s];
            for (j, o) in chunk.iter_mut().enumerate() {
                *o = crate::interp::trilinear(src, dims, coords(u, j));
            }
        });
        let out = Tensor::new(self.value(moving).shape().to_vec(), out)?;
        Ok(self.op(
            out,
            &[moving, flow],
            Box::new(move |bw| {
                let mv = bw.inputs[0].data();
                let fl = bw.inputs[1].data();
                let dm = bw.needs[0].then(|| {
                    par::map_collect(n * c, |nc| {
                        let b = nc / c;
                        let u = &fl[b * 3 * s..(b + 1) * 3 * s];
                        let g = &bw.grad[nc * s..(nc + 1) * s];
                        let mut acc = vec![T::zero(); s];
                        for j in 0..s {
                            if g[j] != T::zero() {
                                trilinear_scatter(&mut acc, dims, coords(u, j), g[j]);
                            }
                        }
                        acc
                    })
                    .concat()
                });
                let df = bw.needs[1].then(|| {
                    let mut df = vec![T::zero(); n * 3 * s];
                    par::for_each_chunk_mut(&mut df, 3 * s, |b, dfb| {
                        let u = &fl[b * 3 * s..(b + 1) * 3 * s];
                        for ch in 0..c {
                            let nc = b * c + ch;
                            let src = &mv[nc * s..(nc + 1) * s];
                            let g = &bw.grad[nc * s..(nc + 1) * s];
                            for j in 0..s {
                                let (_, dv) = trilinear_grad(src, dims, coords(u, j));
                                for a in 0..3 {
                                    dfb[a * s + j] = dfb[a * s + j] + g[j] * dv[a] * inv_sp[a];
                                }
                            }
                        }
                    });
                    df
                });
                vec![dm, df]
            }),
        ))
    }

    /// Mean over samples of the global Pearson correlation between `a` and
    /// `b`, restricted to `mask [N, 1, D, H, W]` (nonzero = inside) if given.
    pub fn ncc(&mut self, a: Var, b: Var, mask: Option<&[u8]>) -> Result<Var> {
        let (n, _, _) = vol_dims(self.value(a).shape(), "ncc")?;
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape("ncc: operand shapes differ".into()));
        }
        let per = self.value(a).len() / n;
        let s = self.value(a).spatial();
        let ch = per / s;
        let sample_mask = |i: usize| -> Option<Vec<u8>> {
            mask.map(|m| {
                let m = &m[i * s..(i + 1) * s];
                (0..ch).flat_map(|_| m.iter().copied()).collect()
            })
        };
        if let Some(m) = mask {
            if m.len() != n * s {
                return Err(Error::Shape("ncc mask".into()));
            }
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut stats = Vec::with_capacity(n);
        for i in 0..n {
            let m = sample_mask(i);
            stats.push(pearson(&av[i * per..(i + 1) * per], &bv[i * per..(i + 1) * per], m.as_deref())?);
        }
        let r = stats.iter().map(|p| p.r).sum::<f64>() / n as f64;
        let masks: Vec<Option<Vec<u8>>> = (0..n).map(sample_mask).collect();
        Ok(self.op(
            Tensor::scalar(T::lit(r)),
            &[a, b],
            Box::new(move |bw| {
                let scale = bw.grad[0].f64() / n as f64;
                let av = bw.inputs[0].data();
                let bv = bw.inputs[1].data();
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for (i, p) in stats.iter().enumerate() {
                    let m = masks[i].as_deref();
                    let norm = (p.saa * p.sbb).sqrt();
                    for j in 0..per {
                        if m.is_some_and(|m| m[j] == 0) {
                            continue;
                        }
                        let k = i * per + j;
                        let ac = av[k].f64() - p.mean_a;
                        let bc = bv[k].f64() - p.mean_b;
                        da[k] = T::lit(scale * (bc / norm - p.r * ac / p.saa));
                        db[k] = T::lit(scale * (ac / norm - p.r * bc / p.sbb));
                    }
                }
                vec![bw.needs[0].then_some(da), bw.needs[1].then_some(db)]
            }),
        ))
    }

    /// L2 penalty on forward differences of `flow [N, 3, D, H, W]`: summed
    /// over axes, each axis averaged over samples, components and positions.
    pub fn grad_l2(&mut self, flow: Var) -> Result<Var> {
        let (n, c, dims) = vol_dims(self.value(flow).shape(), "grad_l2")?;
        if c != 3 {
            return Err(Error::Shape("grad_l2 expects 3 components".into()));
        }
        let (p, grad) = penalty_and_grad(self.value(flow).data(), n, dims)?;
        Ok(self.op(
            Tensor::scalar(T::lit(p)),
            &[flow],
            Box::new(move |bw| {
                let g = bw.grad[0];
                vec![Some(grad.iter().map(|&v| v * g).collect())]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_warp_is_identity() {
        let mut g = Graph::<f64>::new();
        let m = g.constant(Tensor::new(vec![1, 1, 2, 3, 4], (0..24).map(|v| v as f64 * 0.5).collect()).unwrap());
        let f = g.leaf(Tensor::zeros(vec![1, 3, 2, 3, 4]));
        let w = g.warp(m, f, [1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g.value(w).data(), g.value(m).data());
    }

    #[test]
    fn ncc_self_is_one() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(vec![2, 1, 1, 2, 2], vec![0.0, 1.0, 0.0, 3.0, 1.0, 2.0, 4.0, 0.5]).unwrap());
        let r = g.ncc(a, a, None).unwrap();
        assert!((g.value(r).item() - 1.0).abs() < 1e-12);
    }
}
