//! Pooling and resolution changes over `[N, C, D, H, W]` tensors.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

fn dims5<T: Real>(t: &Tensor<T>, what: &str) -> Result<[usize; 5]> {
    let s = t.shape();
    if s.len() != 5 {
        return Err(Error::Shape(format!("{what}: expected 5-d tensor, got {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

impl<T: Real> Graph<T> {
    /// Max pooling with a cubic window. Padding never wins the max.
    pub fn max_pool3d(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, d, h, w] = dims5(self.value(x), "max_pool3d")?;
        if k == 0 || stride == 0 || padding >= k {
            return Err(Error::Shape(format!("max_pool3d: k {k}, stride {stride}, padding {padding}")));
        }
        let od = |len: usize| -> Result<usize> {
            let span = len + 2 * padding;
            if span < k {
                return Err(Error::Shape("max_pool3d: window exceeds input".into()));
            }
            Ok((span - k) / stride + 1)
        };
        let (odd, oh, ow) = (od(d)?, od(h)?, od(w)?);
        let src = self.value(x).data();
        let out_len = n * c * odd * oh * ow;
        let mut out = Vec::with_capacity(out_len);
        let mut arg = Vec::with_capacity(out_len);
        let p = padding as i64;
        for nc in 0..n * c {
            let base = nc * d * h * w;
            for oz in 0..odd {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut bi = usize::MAX;
                        for kz in 0..k {
                            let iz = (oz * stride + kz) as i64 - p;
                            if iz < 0 || iz >= d as i64 {
                                continue;
                            }
                            for ky in 0..k {
                                let iy = (oy * stride + ky) as i64 - p;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * stride + kx) as i64 - p;
                                    if ix < 0 || ix >= w as i64 {
                                        continue;
                                    }
                                    let i = base + ((iz as usize * h) + iy as usize) * w + ix as usize;
                                    if src[i] > best || bi == usize::MAX {
                                        best = src[i];
                                        bi = i;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        arg.push(bi);
                    }
                }
            }
        }
        let in_len = src.len();
        let out = Tensor::new(vec![n, c, odd, oh, ow], out)?;
        Ok(self.op(
            out,
            &[x],
            Box::new(move |bw| {
                let mut g = vec![T::zero(); in_len];
                for (&i, &gv) in arg.iter().zip(bw.grad) {
                    g[i] = g[i] + gv;
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Mean over all spatial positions: `[N, C, …] → [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() < 3 {
            return Err(Error::Shape(format!("global_avg_pool: {:?}", t.shape())));
        }
        let (n, c) = (t.shape()[0], t.shape()[1]);
        let s = t.spatial();
        let inv = T::one() / T::from_usize(s).unwrap();
        let data = t
            .data()
            .chunks(s)
            .map(|ch| ch.iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        Ok(self.op(
            out,
            &[x],
            Box::new(move |bw| {
                let mut g = Vec::with_capacity(bw.grad.len() * s);
                for &gv in bw.grad {
                    g.extend(std::iter::repeat_n(gv * inv, s));
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Nearest-neighbour upsampling by 2 along each spatial axis.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let [n, c, d, h, w] = dims5(self.value(x), "upsample_nearest2")?;
        let src = self.value(x).data();
        let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
        let mut out = Vec::with_capacity(n * c * d2 * h2 * w2);
        for nc in 0..n * c {
            let base = nc * d * h * w;
            for z in 0..d2 {
                for y in 0..h2 {
                    let row = base + ((z / 2) * h + y / 2) * w;
                    for xx in 0..w2 {
                        out.push(src[row + xx / 2]);
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, c, d2, h2, w2], out)?;
        Ok(self.op(
            out,
            &[x],
            Box::new(move |bw| {
                let mut g = vec![T::zero(); n * c * d * h * w];
                let mut i = 0;
                for nc in 0..n * c {
                    let base = nc * d * h * w;
                    for z in 0..d2 {
                        for y in 0..h2 {
                            let row = base + ((z / 2) * h + y / 2) * w;
                            for xx in 0..w2 {
                                g[row + xx / 2] = g[row + xx / 2] + bw.grad[i];
                                i += 1;
                            }
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_picks_window_maximum() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap());
        let y = g.max_pool3d(x, 2, 2, 0).unwrap();
        assert_eq!(g.value(y).data(), &[7.0]);
        let y = g.max_pool3d(x, 3, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[7.0]);
    }

    #[test]
    fn global_average_and_upsample() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 2, 1, 1, 2], vec![1.0, 3.0, -2.0, 4.0]).unwrap());
        let p = g.global_avg_pool(x).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 1.0]);
        let u = g.upsample_nearest2(x).unwrap();
        assert_eq!(g.value(u).shape(), &[1, 2, 2, 2, 4]);
        assert_eq!(&g.value(u).data()[..4], &[1.0, 1.0, 3.0, 3.0]);
    }
}
