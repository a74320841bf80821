//! 3D convolution via planewise im2col + GEMM. Batch samples run in
//! parallel; weight gradients are reduced over samples in index order.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::par;
use crate::real::{gemm, MatRef, Real};

/// Max im2col buffer size (elements) per chunk of output planes.
const COL_BUDGET: usize = 1 << 21;

#[derive(Clone, Copy, Debug)]
struct Geom {
    n: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    inp: [usize; 3],
    out: [usize; 3],
}

impl Geom {
    fn in_len(&self) -> usize {
        self.cin * self.inp.iter().product::<usize>()
    }
    fn out_spatial(&self) -> usize {
        self.out.iter().product()
    }
    fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }
    fn plane(&self) -> usize {
        self.out[1] * self.out[2]
    }
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
    fn chunk_planes(&self) -> usize {
        (COL_BUDGET / (self.rows() * self.plane()).max(1)).clamp(1, self.out[0])
    }
    /// Output index range along one axis whose input tap `kk` is in bounds.
    fn valid(&self, axis: usize, kk: usize) -> (usize, usize) {
        let (s, p) = (self.stride as i64, self.pad as i64);
        let n_in = self.inp[axis] as i64;
        let n_out = self.out[axis] as i64;
        let kk = kk as i64;
        // need 0 ≤ o·s + kk − p ≤ n_in − 1
        let lo = (p - kk).max(0);
        let lo = (lo + s - 1) / s;
        let hi_num = n_in - 1 + p - kk;
        let hi = if hi_num < 0 { 0 } else { (hi_num / s + 1).min(n_out) };
        (lo.min(n_out) as usize, hi.max(lo.min(n_out)) as usize)
    }
}

fn im2col<T: Real>(g: &Geom, x: &[T], oz0: usize, oz1: usize, col: &mut [T]) {
    let [d, h, w] = g.inp;
    let [_, ho, wo] = g.out;
    let p_len = (oz1 - oz0) * ho * wo;
    let k = g.k;
    let s = g.stride;
    for ci in 0..g.cin {
        for kz in 0..k {
            for ky in 0..k {
                let (ylo, yhi) = g.valid(1, ky);
                for kx in 0..k {
                    let (xlo, xhi) = g.valid(2, kx);
                    let r = ((ci * k + kz) * k + ky) * k + kx;
                    let row = &mut col[r * p_len..(r + 1) * p_len];
                    for oz in oz0..oz1 {
                        let seg = &mut row[(oz - oz0) * ho * wo..(oz - oz0 + 1) * ho * wo];
                        let iz = (oz * s + kz) as i64 - g.pad as i64;
                        if iz < 0 || iz >= d as i64 {
                            seg.fill(T::zero());
                            continue;
                        }
                        let zbase = (ci * d + iz as usize) * h * w;
                        for oy in 0..ho {
                            let line = &mut seg[oy * wo..(oy + 1) * wo];
                            if oy < ylo || oy >= yhi {
                                line.fill(T::zero());
                                continue;
                            }
                            let iy = oy * s + ky - g.pad;
                            let base = zbase + iy * w;
                            line[..xlo].fill(T::zero());
                            line[xhi..].fill(T::zero());
                            for ox in xlo..xhi {
                                line[ox] = x[base + ox * s + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &Geom, col: &[T], oz0: usize, oz1: usize, dx: &mut [T]) {
    let [d, h, w] = g.inp;
    let [_, ho, wo] = g.out;
    let p_len = (oz1 - oz0) * ho * wo;
    let k = g.k;
    let s = g.stride;
    for ci in 0..g.cin {
        for kz in 0..k {
            for ky in 0..k {
                let (ylo, yhi) = g.valid(1, ky);
                for kx in 0..k {
                    let (xlo, xhi) = g.valid(2, kx);
                    let r = ((ci * k + kz) * k + ky) * k + kx;
                    let row = &col[r * p_len..(r + 1) * p_len];
                    for oz in oz0..oz1 {
                        let iz = (oz * s + kz) as i64 - g.pad as i64;
                        if iz < 0 || iz >= d as i64 {
                            continue;
                        }
                        let seg = &row[(oz - oz0) * ho * wo..];
                        let zbase = (ci * d + iz as usize) * h * w;
                        for oy in ylo..yhi {
                            let iy = oy * s + ky - g.pad;
                            let base = zbase + iy * w;
                            let line = &seg[oy * wo..];
                            for ox in xlo..xhi {
                                let i = base + ox * s + kx - g.pad;
                                dx[i] = dx[i] + line[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn forward_sample<T: Real>(g: &Geom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let os = g.out_spatial();
    let mut out = vec![T::zero(); g.cout * os];
    let wmat = MatRef::row_major(w, g.cout, g.rows());
    if g.pointwise() {
        gemm(T::one(), wmat, MatRef::row_major(x, g.cin, os), T::zero(), &mut out, os);
    } else {
        let cp = g.chunk_planes();
        let mut col = vec![T::zero(); g.rows() * cp * g.plane()];
        let mut oz0 = 0;
        while oz0 < g.out[0] {
            let oz1 = (oz0 + cp).min(g.out[0]);
            let p_len = (oz1 - oz0) * g.plane();
            let col = &mut col[..g.rows() * p_len];
            im2col(g, x, oz0, oz1, col);
            gemm(
                T::one(),
                wmat,
                MatRef::row_major(col, g.rows(), p_len),
                T::zero(),
                &mut out[oz0 * g.plane()..],
                os,
            );
            oz0 = oz1;
        }
    }
    if let Some(b) = b {
        for (co, &bv) in b.iter().enumerate() {
            for v in &mut out[co * os..(co + 1) * os] {
                *v = *v + bv;
            }
        }
    }
    out
}

struct SampleGrads<T> {
    dw: Option<Vec<T>>,
    dx: Option<Vec<T>>,
}

fn backward_sample<T: Real>(g: &Geom, x: &[T], w: &[T], dy: &[T], need_w: bool, need_x: bool) -> SampleGrads<T> {
    let os = g.out_spatial();
    let rows = g.rows();
    let mut dw = need_w.then(|| vec![T::zero(); g.cout * rows]);
    let mut dx = need_x.then(|| vec![T::zero(); g.in_len()]);
    let wmat = MatRef::row_major(w, g.cout, rows);
    if g.pointwise() {
        let dymat = MatRef::row_major(dy, g.cout, os);
        if let Some(dw) = dw.as_mut() {
            gemm(T::one(), dymat, MatRef::row_major(x, g.cin, os).t(), T::zero(), dw, rows);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(T::one(), wmat.t(), dymat, T::zero(), dx, os);
        }
        return SampleGrads { dw, dx };
    }
    let cp = g.chunk_planes();
    let mut col = vec![T::zero(); rows * cp * g.plane()];
    let mut oz0 = 0;
    while oz0 < g.out[0] {
        let oz1 = (oz0 + cp).min(g.out[0]);
        let p_len = (oz1 - oz0) * g.plane();
        let col = &mut col[..rows * p_len];
        let dychunk = MatRef {
            data: &dy[oz0 * g.plane()..],
            rows: g.cout,
            cols: p_len,
            row_stride: os,
            col_stride: 1,
        };
        if let Some(dw) = dw.as_mut() {
            im2col(g, x, oz0, oz1, col);
            gemm(T::one(), dychunk, MatRef::row_major(col, rows, p_len).t(), T::one(), dw, rows);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(T::one(), wmat.t(), dychunk, T::zero(), col, p_len);
            col2im(g, col, oz0, oz1, dx);
        }
        oz0 = oz1;
    }
    SampleGrads { dw, dx }
}

impl<T: Real> Graph<T> {
    /// Cross-correlation of `x [N, Cin, D, H, W]` with `w [Cout, Cin, k, k, k]`
    /// plus optional bias `[Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 5 || ws.len() != 5 {
            return Err(Error::Shape(format!("conv3d: input {xs:?}, weight {ws:?}")));
        }
        let k = ws[2];
        if ws[3] != k || ws[4] != k || ws[1] != xs[1] || stride == 0 {
            return Err(Error::Shape(format!(
                "conv3d: input {xs:?}, weight {ws:?}, stride {stride}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [ws[0]] {
                return Err(Error::Shape("conv3d bias".into()));
            }
        }
        let mut out_dims = [0usize; 3];
        for a in 0..3 {
            let span = xs[2 + a] + 2 * padding;
            if span < k {
                return Err(Error::Shape(format!("conv3d: kernel {k} exceeds padded input {xs:?}")));
            }
            out_dims[a] = (span - k) / stride + 1;
        }
        let geom = Geom {
            n: xs[0],
            cin: xs[1],
            cout: ws[0],
            k,
            stride,
            pad: padding,
            inp: [xs[2], xs[3], xs[4]],
            out: out_dims,
        };
        let xin = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let samples = par::map_collect(geom.n, |n| {
            forward_sample(&geom, &xin[n * geom.in_len()..(n + 1) * geom.in_len()], wv, bv)
        });
        let out = Tensor::new(
            vec![geom.n, geom.cout, out_dims[0], out_dims[1], out_dims[2]],
            samples.concat(),
        )?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.op(
            out,
            &parents,
            Box::new(move |bw| {
                let x = bw.inputs[0].data();
                let w = bw.inputs[1].data();
                let (need_x, need_w) = (bw.needs[0], bw.needs[1]);
                let os = geom.out_spatial();
                let per = geom.cout * os;
                let grads = par::map_collect(geom.n, |n| {
                    backward_sample(
                        &geom,
                        &x[n * geom.in_len()..(n + 1) * geom.in_len()],
                        w,
                        &bw.grad[n * per..(n + 1) * per],
                        need_w,
                        need_x,
                    )
                });
                let mut dw: Option<Vec<T>> = None;
                let mut dx: Vec<T> = Vec::new();
                for s in grads {
                    if let Some(sw) = s.dw {
                        match dw.as_mut() {
                            Some(acc) => acc.iter_mut().zip(sw).for_each(|(a, b)| *a = *a + b),
                            None => dw = Some(sw),
                        }
                    }
                    if let Some(sx) = s.dx {
                        dx.extend(sx);
                    }
                }
                let mut res = vec![need_x.then_some(dx), dw];
                if bw.inputs.len() == 3 {
                    let db = bw.needs[2].then(|| {
                        (0..geom.cout)
                            .map(|co| {
                                (0..geom.n).fold(T::zero(), |acc, n| {
                                    let s = &bw.grad[n * per + co * os..n * per + (co + 1) * os];
                                    acc + s.iter().fold(T::zero(), |a, &v| a + v)
                                })
                            })
                            .collect()
                    });
                    res.push(db);
                }
                res
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop convolution used as the oracle.
    fn naive(x: &[f64], xs: [usize; 5], w: &[f64], cout: usize, k: usize, s: usize, p: usize) -> (Vec<f64>, [usize; 3]) {
        let [n, cin, d, h, ww] = xs;
        let od = [(d + 2 * p - k) / s + 1, (h + 2 * p - k) / s + 1, (ww + 2 * p - k) / s + 1];
        let mut out = vec![0.0; n * cout * od[0] * od[1] * od[2]];
        for b in 0..n {
            for co in 0..cout {
                for oz in 0..od[0] {
                    for oy in 0..od[1] {
                        for ox in 0..od[2] {
                            let mut acc = 0.0;
                            for ci in 0..cin {
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iz = (oz * s + kz) as i64 - p as i64;
                                            let iy = (oy * s + ky) as i64 - p as i64;
                                            let ix = (ox * s + kx) as i64 - p as i64;
                                            if iz < 0 || iy < 0 || ix < 0 || iz >= d as i64 || iy >= h as i64 || ix >= ww as i64 {
                                                continue;
                                            }
                                            let xi = (((b * cin + ci) * d + iz as usize) * h + iy as usize) * ww + ix as usize;
                                            let wi = (((co * cin + ci) * k + kz) * k + ky) * k + kx;
                                            acc += x[xi] * w[wi];
                                        }
                                    }
                                }
                            }
                            out[(((b * cout + co) * od[0] + oz) * od[1] + oy) * od[2] + ox] = acc;
                        }
                    }
                }
            }
        }
        (out, od)
    }

    #[test]
    fn matches_naive_for_strides_and_padding() {
        let xs = [2, 3, 5, 6, 7];
        let x: Vec<f64> = (0..xs.iter().product::<usize>()).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect();
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (1, 2, 0), (2, 2, 0), (3, 1, 0), (7, 2, 3)] {
            let cout = 4;
            let w: Vec<f64> = (0..cout * 3 * k * k * k).map(|i| ((i * 53 % 97) as f64) / 48.0 - 1.0).collect();
            let (want, od) = naive(&x, xs, &w, cout, k, s, p);
            let mut g = Graph::<f64>::new();
            let xv = g.constant(Tensor::new(xs.to_vec(), x.clone()).unwrap());
            let wv = g.constant(Tensor::new(vec![cout, 3, k, k, k], w).unwrap());
            let y = g.conv3d(xv, wv, None, s, p).unwrap();
            assert_eq!(g.value(y).shape(), &[2, cout, od[0], od[1], od[2]]);
            for (a, b) in g.value(y).data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-10, "k{k} s{s} p{p}");
            }
        }
    }

    #[test]
    fn identity_kernel_and_all_ones_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap());
        let w = g.constant(Tensor::full(vec![1, 1, 1, 1, 1], 1.0));
        let b = g.constant(Tensor::zeros(vec![1]));
        let y = g.conv3d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let ones = g.constant(Tensor::full(vec![1, 1, 3, 3, 3], 1.0));
        let k = g.constant(Tensor::full(vec![1, 1, 3, 3, 3], 1.0));
        let y = g.conv3d(ones, k, None, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &[27.0]);
    }

    #[test]
    fn rejects_mismatched_channels() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 4, 4, 4]));
        let w = g.constant(Tensor::zeros(vec![1, 3, 3, 3, 3]));
        assert!(g.conv3d(x, w, None, 1, 1).is_err());
    }
}
