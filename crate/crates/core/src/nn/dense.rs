//! Fully connected layer.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::{gemm, MatRef, Real};

impl<T: Real> Graph<T> {
    /// `y = x·Wᵀ + b` with `x [N, F]`, `w [G, F]`, `b [G]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::Shape(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        let (n, f, gdim) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.value(b).shape() != [gdim] {
                return Err(Error::Shape("linear bias".into()));
            }
        }
        let mut out = vec![T::zero(); n * gdim];
        if let Some(b) = b {
            for row in out.chunks_mut(gdim) {
                row.copy_from_slice(self.value(b).data());
            }
        }
        gemm(
            T::one(),
            MatRef::row_major(self.value(x).data(), n, f),
            MatRef::row_major(self.value(w).data(), gdim, f).t(),
            T::one(),
            &mut out,
            gdim,
        );
        let out = Tensor::new(vec![n, gdim], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.op(
            out,
            &parents,
            Box::new(move |bw| {
                let gy = MatRef::row_major(bw.grad, n, gdim);
                let dx = bw.needs[0].then(|| {
                    let mut dx = vec![T::zero(); n * f];
                    gemm(T::one(), gy, MatRef::row_major(bw.inputs[1].data(), gdim, f), T::zero(), &mut dx, f);
                    dx
                });
                let dw = bw.needs[1].then(|| {
                    let mut dw = vec![T::zero(); gdim * f];
                    gemm(T::one(), gy.t(), MatRef::row_major(bw.inputs[0].data(), n, f), T::zero(), &mut dw, f);
                    dw
                });
                let mut res = vec![dx, dw];
                if bw.inputs.len() == 3 {
                    res.push(bw.needs[2].then(|| {
                        (0..gdim)
                            .map(|j| (0..n).fold(T::zero(), |a, i| a + bw.grad[i * gdim + j]))
                            .collect()
                    }));
                }
                res
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight_and_bias_only() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap());
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let w = g.constant(Tensor::new(vec![3, 3], eye).unwrap());
        let b = g.constant(Tensor::zeros(vec![3]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let w0 = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::new(vec![2], vec![0.25, -7.0]).unwrap());
        let y = g.linear(x, w0, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -7.0, 0.25, -7.0]);
    }
}
