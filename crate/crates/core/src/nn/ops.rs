//! Elementwise, shape and reduction operations.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;

fn same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.value(a).shape() == g.value(b).shape() {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            g.value(a).shape(),
            g.value(b).shape()
        )))
    }
}

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.op(
            out,
            &[a, b],
            Box::new(|bw| {
                let g = bw.grad.to_vec();
                vec![Some(g.clone()), Some(g)]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let k = T::lit(k);
        let va = self.value(a);
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| x * k).collect())
            .expect("same length");
        self.op(
            out,
            &[a],
            Box::new(move |bw| vec![Some(bw.grad.iter().map(|&g| g * k).collect())]),
        )
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let k = T::lit(k);
        let va = self.value(a);
        let out = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| x + k).collect())
            .expect("same length");
        self.op(out, &[a], Box::new(|bw| vec![Some(bw.grad.to_vec())]))
    }

    /// Elementwise product with a constant of the same shape, or of shape
    /// `[N, 1, …]` broadcast over channels.
    pub fn mul_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let factor: Vec<T> = if c.shape() == va.shape() {
            c.data().to_vec()
        } else if shape.len() >= 2
            && c.shape().len() == shape.len()
            && c.shape()[0] == shape[0]
            && c.shape()[1] == 1
            && c.shape()[2..] == shape[2..]
        {
            let s = va.spatial();
            let ch = shape[1];
            (0..va.len())
                .map(|i| {
                    let n = i / (ch * s);
                    c.data()[n * s + i % s]
                })
                .collect()
        } else {
            return Err(Error::Shape(format!(
                "mul_const: {:?} vs {:?}",
                c.shape(),
                shape
            )));
        };
        let data = va.data().iter().zip(&factor).map(|(x, f)| *x * *f).collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.op(
            out,
            &[a],
            Box::new(move |bw| vec![Some(bw.grad.iter().zip(&factor).map(|(g, f)| *g * *f).collect())]),
        ))
    }

    /// `Σ a ⊙ c` as a scalar.
    pub fn dot_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var> {
        if c.len() != self.value(a).len() {
            return Err(Error::Shape("dot_const length".into()));
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(c.data())
            .fold(T::zero(), |acc, (x, y)| acc + *x * *y);
        let c = c.data().to_vec();
        Ok(self.op(
            Tensor::scalar(s),
            &[a],
            Box::new(move |bw| {
                let g = bw.grad[0];
                vec![Some(c.iter().map(|&v| v * g).collect())]
            }),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |acc, &x| acc + x);
        let n = self.value(a).len();
        self.op(
            Tensor::scalar(s),
            &[a],
            Box::new(move |bw| vec![Some(vec![bw.grad[0]; n])]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let slope = T::lit(slope);
        let va = self.value(a);
        let out = Tensor::new(
            va.shape().to_vec(),
            va.data()
                .iter()
                .map(|&x| if x > T::zero() { x } else { x * slope })
                .collect(),
        )
        .expect("same length");
        self.op(
            out,
            &[a],
            Box::new(move |bw| {
                vec![Some(
                    bw.inputs[0]
                        .data()
                        .iter()
                        .zip(bw.grad)
                        .map(|(&x, &g)| if x > T::zero() { g } else { g * slope })
                        .collect(),
                )]
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.op(out, &[a], Box::new(|bw| vec![Some(bw.grad.to_vec())])))
    }

    /// Concatenation along axis 1 of `[N, C_i, …]` tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() < 2 {
            return Err(Error::Shape("concat needs rank ≥ 2".into()));
        }
        let n = first[0];
        let rest: Vec<usize> = first[2..].to_vec();
        let s: usize = rest.iter().product();
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let sh = self.value(p).shape();
            if sh.len() != first.len() || sh[0] != n || sh[2..] != rest[..] {
                return Err(Error::Shape(format!("concat: {sh:?} vs {first:?}")));
            }
            chans.push(sh[1]);
        }
        let total: usize = chans.iter().sum();
        let mut data = Vec::with_capacity(n * total * s);
        for b in 0..n {
            for (k, &p) in parts.iter().enumerate() {
                let c = chans[k];
                data.extend_from_slice(&self.value(p).data()[b * c * s..(b + 1) * c * s]);
            }
        }
        let mut shape = vec![n, total];
        shape.extend(rest);
        let out = Tensor::new(shape, data)?;
        Ok(self.op(
            out,
            parts,
            Box::new(move |bw| {
                let mut grads: Vec<Vec<T>> = chans.iter().map(|&c| Vec::with_capacity(n * c * s)).collect();
                let mut off = 0;
                for _ in 0..n {
                    for (k, &c) in chans.iter().enumerate() {
                        grads[k].extend_from_slice(&bw.grad[off..off + c * s]);
                        off += c * s;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }
}
