//! Batch normalization and dropout.

use rand::Rng as _;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics of a training-mode batch norm call, used to
/// update the running buffers. `var` is the unbiased estimate.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Running statistics used in evaluation mode.
pub enum BnMode<'a, T> {
    Train,
    Eval { mean: &'a [T], var: &'a [T] },
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!("batch_norm: {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<T: Real> Graph<T> {
    /// Normalizes each channel of `x [N, C, …]` and applies `γ·x̂ + β`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>) -> Result<(Var, Option<BatchStats<T>>)> {
        let (n, c, s) = layout(self.value(x).shape())?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::Shape("batch_norm affine parameters".into()));
        }
        let eps = T::lit(BN_EPS);
        let xd = self.value(x).data();
        let at = move |ni: usize, ci: usize| (ni * c + ci) * s;
        let m = n * s;
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                if m < 2 {
                    return Err(Error::Shape("batch_norm training needs more than one value per channel".into()));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ci in 0..c {
                    let mut acc = 0.0f64;
                    for ni in 0..n {
                        acc += xd[at(ni, ci)..at(ni, ci) + s].iter().map(|v| v.f64()).sum::<f64>();
                    }
                    let mu = acc / m as f64;
                    let mut sq = 0.0f64;
                    for ni in 0..n {
                        sq += xd[at(ni, ci)..at(ni, ci) + s]
                            .iter()
                            .map(|v| (v.f64() - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ci] = T::lit(mu);
                    var[ci] = T::lit(sq / m as f64);
                }
                let unbiased = var
                    .iter()
                    .map(|&v| v * T::lit(m as f64 / (m - 1) as f64))
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape("batch_norm running statistics".into()));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let training = stats.is_some();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                let r = at(ni, ci)..at(ni, ci) + s;
                for i in r {
                    let h = (xd[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = g[ci] * h + b[ci];
                }
            }
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let y = self.op(
            out,
            &[x, gamma, beta],
            Box::new(move |bw| {
                let gam = bw.inputs[1].data();
                let gy = bw.grad;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        for i in at(ni, ci)..at(ni, ci) + s {
                            dgamma[ci] = dgamma[ci] + gy[i] * xhat[i];
                            dbeta[ci] = dbeta[ci] + gy[i];
                        }
                    }
                }
                let dx = bw.needs[0].then(|| {
                    let mut dx = vec![T::zero(); gy.len()];
                    let mf = T::from_usize(m).unwrap();
                    for ni in 0..n {
                        for ci in 0..c {
                            let k = gam[ci] * inv_std[ci];
                            for i in at(ni, ci)..at(ni, ci) + s {
                                dx[i] = if training {
                                    k * (gy[i] - dbeta[ci] / mf - xhat[i] * dgamma[ci] / mf)
                                } else {
                                    k * gy[i]
                                };
                            }
                        }
                    }
                    dx
                });
                vec![dx, Some(dgamma), Some(dbeta)]
            }),
        );
        Ok((y, stats))
    }

    /// Inverted dropout: zeroes each value with probability `rate` and scales
    /// survivors by `1/(1−rate)` when `training`, identity otherwise.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let t = self.value(x);
        let mask: Vec<T> = (0..t.len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let mask = Tensor::new(t.shape().to_vec(), mask)?;
        self.mul_const(x, &mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn training_output_moments_match_affine_parameters() {
        let mut rng = Rng::seed_from_u64(3);
        let (n, c, s) = (4, 3, 10);
        let data: Vec<f64> = (0..n * c * s).map(|_| rng.random::<f64>() * 5.0 - 1.0).collect();
        let gamma = [0.5, 2.0, 1.5];
        let beta = [0.1, -1.0, 3.0];
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![n, c, s], data).unwrap());
        let gv = g.constant(Tensor::new(vec![c], gamma.to_vec()).unwrap());
        let bv = g.constant(Tensor::new(vec![c], beta.to_vec()).unwrap());
        let (y, stats) = g.batch_norm(x, gv, bv, BnMode::Train).unwrap();
        assert!(stats.is_some());
        let yd = g.value(y).data();
        for ci in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|ni| yd[(ni * c + ci) * s..(ni * c + ci + 1) * s].to_vec()).collect();
            let mu = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((mu - beta[ci]).abs() < 1e-4);
            assert!((var - gamma[ci] * gamma[ci]).abs() < 1e-4 * (1.0 + gamma[ci] * gamma[ci]) + 1e-3 * BN_EPS.sqrt());
        }
    }

    #[test]
    fn eval_mode_uses_given_statistics() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 2], vec![3.0, 5.0]).unwrap());
        let gv = g.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
        let bv = g.constant(Tensor::new(vec![1], vec![0.0]).unwrap());
        let (y, stats) = g
            .batch_norm(x, gv, bv, BnMode::Eval { mean: &[1.0], var: &[4.0 - BN_EPS] })
            .unwrap();
        assert!(stats.is_none());
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);
        assert!((g.value(y).data()[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_modes() {
        let mut rng = Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(vec![2, 500], 1.0));
        assert_eq!(g.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(g.dropout(x, 0.4, &mut rng, false).unwrap(), x);
        let y = g.dropout(x, 0.4, &mut rng, true).unwrap();
        let d = g.value(y).data();
        assert!(d.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.6).abs() < 1e-12));
        let zeros = d.iter().filter(|&&v| v == 0.0).count() as f64 / d.len() as f64;
        assert!((zeros - 0.4).abs() < 0.06);
        assert!(g.dropout(x, 1.0, &mut rng, true).is_err());
    }
}
