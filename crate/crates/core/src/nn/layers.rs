//! Parameterized layers. Each layer owns ids into a [`ParamStore`] and
//! records its forward pass on a [`Graph`].

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, Var};
use super::norm::{BatchStats, BnMode, BN_MOMENTUM};
use super::params::{BufferId, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;
use crate::real::Real;
use crate::rng::Rng;

/// Mode and randomness of one forward pass. Batch-norm statistics seen in
/// training mode are queued and applied to the store afterwards.
pub struct ForwardCtx<'a> {
    pub training: bool,
    pub rng: Option<&'a mut Rng>,
    pending: Vec<(BufferId, BufferId, BatchStats<f64>)>,
}

impl<'a> ForwardCtx<'a> {
    pub fn train(rng: &'a mut Rng) -> Self {
        Self {
            training: true,
            rng: Some(rng),
            pending: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        Self {
            training: false,
            rng: None,
            pending: Vec::new(),
        }
    }

    /// Updates running means/variances with momentum 0.1.
    pub fn apply_bn_updates<T: Real>(&mut self, store: &mut ParamStore<T>) {
        let m = T::lit(BN_MOMENTUM);
        for (mean_id, var_id, stats) in self.pending.drain(..) {
            for (r, &b) in store.buffer_mut(mean_id).data_mut().iter_mut().zip(&stats.mean) {
                *r = (T::one() - m) * *r + m * T::lit(b);
            }
            for (r, &b) in store.buffer_mut(var_id).data_mut().iter_mut().zip(&stats.var) {
                *r = (T::one() - m) * *r + m * T::lit(b);
            }
        }
    }
}

fn kaiming_uniform<T: Real>(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape product")
}

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let w = kaiming_uniform(vec![cout, cin, k, k, k], cin * k * k * k, rng);
        let weight = store.add_param(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add_param(format!("{name}.bias"), Tensor::zeros(vec![cout])));
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    /// Redraws the weights from `N(0, std²)` and zeroes the bias.
    pub fn reinit_normal<T: Real>(&self, store: &mut ParamStore<T>, std: f64, rng: &mut Rng) {
        let normal = Normal::new(0.0, std).expect("finite std");
        for v in store.param_entry_mut(self.weight).value.data_mut() {
            *v = T::lit(normal.sample(rng));
        }
        if let Some(b) = self.bias {
            store.param_entry_mut(b).value.data_mut().fill(T::zero());
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv3d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, fin: usize, fout: usize, rng: &mut Rng) -> Self {
        let weight = store.add_param(format!("{name}.weight"), kaiming_uniform(vec![fout, fin], fin, rng));
        let bias = store.add_param(format!("{name}.bias"), Tensor::zeros(vec![fout]));
        Self { weight, bias }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::full(vec![channels], T::one())),
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(vec![channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(vec![channels], T::one())),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let mode = if ctx.training {
            BnMode::Train
        } else {
            BnMode::Eval {
                mean: store.buffer(self.running_mean).data(),
                var: store.buffer(self.running_var).data(),
            }
        };
        let (y, stats) = g.batch_norm(x, gamma, beta, mode)?;
        if let Some(s) = stats {
            ctx.pending.push((
                self.running_mean,
                self.running_var,
                BatchStats {
                    mean: s.mean.iter().map(|v| v.f64()).collect(),
                    var: s.var.iter().map(|v| v.f64()).collect(),
                },
            ));
        }
        Ok(y)
    }
}

/// Dropout driven by the context's generator; identity in evaluation.
pub fn dropout<T: Real>(g: &mut Graph<T>, x: Var, rate: f64, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
    match (&mut ctx.rng, ctx.training) {
        (Some(rng), true) => g.dropout(x, rate, rng, true),
        _ => Ok(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn initialization_is_seeded_and_bounded() {
        let make = || {
            let mut s = ParamStore::<f32>::new();
            let mut r = rng::rng(5);
            let c = Conv3d::new(&mut s, "c", 2, 4, 3, 1, 1, true, &mut r);
            (s, c)
        };
        let (a, c) = make();
        let (b, _) = make();
        assert_eq!(a.param(c.weight).data(), b.param(c.weight).data());
        let bound = (6.0f32 / 54.0).sqrt();
        assert!(a.param(c.weight).data().iter().all(|v| v.abs() <= bound));
        assert!(a.param(c.bias.unwrap()).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn running_statistics_follow_momentum() {
        let mut s = ParamStore::<f64>::new();
        let bn = BatchNorm::new(&mut s, "bn", 1);
        let mut r = rng::rng(0);
        let mut ctx = ForwardCtx::train(&mut r);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        bn.forward(&mut g, &s, x, &mut ctx).unwrap();
        ctx.apply_bn_updates(&mut s);
        assert!((s.buffer(bn.running_mean).data()[0] - 0.2).abs() < 1e-12);
        // unbiased variance 2 → 0.9·1 + 0.1·2
        assert!((s.buffer(bn.running_var).data()[0] - 1.1).abs() < 1e-12);
    }
}
