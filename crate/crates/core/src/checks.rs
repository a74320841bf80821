//! Gradient verification suite: every differentiable layer and the
//! composite objectives, checked against central differences in f64.

use rand::Rng as _;
use serde::Serialize;

use crate::error::Result;
use crate::nn::{gradcheck, gradcheck_with, BnMode, ForwardCtx, GradcheckReport, Graph, Tensor, Var};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, Serialize)]
pub struct GradEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape product")
}

/// Scalar readout `Σ y ⊙ c` with a fixed random `c`, so every output
/// element carries a distinct weight.
fn readout(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng::rng(seed);
    let c = random(g.value(y).shape(), -1.0, 1.0, &mut r);
    g.dot_const(y, &c)
}

fn entry(name: &str, r: GradcheckReport) -> GradEntry {
    GradEntry {
        name: name.to_string(),
        max_rel_err: r.max_rel_err,
        checked: r.checked,
    }
}

/// Layer-level checks on small seeded shapes.
pub fn layer_suite(seed: u64) -> Result<Vec<GradEntry>> {
    let mut r = rng::rng(seed);
    let mut out = Vec::new();

    let x = random(&[2, 2, 4, 4, 4], -1.0, 1.0, &mut r);
    let w = random(&[3, 2, 3, 3, 3], -0.5, 0.5, &mut r);
    let b = random(&[3], -0.5, 0.5, &mut r);
    for (name, stride, pad) in [("conv3d k3 s1 p1", 1, 1), ("conv3d k3 s2 p1", 2, 1)] {
        let rep = gradcheck(
            |g, v| {
                let y = g.conv3d(v[0], v[1], Some(v[2]), stride, pad)?;
                readout(g, y, 1)
            },
            &[x.clone(), w.clone(), b.clone()],
        )?;
        out.push(entry(name, rep));
    }
    let w1 = random(&[3, 2, 1, 1, 1], -0.5, 0.5, &mut r);
    out.push(entry(
        "conv3d k1",
        gradcheck(
            |g, v| {
                let y = g.conv3d(v[0], v[1], None, 1, 0)?;
                readout(g, y, 2)
            },
            &[x.clone(), w1],
        )?,
    ));

    let xl = random(&[3, 5], -1.0, 1.0, &mut r);
    let wl = random(&[4, 5], -1.0, 1.0, &mut r);
    let bl = random(&[4], -1.0, 1.0, &mut r);
    out.push(entry(
        "linear",
        gradcheck(
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                readout(g, y, 3)
            },
            &[xl.clone(), wl, bl],
        )?,
    ));

    out.push(entry(
        "relu",
        gradcheck(|g, v| { let y = g.relu(v[0]); readout(g, y, 4) }, &[xl.clone()])?,
    ));
    out.push(entry(
        "leaky_relu",
        gradcheck(|g, v| { let y = g.leaky_relu(v[0], 0.2); readout(g, y, 5) }, &[xl.clone()])?,
    ));

    let xb = random(&[4, 3, 2, 2, 1], -2.0, 2.0, &mut r);
    let gam = random(&[3], 0.5, 1.5, &mut r);
    let bet = random(&[3], -0.5, 0.5, &mut r);
    out.push(entry(
        "batch_norm train",
        gradcheck(
            |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], BnMode::Train)?;
                readout(g, y, 6)
            },
            &[xb.clone(), gam.clone(), bet.clone()],
        )?,
    ));
    let rm = [0.1, -0.2, 0.3];
    let rv = [0.9, 1.2, 0.7];
    out.push(entry(
        "batch_norm eval",
        gradcheck(
            |g, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], BnMode::Eval { mean: &rm, var: &rv })?;
                readout(g, y, 7)
            },
            &[xb, gam, bet],
        )?,
    ));

    out.push(entry(
        "dropout (fixed mask)",
        gradcheck(
            |g, v| {
                let mut dr = rng::rng(99);
                let y = g.dropout(v[0], 0.4, &mut dr, true)?;
                readout(g, y, 8)
            },
            &[xl.clone()],
        )?,
    ));

    let xp = random(&[1, 2, 5, 4, 4], -1.0, 1.0, &mut r);
    out.push(entry(
        "max_pool3d",
        gradcheck(|g, v| { let y = g.max_pool3d(v[0], 3, 2, 1)?; readout(g, y, 9) }, &[xp.clone()])?,
    ));
    out.push(entry(
        "global_avg_pool",
        gradcheck(|g, v| { let y = g.global_avg_pool(v[0])?; readout(g, y, 10) }, &[xp.clone()])?,
    ));
    out.push(entry(
        "upsample_nearest2",
        gradcheck(|g, v| { let y = g.upsample_nearest2(v[0])?; readout(g, y, 11) }, &[xp.clone()])?,
    ));
    let xq = random(&[1, 1, 5, 4, 4], -1.0, 1.0, &mut r);
    out.push(entry(
        "concat",
        gradcheck(|g, v| { let y = g.concat(&[v[0], v[1]])?; readout(g, y, 12) }, &[xp, xq])?,
    ));

    let mv = random(&[1, 2, 5, 4, 6], 0.0, 1.0, &mut r);
    let fl = random(&[1, 3, 5, 4, 6], -1.2, 1.2, &mut r);
    out.push(entry(
        "warp",
        gradcheck(
            |g, v| {
                let y = g.warp(v[0], v[1], [1.0, 1.5, 0.8])?;
                readout(g, y, 13)
            },
            &[mv, fl.clone()],
        )?,
    ));
    let a = random(&[2, 1, 4, 4, 4], 0.0, 1.0, &mut r);
    let bb = random(&[2, 1, 4, 4, 4], 0.0, 1.0, &mut r);
    out.push(entry("ncc", gradcheck(|g, v| g.ncc(v[0], v[1], None), &[a.clone(), bb.clone()])?));
    let mask: Vec<u8> = (0..128).map(|i| u8::from(i % 3 != 0)).collect();
    out.push(entry("ncc masked", gradcheck(|g, v| g.ncc(v[0], v[1], Some(&mask)), &[a, bb])?));
    out.push(entry("grad_l2", gradcheck(|g, v| g.grad_l2(v[0]), &[fl])?));

    let lg = random(&[5, 2], -2.0, 2.0, &mut r);
    out.push(entry(
        "weighted cross entropy",
        gradcheck(|g, v| g.weighted_cross_entropy(v[0], &[0, 1, 1, 0, 1], &[1.248, 5.025]), &[lg])?,
    ));
    Ok(out)
}

/// The registration objective with respect to the field and both images.
pub fn dir_loss_check(seed: u64) -> Result<GradEntry> {
    let mut r = rng::rng(seed);
    let fixed = random(&[1, 1, 8, 8, 8], 0.0, 1.0, &mut r);
    let moving = random(&[1, 1, 8, 8, 8], 0.0, 1.0, &mut r);
    let flow = random(&[1, 3, 8, 8, 8], -1.5, 1.5, &mut r);
    let rep = gradcheck(
        |g, v| Ok(crate::sim::dir_loss_graph(g, v[0], v[1], v[2], [1.0, 1.25, 1.5], 0.5, None)?.0),
        &[fixed, moving, flow],
    )?;
    Ok(entry("dir_loss", rep))
}

/// Weighted cross-entropy through a tiny fusion model (𝕁_f ResNet-34
/// branch and clinical MLP), differentiated with respect to every
/// parameter tensor. At most `per_tensor` elements of each tensor are
/// perturbed.
pub fn fusion_loss_check(seed: u64, per_tensor: usize) -> Result<GradEntry> {
    use crate::toxnet::{BranchInputs, ClinicalBranchConfig, FusionConfig, FusionNet, ResNetBranchConfig, ResNetVariant};
    let mut r = rng::rng(seed);
    let config = FusionConfig {
        cbct: None,
        jf: Some(ResNetBranchConfig { variant: ResNetVariant::R34, in_channels: 2, base_width: 2 }),
        clinical: Some(ClinicalBranchConfig { input_dim: 5, widths: [4, 4, 4], dropout: 0.4 }),
    };
    let mut store = crate::nn::ParamStore::<f64>::new();
    let net = FusionNet::new(&mut store, &config, &mut r)?;
    let inputs = BranchInputs {
        cbct: None,
        jf: Some(random(&[4, 2, 8, 8, 8], 0.5, 1.5, &mut r)),
        clinical: Some(random(&[4, 5], 0.0, 1.0, &mut r)),
    };
    let labels = [0, 1, 1, 0];
    let weights = [0.8, 1.3];
    let rep = check_store(
        &mut store,
        |g, st, ctx| {
            let logits = net.forward(g, st, &inputs, ctx)?;
            g.weighted_cross_entropy(logits, &labels, &weights)
        },
        Some(per_tensor),
        // A deep ReLU stack: a shorter step crosses fewer kinks, and the
        // floor absorbs the roundoff on gradients that are exactly zero.
        1e-6,
        1e-4,
    )?;
    Ok(entry("fusion weighted cross entropy", rep))
}

/// The full suite: every layer, the registration objective and the fusion
/// classifier loss.
pub fn full_suite(seed: u64) -> Result<Vec<GradEntry>> {
    let mut v = layer_suite(seed)?;
    v.push(dir_loss_check(seed)?);
    v.push(fusion_loss_check(seed, 6)?);
    Ok(v)
}

/// Generic evaluator over a parameter store: perturbs parameters directly.
pub(crate) fn check_store<F>(
    store: &mut crate::nn::ParamStore<f64>,
    mut loss: F,
    max_per_input: Option<usize>,
    rel_step: f64,
    floor: f64,
) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph<f64>, &crate::nn::ParamStore<f64>, &mut ForwardCtx<'_>) -> Result<Var>,
{
    let inputs: Vec<Tensor<f64>> = store.params().iter().map(|p| p.value.clone()).collect();
    gradcheck_with(
        |xs| {
            for (p, x) in store.params_mut().iter_mut().zip(xs) {
                p.value = x.clone();
            }
            let mut dr = rng::rng(7);
            let mut ctx = ForwardCtx::train(&mut dr);
            let mut g = Graph::new();
            let y = loss(&mut g, store, &mut ctx)?;
            let grads = g.backward(y)?;
            let mut per: Vec<Vec<f64>> = store.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
            for (id, gr) in grads.params(store) {
                per[id.0] = gr;
            }
            Ok((g.value(y).item(), per))
        },
        &inputs,
        max_per_input,
        floor,
        rel_step,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_layer_passes() {
        for e in layer_suite(11).unwrap() {
            assert!(e.max_rel_err < 1e-4, "{e:?}");
        }
    }

    #[test]
    fn fusion_loss_passes() {
        let e = fusion_loss_check(3, 4).unwrap();
        assert!(e.checked > 100);
        assert!(e.max_rel_err < 1e-4, "{e:?}");
    }

    #[test]
    fn dir_loss_passes() {
        let e = dir_loss_check(5).unwrap();
        assert!(e.max_rel_err < 1e-4, "{e:?}");
    }
}
