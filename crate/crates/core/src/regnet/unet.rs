//! UNet registration model: a `(fixed, moving)` pair in, a displacement
//! field out, trained without supervision on the registration objective.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{RegistrationReport, Stage};
use crate::error::{Error, Result};
use crate::field::{deformed_fraction, jacobian_field, DisplacementField, DEFORMED_EPS};
use crate::nn::checkpoint;
use crate::nn::{Adam, Conv3d, Graph, ParamStore, Tensor, Var};
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::sim::dir_loss_graph;
use crate::volio::{Grid, Volume};

const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![16, 32, 32, 32],
            decoder_channels: vec![32, 32, 32, 32, 32, 16, 16],
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let l = self.encoder_channels.len();
        if l == 0 || self.decoder_channels.len() < l + 1 || self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return Err(Error::InvalidArgument(format!(
                "UNet needs a non-empty encoder and at least {} decoder layers, got {self:?}",
                l + 1
            )));
        }
        Ok(())
    }

    /// Every spatial dimension must be a multiple of this.
    pub fn divisor(&self) -> usize {
        1 << self.encoder_channels.len()
    }
}

/// Encoder of stride-2 convolutions; decoder of convolutions with
/// nearest-neighbour upsampling and skip connections; final 3-channel
/// flow convolution initialized near zero.
#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    encoder: Vec<Conv3d>,
    decoder: Vec<Conv3d>,
    flow: Conv3d,
}

impl UNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: &UNetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let enc = &config.encoder_channels;
        let dec = &config.decoder_channels;
        let l = enc.len();
        let mut encoder = Vec::with_capacity(l);
        let mut cin = 2;
        for (i, &c) in enc.iter().enumerate() {
            encoder.push(Conv3d::new(store, &format!("enc{i}"), cin, c, 3, 2, 1, true, rng));
            cin = c;
        }
        let mut decoder = Vec::with_capacity(dec.len());
        for (i, &c) in dec.iter().enumerate() {
            // layers 1..l take the upsampled features plus the encoder skip;
            // layer l+1 takes the full-resolution input pair
            let skip = if (1..l).contains(&i) {
                enc[l - 1 - i]
            } else if i == l + 1 {
                2
            } else {
                0
            };
            decoder.push(Conv3d::new(store, &format!("dec{i}"), cin + skip, c, 3, 1, 1, true, rng));
            cin = c;
        }
        let flow = Conv3d::new(store, "flow", cin, 3, 3, 1, 1, true, rng);
        flow.reinit_normal(store, 1e-5, rng);
        Ok(Self {
            config: config.clone(),
            encoder,
            decoder,
            flow,
        })
    }

    /// `pair [N, 2, D, H, W]` → flow `[N, 3, D, H, W]` in mm.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, pair: Var) -> Result<Var> {
        let shape = g.value(pair).shape().to_vec();
        let div = self.config.divisor();
        if shape.len() != 5 || shape[1] != 2 || shape[2..].iter().any(|&d| d % div != 0) {
            return Err(Error::Shape(format!("UNet input {shape:?}: need [N, 2, D, H, W] with dims divisible by {div}")));
        }
        let l = self.encoder.len();
        let mut skips = Vec::with_capacity(l);
        let mut x = pair;
        for conv in &self.encoder {
            let y = conv.forward(g, store, x)?;
            x = g.leaky_relu(y, LEAK);
            skips.push(x);
        }
        for (i, conv) in self.decoder.iter().enumerate() {
            if (1..l).contains(&i) {
                let up = g.upsample_nearest2(x)?;
                x = g.concat(&[up, skips[l - 1 - i]])?;
            } else if i == l + 1 {
                let up = g.upsample_nearest2(x)?;
                x = g.concat(&[up, pair])?;
            }
            let y = conv.forward(g, store, x)?;
            x = g.leaky_relu(y, LEAK);
        }
        if self.decoder.len() == l + 1 {
            x = g.upsample_nearest2(x)?;
        }
        self.flow.forward(g, store, x)
    }
}

/// Trained registration model with its stage and regularization weight.
#[derive(Clone, Debug)]
pub struct DirModel {
    pub stage: Stage,
    pub lambda: f64,
    pub net: UNet,
    pub store: ParamStore<f32>,
    /// Grid of the training volumes, once trained.
    pub grid: Option<Grid>,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    stage: Stage,
    lambda: f64,
    unet: UNetConfig,
    grid: Option<Grid>,
    seed: u64,
}

impl DirModel {
    pub fn new(config: &UNetConfig, stage: Stage, lambda: f64, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, config, &mut rng::child(seed, 0x0u64))?;
        Ok(Self {
            stage,
            lambda,
            net,
            store,
            grid: None,
            seed,
        })
    }

    fn forward_pair(&self, g: &mut Graph<f32>, fixed: &[&Volume], moving: &[&Volume]) -> Result<(Var, Var, Var)> {
        let (f, m) = (stack(fixed)?, stack(moving)?);
        let [n, _, d, h, w] = f.shape().try_into().expect("rank 5");
        let mut pair = Vec::with_capacity(2 * f.len());
        let s = d * h * w;
        for i in 0..n {
            pair.extend_from_slice(&f.data()[i * s..(i + 1) * s]);
            pair.extend_from_slice(&m.data()[i * s..(i + 1) * s]);
        }
        let fv = g.constant(f);
        let mv = g.constant(m);
        let pv = g.constant(Tensor::new(vec![n, 2, d, h, w], pair)?);
        Ok((fv, mv, self.net.forward(g, &self.store, pv)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = ModelMeta {
            kind: "dir_model".into(),
            stage: self.stage,
            lambda: self.lambda,
            unet: self.net.config.clone(),
            grid: self.grid.clone(),
            seed: self.seed,
        };
        checkpoint::save(path, &self.store, &serde_json::to_value(meta).expect("meta serializes"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (loaded, manifest) = checkpoint::load(path)?;
        let meta: ModelMeta =
            serde_json::from_value(manifest.meta).map_err(|e| Error::Checkpoint(format!("model metadata: {e}")))?;
        if meta.kind != "dir_model" {
            return Err(Error::Checkpoint(format!("expected a registration model, found {:?}", meta.kind)));
        }
        let mut model = DirModel::new(&meta.unet, meta.stage, meta.lambda, meta.seed)?;
        checkpoint::restore_into(&mut model.store, &loaded)?;
        model.grid = meta.grid;
        Ok(model)
    }
}

fn stack(vols: &[&Volume]) -> Result<Tensor<f32>> {
    let first = vols.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let [nx, ny, nz] = first.dims();
    let mut data = Vec::with_capacity(vols.len() * first.data().len());
    for v in vols {
        first.grid().ensure_same(v.grid(), "batch")?;
        if v.channels() != 1 {
            return Err(Error::InvalidArgument("registration inputs must be single-channel".into()));
        }
        data.extend_from_slice(v.data());
    }
    Tensor::new(vec![vols.len(), 1, nz, ny, nx], data)
}

/// One forward pass in evaluation mode.
pub fn predict_dvf(model: &DirModel, fixed: &Volume, moving: &Volume) -> Result<DisplacementField> {
    fixed.grid().ensure_same(moving.grid(), "predict_dvf")?;
    if let Some(g) = &model.grid {
        if g.dims != fixed.grid().dims || g.spacing_mm != fixed.grid().spacing_mm {
            return Err(Error::GridMismatch(format!(
                "model trained on {:?} at {:?} mm, input is {:?} at {:?} mm",
                g.dims,
                g.spacing_mm,
                fixed.grid().dims,
                fixed.grid().spacing_mm
            )));
        }
    }
    let mut g = Graph::<f32>::new();
    let (_, _, flow) = model.forward_pair(&mut g, &[fixed], &[moving])?;
    let data = g.value(flow).data().to_vec();
    DisplacementField::new(Volume::new(fixed.grid().clone(), 3, data)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirTrainConfig {
    pub stage: Stage,
    pub lambda: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Train, validation and test shares.
    pub split: [f64; 3],
    pub patience: usize,
    pub lr: f64,
    pub seed: u64,
    pub unet: UNetConfig,
}

impl DirTrainConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            lambda: stage.default_lambda(),
            epochs: 100,
            batch: 7,
            split: [0.70, 0.15, 0.15],
            patience: 10,
            lr: 1e-4,
            seed: 0,
            unet: UNetConfig::default(),
        }
    }
}

/// Shuffled train/validation/test index sets; every part is non-empty.
fn split_indices(n: usize, split: [f64; 3], rng: &mut Rng) -> Result<[Vec<usize>; 3]> {
    let total: f64 = split.iter().sum();
    if split.iter().any(|&s| !(s > 0.0)) || !total.is_finite() {
        return Err(Error::InvalidArgument(format!("split {split:?}")));
    }
    let n_val = ((split[1] / total * n as f64).round() as usize).max(1);
    let n_test = ((split[2] / total * n as f64).round() as usize).max(1);
    if n_val + n_test >= n {
        return Err(Error::InvalidArgument(format!("{n} pairs leave an empty partition for split {split:?}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let train = idx[..n - n_val - n_test].to_vec();
    let val = idx[n - n_val - n_test..n - n_test].to_vec();
    let test = idx[n - n_test..].to_vec();
    Ok([train, val, test])
}

/// Mean loss, NCC and deformed fraction over `idx`.
fn evaluate(model: &DirModel, pairs: &[(Volume, Volume)], idx: &[usize], batch: usize) -> Result<(f64, f64, f64)> {
    let (mut loss, mut sim, mut frac) = (0.0, 0.0, 0.0);
    for chunk in idx.chunks(batch.max(1)) {
        let f: Vec<&Volume> = chunk.iter().map(|&i| &pairs[i].0).collect();
        let m: Vec<&Volume> = chunk.iter().map(|&i| &pairs[i].1).collect();
        let mut g = Graph::<f32>::new();
        let (fv, mv, flow) = model.forward_pair(&mut g, &f, &m)?;
        let (l, s, _) = dir_loss_graph(&mut g, fv, mv, flow, f[0].spacing(), model.lambda, None)?;
        let k = chunk.len() as f64;
        loss += g.value(l).item() as f64 * k;
        sim += g.value(s).item() as f64 * k;
        let flow_data = g.value(flow).data();
        let per = 3 * f[0].grid().len();
        for j in 0..chunk.len() {
            let u = DisplacementField::new(Volume::new(f[0].grid().clone(), 3, flow_data[j * per..(j + 1) * per].to_vec())?)?;
            frac += deformed_fraction(&jacobian_field(&u)?, DEFORMED_EPS)?;
        }
    }
    let n = idx.len() as f64;
    Ok((loss / n, sim / n, frac / n))
}

/// Trains a UNet on `(fixed, moving)` pairs with early stopping on the
/// validation loss; the returned model holds the best validation weights.
/// The report carries validation loss, NCC and deformed fraction.
pub fn train_dir(pairs: &[(Volume, Volume)], cfg: &DirTrainConfig) -> Result<(DirModel, RegistrationReport)> {
    let start = Instant::now();
    if pairs.len() < 3 {
        return Err(Error::InvalidArgument(format!("train_dir needs at least 3 pairs, got {}", pairs.len())));
    }
    if cfg.batch == 0 || cfg.epochs == 0 || !(cfg.lambda >= 0.0) {
        return Err(Error::InvalidArgument("batch and epochs must be positive, lambda non-negative".into()));
    }
    let grid = pairs[0].0.grid().clone();
    for (f, m) in pairs {
        grid.ensure_same(f.grid(), "train_dir")?;
        grid.ensure_same(m.grid(), "train_dir")?;
    }
    let mut r = rng::child(cfg.seed, 1);
    let [train, val, _test] = split_indices(pairs.len(), cfg.split, &mut r)?;
    let mut model = DirModel::new(&cfg.unet, cfg.stage, cfg.lambda, cfg.seed)?;
    model.grid = Some(grid.clone());
    let adam = Adam::default();
    let mut best = evaluate(&model, pairs, &val, cfg.batch)?;
    let mut best_store = model.store.clone();
    let mut since_best = 0;
    let (mut epochs, mut steps) = (0, 0);
    let mut order = train.clone();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch) {
            let f: Vec<&Volume> = chunk.iter().map(|&i| &pairs[i].0).collect();
            let m: Vec<&Volume> = chunk.iter().map(|&i| &pairs[i].1).collect();
            let mut g = Graph::<f32>::new();
            let (fv, mv, flow) = model.forward_pair(&mut g, &f, &m)?;
            let (loss, _, _) = dir_loss_graph(&mut g, fv, mv, flow, grid.spacing_mm, cfg.lambda, None)?;
            if !(g.value(loss).item() as f64).is_finite() {
                return Err(Error::Diverged { iterations: steps });
            }
            let grads = g.backward(loss)?.params(&model.store);
            adam.step(&mut model.store, &grads, cfg.lr);
            steps += 1;
        }
        epochs += 1;
        let now = evaluate(&model, pairs, &val, cfg.batch)?;
        if now.0 < best.0 {
            best = now;
            best_store = model.store.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    model.store = best_store;
    Ok((
        model,
        RegistrationReport {
            final_loss: best.0,
            ncc: best.1,
            deformed_fraction: Some(best.2),
            iterations: steps,
            epochs: Some(epochs),
            wall_time_s: start.elapsed().as_secs_f64(),
            ..RegistrationReport::default()
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Anatomy;

    fn small() -> UNetConfig {
        UNetConfig {
            encoder_channels: vec![4, 8],
            decoder_channels: vec![8, 8, 4, 4],
        }
    }

    fn phantom(seed: u64, n: usize) -> Volume {
        let g = Grid::cube(n, 128.0 / n as f64).unwrap();
        let a = Anatomy::random(&g, &mut rng::rng(seed));
        Volume::from_fn(g.clone(), |x, y, z| a.intensity(g.voxel_to_world([x as f64, y as f64, z as f64])) as f32).unwrap()
    }

    #[test]
    fn default_layout_matches_configuration() {
        let c = UNetConfig::default();
        let mut s = ParamStore::<f32>::new();
        let net = UNet::new(&mut s, &c, &mut rng::rng(0)).unwrap();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 16, 16, 16]));
        let y = net.forward(&mut g, &s, x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 16, 16, 16]);
        let outs: Vec<usize> = s.params().iter().filter(|p| p.name.ends_with(".weight")).map(|p| p.value.shape()[0]).collect();
        assert_eq!(outs, [16, 32, 32, 32, 32, 32, 32, 32, 32, 16, 16, 3]);
        let bad = g.constant(Tensor::zeros(vec![1, 2, 12, 16, 16]));
        assert!(net.forward(&mut g, &s, bad).is_err());
    }

    #[test]
    fn untrained_model_predicts_near_zero_and_is_deterministic() {
        let m = DirModel::new(&small(), Stage::Anatomy, 0.5, 3).unwrap();
        let v = phantom(1, 16);
        let a = predict_dvf(&m, &v, &v).unwrap();
        let b = predict_dvf(&m, &v, &v).unwrap();
        assert_eq!(a, b);
        assert!(a.max_norm() < 1e-2);
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let m = DirModel::new(&small(), Stage::Modality, 1.0, 8).unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p).unwrap();
        let back = DirModel::load(&p).unwrap();
        assert_eq!(back.stage, Stage::Modality);
        let v = phantom(2, 16);
        assert_eq!(predict_dvf(&m, &v, &v).unwrap(), predict_dvf(&back, &v, &v).unwrap());
    }

    #[test]
    fn split_has_no_empty_part() {
        let [a, b, c] = split_indices(20, [0.7, 0.15, 0.15], &mut rng::rng(0)).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (14, 3, 3));
        let mut all: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
        all.sort();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert!(split_indices(2, [0.7, 0.15, 0.15], &mut rng::rng(0)).is_err());
    }

    #[test]
    fn identity_task_training() {
        let pairs: Vec<(Volume, Volume)> = (0..6).map(|s| {
            let v = phantom(s, 16);
            (v.clone(), v)
        }).collect();
        let mut cfg = DirTrainConfig::new(Stage::Anatomy);
        cfg.unet = small();
        cfg.epochs = 3;
        cfg.lr = 1e-3;
        let (model, rep) = train_dir(&pairs, &cfg).unwrap();
        assert!(rep.ncc >= 0.999, "{rep:?}");
        let u = predict_dvf(&model, &pairs[0].0, &pairs[0].1).unwrap();
        assert!(u.mean_norm(None) < 0.1);
        let mut wrong = pairs.clone();
        wrong[0].0 = phantom(0, 32);
        assert!(train_dir(&wrong, &cfg).is_err());
    }
}
