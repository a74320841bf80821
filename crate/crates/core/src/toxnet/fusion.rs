//! Multi-branch classifier: image branches, clinical MLP, concatenation,
//! one fully connected decision layer.

use serde::{Deserialize, Serialize};

use super::resnet::{ResNet, ResNetBranchConfig, ResNetVariant};
use crate::cohort::CLINICAL_WIDTH;
use crate::error::{Error, Result};
use crate::nn::layers::dropout;
use crate::nn::{checkpoint, softmax_rows, BatchNorm, ForwardCtx, Graph, Linear, ParamStore, Tensor, Var};
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::volio::{MaskVolume, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalBranchConfig {
    pub input_dim: usize,
    pub widths: [usize; 3],
    pub dropout: f64,
}

impl Default for ClinicalBranchConfig {
    fn default() -> Self {
        Self {
            input_dim: CLINICAL_WIDTH,
            widths: [64, 128, 256],
            dropout: 0.4,
        }
    }
}

/// Linear → batch norm → ReLU → dropout, three times.
#[derive(Clone, Debug)]
pub struct ClinicalMlp {
    pub config: ClinicalBranchConfig,
    layers: Vec<(Linear, BatchNorm)>,
}

impl ClinicalMlp {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: &ClinicalBranchConfig, rng: &mut Rng) -> Result<Self> {
        if config.input_dim == 0 || config.widths.contains(&0) || !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::InvalidArgument(format!("clinical branch {config:?}")));
        }
        let mut fin = config.input_dim;
        let layers = config
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let l = Linear::new(store, &format!("clinical.fc{i}"), fin, w, rng);
                let bn = BatchNorm::new(store, &format!("clinical.bn{i}"), w);
                fin = w;
                (l, bn)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let mut y = x;
        for (l, bn) in &self.layers {
            let z = l.forward(g, store, y)?;
            let z = bn.forward(g, store, z, ctx)?;
            let z = g.relu(z);
            y = dropout(g, z, self.config.dropout, ctx)?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub cbct: Option<ResNetBranchConfig>,
    pub jf: Option<ResNetBranchConfig>,
    pub clinical: Option<ClinicalBranchConfig>,
}

impl FusionConfig {
    /// Canonical branches: ResNet-50 image branches, 9-channel 𝕁_f input.
    pub fn canonical(cbct: bool, jf: bool, clinical: bool) -> Self {
        Self {
            cbct: cbct.then(|| ResNetBranchConfig::canonical(ResNetVariant::R50, 1)),
            jf: jf.then(|| ResNetBranchConfig::canonical(ResNetVariant::R50, 9)),
            clinical: clinical.then(ClinicalBranchConfig::default),
        }
    }

    /// Input width of the decision layer.
    pub fn decision_width(&self) -> usize {
        self.cbct.as_ref().map_or(0, |c| c.latent_dim())
            + self.jf.as_ref().map_or(0, |c| c.latent_dim())
            + self.clinical.as_ref().map_or(0, |c| c.widths[2])
    }

    pub fn branch_names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.cbct.is_some() {
            v.push("cbct");
        }
        if self.jf.is_some() {
            v.push("jf");
        }
        if self.clinical.is_some() {
            v.push("clinical");
        }
        v
    }
}

/// Batched branch inputs: images `[N, C, D, H, W]`, clinical `[N, F]`.
#[derive(Clone, Debug, Default)]
pub struct BranchInputs<T> {
    pub cbct: Option<Tensor<T>>,
    pub jf: Option<Tensor<T>>,
    pub clinical: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct FusionNet {
    pub config: FusionConfig,
    cbct: Option<ResNet>,
    jf: Option<ResNet>,
    clinical: Option<ClinicalMlp>,
    head: Linear,
}

impl FusionNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: &FusionConfig, rng: &mut Rng) -> Result<Self> {
        if config.cbct.is_none() && config.jf.is_none() && config.clinical.is_none() {
            return Err(Error::InvalidArgument("the classifier needs at least one branch".into()));
        }
        let cbct = config.cbct.as_ref().map(|c| ResNet::new(store, "cbct", c, rng)).transpose()?;
        let jf = config.jf.as_ref().map(|c| ResNet::new(store, "jf", c, rng)).transpose()?;
        let clinical = config.clinical.as_ref().map(|c| ClinicalMlp::new(store, c, rng)).transpose()?;
        let head = Linear::new(store, "decision", config.decision_width(), 2, rng);
        Ok(Self {
            config: config.clone(),
            cbct,
            jf,
            clinical,
            head,
        })
    }

    /// Logits `[N, 2]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: &BranchInputs<T>, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let missing = |b: &str| Error::InvalidArgument(format!("missing input for the {b} branch"));
        let mut latents = Vec::new();
        if let Some(net) = &self.cbct {
            let v = g.constant(x.cbct.clone().ok_or_else(|| missing("cbct"))?);
            latents.push(net.forward(g, store, v, ctx)?);
        }
        if let Some(net) = &self.jf {
            let v = g.constant(x.jf.clone().ok_or_else(|| missing("jf"))?);
            latents.push(net.forward(g, store, v, ctx)?);
        }
        if let Some(net) = &self.clinical {
            let v = g.constant(x.clinical.clone().ok_or_else(|| missing("clinical"))?);
            latents.push(net.forward(g, store, v, ctx)?);
        }
        let fused = if latents.len() == 1 { latents[0] } else { g.concat(&latents)? };
        self.head.forward(g, store, fused)
    }
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub net: FusionNet,
    pub store: ParamStore<f32>,
    pub seed: u64,
}

/// Deterministic initialization from `seed`.
pub fn build_model(config: &FusionConfig, seed: u64) -> Result<FusionModel> {
    let mut store = ParamStore::new();
    let net = FusionNet::new(&mut store, config, &mut rng::child(seed, 0xC1A5))?;
    Ok(FusionModel { net, store, seed })
}

/// One patient's classifier inputs.
#[derive(Clone, Debug, Default)]
pub struct Sample {
    pub cbct: Option<Volume>,
    pub jf: Option<Volume>,
    pub clinical: Option<Vec<f32>>,
    /// Applied to every image input.
    pub mask: Option<MaskVolume>,
    pub label: bool,
}

fn masked(v: &Volume, mask: Option<&MaskVolume>) -> Result<Vec<f32>> {
    match mask {
        Some(m) => Ok(v.masked(m)?.into_data()),
        None => Ok(v.data().to_vec()),
    }
}

fn stack_images(vols: &[&Volume], masks: &[Option<&MaskVolume>]) -> Result<Tensor<f32>> {
    let first = vols[0];
    let [nx, ny, nz] = first.dims();
    let c = first.channels();
    let mut data = Vec::with_capacity(vols.len() * first.data().len());
    for (v, m) in vols.iter().zip(masks) {
        if v.dims() != first.dims() || v.channels() != c {
            return Err(Error::Shape(format!("batch mixes {:?}×{} and {:?}×{}", first.dims(), c, v.dims(), v.channels())));
        }
        data.extend(masked(v, *m)?);
    }
    Tensor::new(vec![vols.len(), c, nz, ny, nx], data)
}

/// Batched inputs for the branches enabled in `config`.
pub fn batch_inputs(config: &FusionConfig, samples: &[&Sample]) -> Result<BranchInputs<f32>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let masks: Vec<Option<&MaskVolume>> = samples.iter().map(|s| s.mask.as_ref()).collect();
    let missing = |b: &str| Error::InvalidArgument(format!("missing input for the {b} branch"));
    let image = |get: fn(&Sample) -> Option<&Volume>, name: &str, want: usize| -> Result<Tensor<f32>> {
        let vols = samples.iter().map(|s| get(s).ok_or_else(|| missing(name))).collect::<Result<Vec<_>>>()?;
        if vols[0].channels() != want {
            return Err(Error::Shape(format!("{name} branch expects {want} channels, got {}", vols[0].channels())));
        }
        stack_images(&vols, &masks)
    };
    let mut out = BranchInputs::default();
    if let Some(c) = &config.cbct {
        out.cbct = Some(image(|s| s.cbct.as_ref(), "cbct", c.in_channels)?);
    }
    if let Some(c) = &config.jf {
        out.jf = Some(image(|s| s.jf.as_ref(), "jf", c.in_channels)?);
    }
    if let Some(c) = &config.clinical {
        let mut data = Vec::with_capacity(samples.len() * c.input_dim);
        for s in samples {
            let v = s.clinical.as_ref().ok_or_else(|| missing("clinical"))?;
            if v.len() != c.input_dim {
                return Err(Error::Shape(format!("clinical vector of {} values, expected {}", v.len(), c.input_dim)));
            }
            data.extend_from_slice(v);
        }
        out.clinical = Some(Tensor::new(vec![samples.len(), c.input_dim], data)?);
    }
    Ok(out)
}

impl FusionModel {
    pub fn config(&self) -> &FusionConfig {
        &self.net.config
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_parameters()
    }

    /// Evaluation-mode class probabilities `[P(no), P(yes)]` per sample.
    pub fn predict_proba(&self, samples: &[&Sample]) -> Result<Vec<[f64; 2]>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(16) {
            let x = batch_inputs(self.config(), chunk)?;
            let mut g = Graph::<f32>::new();
            let mut ctx = ForwardCtx::eval();
            let logits = self.net.forward(&mut g, &self.store, &x, &mut ctx)?;
            let p = softmax_rows(g.value(logits).data(), 2);
            out.extend(p.chunks(2).map(|r| [r[0] as f64, r[1] as f64]));
        }
        Ok(out)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "fusion_model",
            "config": self.net.config,
            "seed": self.seed,
            "decision_width": self.net.config.decision_width(),
        });
        checkpoint::save(path, &self.store, &meta)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (loaded, manifest) = checkpoint::load(path)?;
        let bad = |m: String| Error::Checkpoint(m);
        if manifest.meta.get("kind").and_then(|k| k.as_str()) != Some("fusion_model") {
            return Err(bad("expected a classifier checkpoint".into()));
        }
        let config: FusionConfig = serde_json::from_value(manifest.meta["config"].clone()).map_err(|e| bad(e.to_string()))?;
        let seed = manifest.meta["seed"].as_u64().ok_or_else(|| bad("missing seed".into()))?;
        let mut model = build_model(&config, seed)?;
        checkpoint::restore_into(&mut model.store, &loaded)?;
        Ok(model)
    }
}

/// Single-sample evaluation-mode probabilities.
pub fn forward(
    model: &FusionModel,
    cbct: Option<&Volume>,
    jf: Option<&Volume>,
    clinical: Option<&[f32]>,
    mask: Option<&MaskVolume>,
) -> Result<[f64; 2]> {
    let s = Sample {
        cbct: cbct.cloned(),
        jf: jf.cloned(),
        clinical: clinical.map(|c| c.to_vec()),
        mask: mask.cloned(),
        label: false,
    };
    Ok(model.predict_proba(&[&s])?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volio::Grid;

    fn tiny(cbct: bool, jf: bool, clinical: bool) -> FusionConfig {
        let img = |c| ResNetBranchConfig { variant: ResNetVariant::R34, in_channels: c, base_width: 2 };
        FusionConfig {
            cbct: cbct.then(|| img(1)),
            jf: jf.then(|| img(9)),
            clinical: clinical.then(|| ClinicalBranchConfig { widths: [4, 4, 4], ..ClinicalBranchConfig::default() }),
        }
    }

    #[test]
    fn decision_widths() {
        assert_eq!(FusionConfig::canonical(false, false, true).decision_width(), 256);
        assert_eq!(FusionConfig::canonical(false, true, true).decision_width(), 256 + 2048);
        let all = tiny(true, true, true);
        let no_cbct = tiny(false, true, true);
        assert_eq!(all.decision_width() - no_cbct.decision_width(), 16);
        assert!(build_model(&tiny(false, false, false), 0).is_err());
    }

    #[test]
    fn seeded_initialization() {
        let a = build_model(&tiny(true, false, true), 4).unwrap();
        let b = build_model(&tiny(true, false, true), 4).unwrap();
        assert!(a.store.params().iter().zip(b.store.params()).all(|(x, y)| x.value == y.value));
        assert!(a.num_parameters() > 0);
    }

    #[test]
    fn probabilities_are_valid_and_deterministic() {
        let m = build_model(&tiny(true, true, true), 1).unwrap();
        let g = Grid::cube(8, 4.0).unwrap();
        let cb = Volume::from_fn(g.clone(), |x, y, z| (x + 2 * y + 3 * z) as f32 * 0.05).unwrap();
        let jf = Volume::new(g.clone(), 9, (0..9 * 512).map(|i| (i % 7) as f32 * 0.1).collect()).unwrap();
        let clin = vec![0.5f32; CLINICAL_WIDTH];
        let p = forward(&m, Some(&cb), Some(&jf), Some(&clin), None).unwrap();
        assert!((p[0] + p[1] - 1.0).abs() < 1e-6 && p.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(p, forward(&m, Some(&cb), Some(&jf), Some(&clin), None).unwrap());
        let empty = MaskVolume::new(g.clone(), vec![0; 512]).unwrap();
        let q = forward(&m, Some(&cb), Some(&jf), Some(&clin), Some(&empty)).unwrap();
        assert!((q[0] + q[1] - 1.0).abs() < 1e-6);
        let zero = Volume::zeros(g.clone(), 1).unwrap();
        let zjf = Volume::zeros(g, 9).unwrap();
        assert_eq!(q, forward(&m, Some(&zero), Some(&zjf), Some(&clin), None).unwrap());
        assert!(forward(&m, None, Some(&jf), Some(&clin), None).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = build_model(&tiny(false, false, true), 9).unwrap();
        let p = dir.path().join("tox.ckpt");
        m.save(&p).unwrap();
        let back = FusionModel::load(&p).unwrap();
        let s = Sample { clinical: Some(vec![0.3; CLINICAL_WIDTH]), ..Sample::default() };
        assert_eq!(m.predict_proba(&[&s]).unwrap(), back.predict_proba(&[&s]).unwrap());
    }
}
