use std::path::{Path, PathBuf};

use defotox::cohort::{CohortConfig, EffectGrowth, Toxicity};
use defotox::evalx::FeatureOptions;
use defotox::regnet::{Stage, UNetConfig};
use defotox::toxnet::{ClassifierTrainConfig, ClinicalBranchConfig, FusionConfig, ResNetBranchConfig, ResNetVariant};
use defotox::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "DEFOTOX_OUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub patience: usize,
    pub unet: UNetConfig,
}

impl Default for DirSection {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 7,
            lr: 1e-4,
            patience: 10,
            unet: UNetConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Edge length of the cubic grid of generated volumes.
    pub grid: usize,
    pub threads: usize,
    pub out: Option<PathBuf>,

    pub input: Option<PathBuf>,
    pub fixed: Option<PathBuf>,
    pub moving: Option<PathBuf>,
    pub pct: Option<PathBuf>,
    pub cbct: Option<PathBuf>,
    pub dvf: Option<PathBuf>,
    /// Cohort directory with a `manifest.json`; synthesized when absent.
    pub cohort: Option<PathBuf>,
    pub model_a: Option<PathBuf>,
    pub model_b: Option<PathBuf>,

    pub deformation_mm: f64,
    pub synthetic: CohortConfig,

    pub spacing_mm: Option<f64>,
    pub crop: Option<[usize; 3]>,

    pub stage: Stage,
    pub lambda_modality: f64,
    pub lambda_anatomy: f64,
    pub rigid_levels: usize,
    pub dir: DirSection,

    pub fraction: u32,
    pub fractions: Vec<u32>,
    pub branches: Vec<String>,
    pub resnet: ResNetVariant,
    pub base_width: usize,
    pub features: FeatureOptions,
    pub classifier: ClassifierTrainConfig,
    pub folds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: 32,
            threads: 1,
            out: None,
            input: None,
            fixed: None,
            moving: None,
            pct: None,
            cbct: None,
            dvf: None,
            cohort: None,
            model_a: None,
            model_b: None,
            deformation_mm: 8.0,
            synthetic: CohortConfig::new(40, [32; 3]),
            spacing_mm: None,
            crop: None,
            stage: Stage::Modality,
            lambda_modality: Stage::Modality.default_lambda(),
            lambda_anatomy: Stage::Anatomy.default_lambda(),
            rigid_levels: 4,
            dir: DirSection::default(),
            fraction: 10,
            fractions: vec![5, 10, 15, 20, 25, 30],
            branches: vec!["jf".into(), "clinical".into()],
            resnet: ResNetVariant::R34,
            base_width: 4,
            features: FeatureOptions::default(),
            classifier: ClassifierTrainConfig::default(),
            folds: 5,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))
    }

    pub fn lambda(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Modality => self.lambda_modality,
            Stage::Anatomy => self.lambda_anatomy,
        }
    }

    /// The synthetic cohort settings with the shared grid size applied; a
    /// changed grid keeps the 128 mm field of view.
    pub fn cohort_config(&self) -> CohortConfig {
        let mut c = self.synthetic.clone();
        if c.dims != [self.grid; 3] {
            c.dims = [self.grid; 3];
            c.spacing_mm = 128.0 / self.grid as f64;
        }
        c
    }

    pub fn image_branch(&self, in_channels: usize) -> ResNetBranchConfig {
        ResNetBranchConfig {
            variant: self.resnet,
            in_channels,
            base_width: self.base_width,
        }
    }

    pub fn jf_channels(&self) -> usize {
        self.features.jf_channels.count()
    }

    /// Classifier branches named in `branches`.
    pub fn fusion_config(&self) -> Result<FusionConfig> {
        let mut cfg = FusionConfig {
            cbct: None,
            jf: None,
            clinical: None,
        };
        for b in &self.branches {
            match b.as_str() {
                "cbct" => cfg.cbct = Some(self.image_branch(1)),
                "jf" => cfg.jf = Some(self.image_branch(self.jf_channels())),
                "clinical" => cfg.clinical = Some(ClinicalBranchConfig::default()),
                other => return Err(Error::InvalidArgument(format!("unknown branch {other:?}"))),
            }
        }
        Ok(cfg)
    }
}

pub fn parse_growth(s: &str) -> Result<EffectGrowth> {
    match s {
        "linear" => Ok(EffectGrowth::Linear),
        "constant" => Ok(EffectGrowth::Constant),
        _ => Err(Error::InvalidArgument(format!("growth {s:?}: expected linear or constant"))),
    }
}

pub fn parse_stage(s: &str) -> Result<Stage> {
    match s {
        "modality" => Ok(Stage::Modality),
        "anatomy" => Ok(Stage::Anatomy),
        _ => Err(Error::InvalidArgument(format!("stage {s:?}: expected modality or anatomy"))),
    }
}

pub fn parse_target(s: &str) -> Result<Toxicity> {
    Toxicity::parse(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let c = RunConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 9, "grid": 16}"#).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.folds, 5);
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 9}"#).is_err());
    }

    #[test]
    fn branch_names() {
        let mut c = RunConfig::default();
        c.branches = vec!["clinical".into()];
        assert_eq!(c.fusion_config().unwrap().branch_names(), ["clinical"]);
        c.branches = vec!["ct".into()];
        assert!(c.fusion_config().is_err());
    }
}
