//! Cross-validated ablation and risk-evolution studies.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{confusion_metrics, fold_hash, kfold_split, linear_fit_r2, LinearFit, MeanStd, MetricsReport};
use crate::cohort::{encode_clinical, PatientRecord, SynthCohort, Toxicity};
use crate::error::{Error, Result};
use crate::field::{jacobian_determinant, jacobian_field, DisplacementField, JacobianField};
use crate::regnet::{rigid_register, two_stage_apply, DirectEngine, Stage};
use crate::rng;
use crate::toxnet::{train_classifier, ClassifierTrainConfig, ClinicalBranchConfig, FusionConfig, ResNetBranchConfig, Sample};
use crate::volio::{adaptive_mask, normalize_intensity, read_volume, Volume};

/// r² threshold above which a fitted trend counts as a correlation.
pub const CORRELATION_R2: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JfChannels {
    /// All nine Jacobian entries.
    Full,
    /// The determinant only.
    Determinant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JfSource {
    /// Jacobian of the generator's field.
    GroundTruth,
    /// Jacobian of the two-stage registration with the direct-field engine.
    Registered,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureOptions {
    pub jf_channels: JfChannels,
    pub source: JfSource,
    pub include_cbct: bool,
    pub mask: bool,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self {
            jf_channels: JfChannels::Full,
            source: JfSource::GroundTruth,
            include_cbct: false,
            mask: true,
        }
    }
}

impl JfChannels {
    pub fn count(self) -> usize {
        match self {
            JfChannels::Full => 9,
            JfChannels::Determinant => 1,
        }
    }
}

/// The classifier sees 𝕁_f as its deviation from the identity (`J − I` or
/// `det J − 1`), so masked-out voxels read as undeformed.
fn jf_volume(jf: &JacobianField, channels: JfChannels) -> Result<Volume> {
    let v = match channels {
        JfChannels::Full => jf.volume().clone(),
        JfChannels::Determinant => jacobian_determinant(jf),
    };
    let n = v.grid().len();
    let diagonal = |c: usize| match channels {
        JfChannels::Full => c % 4 == 0,
        JfChannels::Determinant => true,
    };
    let data = v
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| if diagonal(i / n) { x - 1.0 } else { x })
        .collect();
    v.with_data(data)
}

/// Everything the classifier inputs of one patient at one fraction are
/// derived from.
#[derive(Clone, Debug)]
pub struct PatientImages {
    pub id: String,
    pub pct: Volume,
    pub cbct: Volume,
    pub gt_dvf: Option<DisplacementField>,
    pub clinical: Vec<f32>,
    pub label: bool,
}

/// Builds one sample: normalized CBCT, 𝕁_f from the chosen source and a
/// CBCT-derived adaptive mask.
pub fn sample_from_images(img: &PatientImages, opts: &FeatureOptions) -> Result<Sample> {
    let cbct = normalize_intensity(&img.cbct)?;
    let jf = match opts.source {
        JfSource::GroundTruth => {
            let u = img
                .gt_dvf
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument(format!("patient {} has no ground-truth field", img.id)))?;
            jacobian_field(u)?
        }
        JfSource::Registered => {
            let pct = normalize_intensity(&img.pct)?;
            let (rigid, _) = rigid_register(&cbct, &pct, 4)?;
            let out = two_stage_apply(
                &DirectEngine::new(Stage::Modality),
                &DirectEngine::new(Stage::Anatomy),
                &pct,
                &cbct,
                &rigid,
            )?;
            out.jf
        }
    };
    Ok(Sample {
        mask: if opts.mask { Some(adaptive_mask(&cbct)?) } else { None },
        cbct: opts.include_cbct.then_some(cbct),
        jf: Some(jf_volume(&jf, opts.jf_channels)?),
        clinical: Some(img.clinical.clone()),
        label: img.label,
    })
}

/// Renders every patient of a synthetic cohort at fraction `t`.
pub fn cohort_images(cohort: &SynthCohort, t: u32) -> Result<Vec<PatientImages>> {
    let target = cohort.config.effect.target;
    cohort
        .patients
        .iter()
        .map(|p| {
            let scan = p.scan(t)?;
            Ok(PatientImages {
                id: p.record.id.clone(),
                pct: p.pct()?,
                cbct: scan.cbct,
                gt_dvf: Some(scan.gt_dvf),
                clinical: encode_clinical(&p.record)?,
                label: target.get(&p.record.labels),
            })
        })
        .collect()
}

/// Reads every patient of a manifest at fraction `t`; paths are relative to
/// `root`.
pub fn load_images(root: &Path, records: &[PatientRecord], target: Toxicity, t: u32) -> Result<Vec<PatientImages>> {
    records
        .iter()
        .map(|r| {
            let f = r
                .cbcts
                .iter()
                .find(|f| f.t == t)
                .ok_or_else(|| Error::InvalidArgument(format!("patient {} has no scan at fraction {t}", r.id)))?;
            let gt_dvf = f
                .gt_dvf
                .as_ref()
                .map(|g| read_volume(root.join(g)).and_then(DisplacementField::new))
                .transpose()?;
            Ok(PatientImages {
                id: r.id.clone(),
                pct: read_volume(root.join(&r.pct))?,
                cbct: read_volume(root.join(&f.cbct))?,
                gt_dvf,
                clinical: encode_clinical(r)?,
                label: target.get(&r.labels),
            })
        })
        .collect()
}

/// Classifier inputs of every patient of a synthetic cohort at fraction `t`.
pub fn cohort_samples(cohort: &SynthCohort, t: u32, opts: &FeatureOptions) -> Result<Vec<Sample>> {
    cohort_images(cohort, t)?.iter().map(|i| sample_from_images(i, opts)).collect()
}

/// A named set of classifier branches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Combo {
    pub name: String,
    pub config: FusionConfig,
}

/// Clinical, 𝕁_f and 𝕁_f + clinical; with `cbct`, also the CBCT rows.
pub fn standard_combos(image: &ResNetBranchConfig, jf_channels: JfChannels, cbct: bool) -> Vec<Combo> {
    let jf_in = match jf_channels {
        JfChannels::Full => 9,
        JfChannels::Determinant => 1,
    };
    let img = |c: usize| ResNetBranchConfig { in_channels: c, ..image.clone() };
    let mk = |name: &str, cb: bool, jf: bool, cl: bool| Combo {
        name: name.into(),
        config: FusionConfig {
            cbct: cb.then(|| img(1)),
            jf: jf.then(|| img(jf_in)),
            clinical: cl.then(ClinicalBranchConfig::default),
        },
    };
    let mut v = vec![mk("clinical", false, false, true), mk("jf", false, true, false), mk("jf+clinical", false, true, true)];
    if cbct {
        v.push(mk("cbct+clinical", true, false, true));
        v.push(mk("cbct+jf+clinical", true, true, true));
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub folds: usize,
    pub seed: u64,
    pub train: ClassifierTrainConfig,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            seed: 0,
            train: ClassifierTrainConfig::default(),
        }
    }
}

/// Trains on all folds but one and tests on the held-out fold, for every
/// fold. Fold `k` trains with a seed derived from `(seed, k)`.
pub fn cross_validate(config: &FusionConfig, samples: &[Sample], folds: &[Vec<usize>], cfg: &StudyConfig) -> Result<MetricsReport> {
    let mut out = Vec::with_capacity(folds.len());
    for (k, test) in folds.iter().enumerate() {
        let mut held = vec![false; samples.len()];
        for &i in test {
            held[i] = true;
        }
        let train: Vec<Sample> = samples.iter().zip(&held).filter(|(_, &h)| !h).map(|(s, _)| s.clone()).collect();
        let tc = ClassifierTrainConfig {
            seed: rng::derive(cfg.seed, k as u64),
            ..cfg.train.clone()
        };
        let (model, _) = train_classifier(config, &train, &tc)?;
        let refs: Vec<&Sample> = test.iter().map(|&i| &samples[i]).collect();
        let probs = model.predict_proba(&refs)?;
        let preds: Vec<bool> = probs.iter().map(|p| p[1] > p[0]).collect();
        let labels: Vec<bool> = refs.iter().map(|s| s.label).collect();
        out.push(confusion_metrics(&preds, &labels)?);
    }
    Ok(MetricsReport::from_folds(out))
}

fn study_folds(samples: &[Sample], cfg: &StudyConfig) -> Result<Vec<Vec<usize>>> {
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
        return Err(Error::SingleClass);
    }
    kfold_split(samples.len(), cfg.folds, cfg.seed, Some(&labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub branches: Vec<String>,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub fraction: u32,
    pub fold_hash: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Cross-validates every combination on the same folds.
pub fn ablation_study(samples: &[Sample], combos: &[Combo], fraction: u32, cfg: &StudyConfig) -> Result<AblationTable> {
    let folds = study_folds(samples, cfg)?;
    let rows = combos
        .iter()
        .map(|c| {
            Ok(AblationRow {
                name: c.name.clone(),
                branches: c.config.branch_names().into_iter().map(String::from).collect(),
                report: cross_validate(&c.config, samples, &folds, cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        fraction,
        fold_hash: fold_hash(&folds),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionRow {
    pub t: u32,
    pub bacc: MeanStd,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionTable {
    pub fold_hash: String,
    pub rows: Vec<EvolutionRow>,
    pub fit: LinearFit,
    /// `fit.r2 ≥ 0.9`.
    pub correlated: bool,
}

/// One model per fraction on that fraction's inputs, plus the clinical-only
/// model as the fraction-0 row; mean bAcc is fitted linearly against t over
/// all rows.
pub fn risk_evolution(
    fractions: &[u32],
    mut samples_at: impl FnMut(u32) -> Result<Vec<Sample>>,
    model: &FusionConfig,
    cfg: &StudyConfig,
) -> Result<EvolutionTable> {
    if fractions.is_empty() || fractions.contains(&0) {
        return Err(Error::InvalidArgument("fractions must be non-empty and start after 0".into()));
    }
    let first = samples_at(fractions[0])?;
    let folds = study_folds(&first, cfg)?;
    let clinical = FusionConfig {
        cbct: None,
        jf: None,
        clinical: Some(model.clinical.clone().unwrap_or_default()),
    };
    let base = cross_validate(&clinical, &first, &folds, cfg)?;
    let mut rows = vec![EvolutionRow { t: 0, bacc: base.bacc, report: base }];
    for (i, &t) in fractions.iter().enumerate() {
        let samples = if i == 0 { first.clone() } else { samples_at(t)? };
        if samples.len() != first.len() || samples.iter().zip(&first).any(|(a, b)| a.label != b.label) {
            return Err(Error::InvalidArgument(format!("fraction {t} changes the cohort")));
        }
        let report = cross_validate(model, &samples, &folds, cfg)?;
        rows.push(EvolutionRow { t, bacc: report.bacc, report });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.t as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.bacc.mean).collect();
    let fit = linear_fit_r2(&xs, &ys)?;
    Ok(EvolutionTable {
        fold_hash: fold_hash(&folds),
        rows,
        correlated: fit.r2 >= CORRELATION_R2,
        fit,
    })
}

pub fn write_ablation_csv(path: &Path, table: &AblationTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    w.write_record(["combination", "bAcc_mean", "bAcc_std", "sens_mean", "sens_std", "spec_mean", "spec_std", "fold_hash"])
        .map_err(csv_err)?;
    for r in &table.rows {
        let m = &r.report;
        w.write_record([
            r.name.clone(),
            m.bacc.mean.to_string(),
            m.bacc.std.to_string(),
            m.sensitivity.mean.to_string(),
            m.sensitivity.std.to_string(),
            m.specificity.mean.to_string(),
            m.specificity.std.to_string(),
            table.fold_hash.clone(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_evolution_csv(path: &Path, table: &EvolutionTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    let csv_err = |e: csv::Error| Error::Csv(e.to_string());
    w.write_record(["t", "bAcc_mean", "bAcc_std"]).map_err(csv_err)?;
    for r in &table.rows {
        w.write_record([r.t.to_string(), r.bacc.mean.to_string(), r.bacc.std.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toxnet::ResNetVariant;

    fn clinical_samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| Sample {
                clinical: Some((0..35).map(|j| ((i * 7 + j * 3) % 11) as f32 / 11.0).collect()),
                label: i % 3 == 0,
                ..Sample::default()
            })
            .collect()
    }

    fn quick() -> StudyConfig {
        StudyConfig {
            train: ClassifierTrainConfig { epochs: 2, ..ClassifierTrainConfig::default() },
            ..StudyConfig::default()
        }
    }

    #[test]
    fn combos_cover_branch_sets() {
        let img = ResNetBranchConfig { variant: ResNetVariant::R34, in_channels: 1, base_width: 2 };
        let c = standard_combos(&img, JfChannels::Full, true);
        let names: Vec<&str> = c.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names, ["clinical", "jf", "jf+clinical", "cbct+clinical", "cbct+jf+clinical"]);
        assert_eq!(c[1].config.jf.as_ref().unwrap().in_channels, 9);
    }

    #[test]
    fn ablation_rows_share_folds() {
        let s = clinical_samples(25);
        let combos = vec![
            Combo { name: "a".into(), config: FusionConfig { cbct: None, jf: None, clinical: Some(ClinicalBranchConfig::default()) } },
            Combo { name: "b".into(), config: FusionConfig { cbct: None, jf: None, clinical: Some(ClinicalBranchConfig { widths: [8, 8, 8], ..ClinicalBranchConfig::default() }) } },
        ];
        let t = ablation_study(&s, &combos, 10, &quick()).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert!(t.rows.iter().all(|r| r.report.folds.len() == 5));
        let again = ablation_study(&s, &combos, 10, &quick()).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn evolution_zero_row_is_the_clinical_baseline() {
        let s = clinical_samples(25);
        let model = FusionConfig { cbct: None, jf: None, clinical: Some(ClinicalBranchConfig::default()) };
        let e = risk_evolution(&[5, 10], |_| Ok(s.clone()), &model, &quick()).unwrap();
        assert_eq!(e.rows.iter().map(|r| r.t).collect::<Vec<_>>(), [0, 5, 10]);
        let folds = study_folds(&s, &quick()).unwrap();
        let base = cross_validate(&model, &s, &folds, &quick()).unwrap();
        assert_eq!(e.rows[0].report, base);
        assert!((0.0..=1.0).contains(&e.fit.r2));
    }
}
