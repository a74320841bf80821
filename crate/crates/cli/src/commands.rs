use std::path::{Path, PathBuf};

use defotox::checks::full_suite;
use defotox::cohort::{read_manifest, synth_cohort, synth_phantom, write_landmarks};
use defotox::evalx::{
    ablation_study, cohort_images, load_images, risk_evolution, sample_from_images, standard_combos, write_ablation_csv,
    write_evolution_csv, FeatureOptions, PatientImages, StudyConfig,
};
use defotox::field::{apply_rigid, jacobian_determinant, jacobian_field, deformed_fraction, DEFORMED_EPS};
use defotox::regnet::{rigid_register, train_dir, two_stage_apply, DirModel, DirTrainConfig, DirectEngine, DvfEngine, Stage};
use defotox::sim::ncc;
use defotox::toxnet::{train_classifier, write_history_csv, Sample};
use defotox::volio::{adaptive_mask, crop_centered, normalize_intensity, read_volume, resample_isotropic, write_volume, Volume};
use defotox::{DisplacementField, Error};
use serde::Serialize;
use serde_json::json;

use super::config::RunConfig;
use super::{CliResult, Cmd, Failure};

/// Gradient checks above this relative error fail the run.
const GRADCHECK_TOL: f64 = 1e-4;

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> CliResult<()> {
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| Failure::new("serialize", e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e).into())
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a PathBuf> {
    v.as_ref().ok_or_else(|| Failure::new("usage", format!("--{flag} is required")))
}

pub fn dispatch(cmd: &Cmd, cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    match cmd {
        Cmd::Phantom(_) => phantom(cfg, dir),
        Cmd::Cohort(_) => cohort(cfg, dir),
        Cmd::Preprocess(_) => preprocess(cfg, dir),
        Cmd::RegRigid(_) => reg_rigid(cfg, dir),
        Cmd::RegTrain(_) => reg_train(cfg, dir),
        Cmd::RegApply(_) => reg_apply(cfg, dir),
        Cmd::Jacobian(_) => jacobian(cfg, dir),
        Cmd::ToxTrain(_) => tox_train(cfg, dir),
        Cmd::Ablate(_) => ablate(cfg, dir),
        Cmd::Evolve(_) => evolve(cfg, dir),
        Cmd::Gradcheck => gradcheck(cfg, dir),
    }
}

fn phantom(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let ph = synth_phantom(cfg.seed, cfg.deformation_mm, [cfg.grid; 3])?;
    write_volume(&ph.pct, dir.join("pct.v3j"))?;
    let mut scans = Vec::new();
    for s in &ph.scans {
        write_volume(&s.cbct, dir.join(format!("cbct_{:02}.v3j", s.t)))?;
        write_volume(s.gt_dvf.volume(), dir.join(format!("gt_dvf_{:02}.v3j", s.t)))?;
        write_volume(s.total_dvf().volume(), dir.join(format!("total_dvf_{:02}.v3j", s.t)))?;
        write_landmarks(&dir.join(format!("landmarks_{:02}.csv", s.t)), &s.landmarks)?;
        scans.push(json!({ "t": s.t, "setup": s.setup, "gt_max_mm": s.gt_dvf.max_norm() }));
    }
    write_json(
        &dir.join("phantom.json"),
        &json!({
            "seed": cfg.seed,
            "deformation_mm": cfg.deformation_mm,
            "dims": ph.pct.dims(),
            "spacing_mm": ph.pct.spacing(),
            "scans": scans,
        }),
    )
}

fn cohort(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let c = synth_cohort(cfg.seed, &cfg.cohort_config())?;
    c.write(dir)?;
    let labels = c.labels();
    write_json(&dir.join("oracle.json"), &c.oracle)?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "n": labels.len(),
            "positives": labels.iter().filter(|&&y| y).count(),
            "bayes_bacc": c.oracle.bayes_bacc(),
            "target": c.config.effect.target,
        }),
    )
}

fn preprocess(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let mut v = read_volume(require(&cfg.input, "input")?)?;
    if let Some(s) = cfg.spacing_mm {
        v = resample_isotropic(&v, s)?;
    }
    v = normalize_intensity(&v)?;
    if let Some(size) = cfg.crop {
        let center = v.grid().center_voxel();
        v = crop_centered(&v, center, size)?;
    }
    let mask = adaptive_mask(&v)?;
    write_volume(&v, dir.join("preprocessed.v3j"))?;
    write_volume(&mask.to_volume(), dir.join("mask.v3j"))?;
    write_json(
        &dir.join("summary.json"),
        &json!({ "dims": v.dims(), "spacing_mm": v.spacing(), "mask_voxels": mask.count() }),
    )
}

fn reg_rigid(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let fixed = normalize_intensity(&read_volume(require(&cfg.fixed, "fixed")?)?)?;
    let moving = normalize_intensity(&read_volume(require(&cfg.moving, "moving")?)?)?;
    let (t, report) = rigid_register(&fixed, &moving, cfg.rigid_levels)?;
    write_volume(&apply_rigid(&moving, &t)?, dir.join("aligned.v3j"))?;
    write_json(&dir.join("rigid.json"), &json!({ "transform": t, "report": report }))
}

/// Rigidly aligns `moving` onto `fixed`.
fn aligned(fixed: &Volume, moving: &Volume, levels: usize) -> CliResult<Volume> {
    let (t, _) = rigid_register(fixed, moving, levels)?;
    Ok(apply_rigid(moving, &t)?)
}

fn reg_train(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let root = require(&cfg.cohort, "cohort")?;
    let records = read_manifest(&root.join("manifest.json"))?;
    let mut pairs = Vec::new();
    for r in &records {
        let first = r
            .cbcts
            .first()
            .ok_or_else(|| Failure::new("invalid_argument", format!("patient {} has no scans", r.id)))?;
        let cbct0 = normalize_intensity(&read_volume(root.join(&first.cbct))?)?;
        match cfg.stage {
            Stage::Modality => {
                let pct = normalize_intensity(&read_volume(root.join(&r.pct))?)?;
                let moving = aligned(&cbct0, &pct, cfg.rigid_levels)?;
                pairs.push((cbct0, moving));
            }
            Stage::Anatomy => {
                for f in &r.cbcts[1..] {
                    let cbct_t = normalize_intensity(&read_volume(root.join(&f.cbct))?)?;
                    let moving = aligned(&cbct_t, &cbct0, cfg.rigid_levels)?;
                    pairs.push((cbct_t, moving));
                }
            }
        }
    }
    log::info!("training the {} model on {} pairs", cfg.stage.name(), pairs.len());
    let tc = DirTrainConfig {
        lambda: cfg.lambda(cfg.stage),
        epochs: cfg.dir.epochs,
        batch: cfg.dir.batch,
        lr: cfg.dir.lr,
        patience: cfg.dir.patience,
        seed: cfg.seed,
        unet: cfg.dir.unet.clone(),
        ..DirTrainConfig::new(cfg.stage)
    };
    let (model, report) = train_dir(&pairs, &tc)?;
    model.save(&dir.join("model.ckpt"))?;
    write_json(&dir.join("report.json"), &report)
}

fn engine(path: &Option<PathBuf>, stage: Stage, cfg: &RunConfig) -> CliResult<Box<dyn DvfEngine>> {
    Ok(match path {
        Some(p) => {
            let m = DirModel::load(p)?;
            stage.expect(m.stage)?;
            Box::new(m)
        }
        None => Box::new(DirectEngine {
            lambda: cfg.lambda(stage),
            ..DirectEngine::new(stage)
        }),
    })
}

fn reg_apply(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let pct = normalize_intensity(&read_volume(require(&cfg.pct, "pct")?)?)?;
    let cbct = normalize_intensity(&read_volume(require(&cfg.cbct, "cbct")?)?)?;
    let a = engine(&cfg.model_a, Stage::Modality, cfg)?;
    let b = engine(&cfg.model_b, Stage::Anatomy, cfg)?;
    let (rigid, rigid_report) = rigid_register(&cbct, &pct, cfg.rigid_levels)?;
    let out = two_stage_apply(a.as_ref(), b.as_ref(), &pct, &cbct, &rigid)?;
    let final_ct = defotox::field::warp(&apply_rigid(&pct, &rigid)?, &out.composed)?;
    write_volume(&out.aligned_ct, dir.join("aligned_ct.v3j"))?;
    write_volume(&final_ct, dir.join("registered_ct.v3j"))?;
    write_volume(out.u_modality.volume(), dir.join("u_modality.v3j"))?;
    write_volume(out.u_anatomy.volume(), dir.join("u_anatomy.v3j"))?;
    write_volume(out.composed.volume(), dir.join("composed_dvf.v3j"))?;
    write_volume(out.jf.volume(), dir.join("jf.v3j"))?;
    write_json(
        &dir.join("report.json"),
        &json!({
            "rigid": rigid,
            "rigid_report": rigid_report,
            "ncc_rigid": ncc(&cbct, &apply_rigid(&pct, &rigid)?, None)?,
            "ncc_final": ncc(&cbct, &final_ct, None)?,
            "deformed_fraction": out.deformed_fraction,
        }),
    )
}

fn jacobian(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let u = DisplacementField::new(read_volume(require(&cfg.dvf, "dvf")?)?)?;
    let jf = jacobian_field(&u)?;
    let det = jacobian_determinant(&jf);
    let (lo, hi) = det.min_max();
    let mean = det.data().iter().map(|&v| v as f64).sum::<f64>() / det.data().len() as f64;
    write_volume(jf.volume(), dir.join("jf.v3j"))?;
    write_volume(&det, dir.join("det.v3j"))?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "deformed_fraction": deformed_fraction(&jf, DEFORMED_EPS)?,
            "det_min": lo,
            "det_max": hi,
            "det_mean": mean,
        }),
    )
}

/// Patient images at fraction `t`, from the cohort directory or from the
/// synthetic cohort described by the configuration.
struct Source {
    dir: Option<PathBuf>,
    records: Vec<defotox::cohort::PatientRecord>,
    synthetic: Option<defotox::cohort::SynthCohort>,
    target: defotox::cohort::Toxicity,
}

impl Source {
    fn new(cfg: &RunConfig, fractions: &[u32]) -> CliResult<Self> {
        match &cfg.cohort {
            Some(d) => Ok(Self {
                records: read_manifest(&d.join("manifest.json"))?,
                dir: Some(d.clone()),
                synthetic: None,
                target: cfg.synthetic.effect.target,
            }),
            None => {
                let mut cc = cfg.cohort_config();
                for &t in fractions {
                    if !cc.fractions.contains(&t) {
                        cc.fractions.push(t);
                    }
                }
                cc.fractions.sort_unstable();
                log::info!("synthesizing a {}-patient cohort at {:?}", cc.n, cc.dims);
                let c = synth_cohort(cfg.seed, &cc)?;
                Ok(Self {
                    dir: None,
                    records: Vec::new(),
                    target: c.config.effect.target,
                    synthetic: Some(c),
                })
            }
        }
    }

    fn images(&self, t: u32) -> CliResult<Vec<PatientImages>> {
        Ok(match (&self.dir, &self.synthetic) {
            (Some(d), _) => load_images(d, &self.records, self.target, t)?,
            (None, Some(c)) => cohort_images(c, t)?,
            _ => unreachable!("source without data"),
        })
    }

    fn samples(&self, t: u32, opts: &FeatureOptions) -> CliResult<Vec<Sample>> {
        log::info!("building classifier inputs at fraction {t}");
        Ok(self
            .images(t)?
            .iter()
            .map(|i| sample_from_images(i, opts))
            .collect::<defotox::Result<Vec<_>>>()?)
    }
}

fn feature_options(cfg: &RunConfig) -> FeatureOptions {
    FeatureOptions {
        include_cbct: cfg.branches.iter().any(|b| b == "cbct"),
        ..cfg.features.clone()
    }
}

fn study_config(cfg: &RunConfig) -> StudyConfig {
    StudyConfig {
        folds: cfg.folds,
        seed: cfg.seed,
        train: cfg.classifier.clone(),
    }
}

fn tox_train(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let fusion = cfg.fusion_config()?;
    let src = Source::new(cfg, &[cfg.fraction])?;
    let samples = src.samples(cfg.fraction, &feature_options(cfg))?;
    let tc = defotox::toxnet::ClassifierTrainConfig {
        seed: cfg.seed,
        ..cfg.classifier.clone()
    };
    let (model, history) = train_classifier(&fusion, &samples, &tc)?;
    model.save(&dir.join("model.ckpt"))?;
    write_history_csv(&dir.join("history.csv"), &history)?;
    write_json(
        &dir.join("summary.json"),
        &json!({
            "branches": fusion.branch_names(),
            "parameters": model.num_parameters(),
            "patients": samples.len(),
            "fraction": cfg.fraction,
            "last": history.last(),
        }),
    )
}

fn ablate(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let opts = feature_options(cfg);
    let src = Source::new(cfg, &[cfg.fraction])?;
    let samples = src.samples(cfg.fraction, &opts)?;
    let combos = standard_combos(&cfg.image_branch(1), opts.jf_channels, opts.include_cbct);
    let table = ablation_study(&samples, &combos, cfg.fraction, &study_config(cfg))?;
    for r in &table.rows {
        log::info!("{}: bAcc {:.3} ± {:.3}", r.name, r.report.bacc.mean, r.report.bacc.std);
    }
    write_ablation_csv(&dir.join("ablation.csv"), &table)?;
    write_json(&dir.join("ablation.json"), &table)
}

fn evolve(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let opts = feature_options(cfg);
    let model = cfg.fusion_config()?;
    let src = Source::new(cfg, &cfg.fractions)?;
    let table = risk_evolution(
        &cfg.fractions,
        |t| src.samples(t, &opts).map_err(|f| Error::InvalidArgument(f.message)),
        &model,
        &study_config(cfg),
    )?;
    for r in &table.rows {
        log::info!("t = {}: bAcc {:.3} ± {:.3}", r.t, r.bacc.mean, r.bacc.std);
    }
    log::info!("slope {:.4}, r² {:.3}, correlated: {}", table.fit.slope, table.fit.r2, table.correlated);
    write_evolution_csv(&dir.join("evolution.csv"), &table)?;
    write_json(&dir.join("evolution.json"), &table)
}

fn gradcheck(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    let entries = full_suite(cfg.seed)?;
    let mut w = csv::Writer::from_path(dir.join("gradcheck.csv")).map_err(|e| Failure::new("csv", e.to_string()))?;
    w.write_record(["check", "max_rel_err", "checked", "pass"]).map_err(|e| Failure::new("csv", e.to_string()))?;
    println!("{:<32} {:>12} {:>8}", "check", "max rel err", "checked");
    for e in &entries {
        let pass = e.max_rel_err < GRADCHECK_TOL;
        println!("{:<32} {:>12.3e} {:>8} {}", e.name, e.max_rel_err, e.checked, if pass { "ok" } else { "FAIL" });
        w.write_record([e.name.clone(), format!("{:e}", e.max_rel_err), e.checked.to_string(), pass.to_string()])
            .map_err(|e| Failure::new("csv", e.to_string()))?;
    }
    w.flush().map_err(|e| Failure::new("csv", e.to_string()))?;
    write_json(&dir.join("gradcheck.json"), &entries)?;
    let failed: Vec<&str> = entries.iter().filter(|e| !(e.max_rel_err < GRADCHECK_TOL)).map(|e| e.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::new("gradcheck", format!("relative error ≥ {GRADCHECK_TOL:e} in {}", failed.join(", "))))
    }
}
