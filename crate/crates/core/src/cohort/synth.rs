//! Synthetic cohorts whose target toxicity is driven by regional volume
//! change in the ground-truth deformation.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::phantom::{self, Anatomy, Deformation, FractionScan, Landmark, RadialBump};
use super::{FractionRef, PatientRecord, ToxicityLabels, MAX_FRACTION};
use crate::error::{Error, Result};
use crate::field::{jacobian_determinant, jacobian_field, DisplacementField, RigidTransform};
use crate::rng::{self, Rng};
use crate::volio::{write_volume, Grid, MaskVolume, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Toxicity {
    NgTube,
    Hospitalization,
    Radionecrosis,
}

impl Toxicity {
    pub fn get(self, l: &ToxicityLabels) -> bool {
        match self {
            Toxicity::NgTube => l.ng_tube,
            Toxicity::Hospitalization => l.hospitalization,
            Toxicity::Radionecrosis => l.radionecrosis,
        }
    }

    fn set(self, l: &mut ToxicityLabels, v: bool) {
        match self {
            Toxicity::NgTube => l.ng_tube = v,
            Toxicity::Hospitalization => l.hospitalization = v,
            Toxicity::Radionecrosis => l.radionecrosis = v,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ng_tube" => Ok(Toxicity::NgTube),
            "hospitalization" => Ok(Toxicity::Hospitalization),
            "radionecrosis" => Ok(Toxicity::Radionecrosis),
            _ => Err(Error::UnknownCategory { field: "toxicity", value: s.into() }),
        }
    }
}

/// How the label-driving deformation develops over the course.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectGrowth {
    /// Scales with t/35: early scans carry little signal.
    Linear,
    /// Fully present from the first fraction on.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Effect {
    pub target: Toxicity,
    /// Structure name whose volume change drives the label.
    pub region: String,
    pub strength: f64,
    pub base_rate: f64,
    pub growth: EffectGrowth,
    /// Largest radial amplitude; a local volume change of `(1+a)³ − 1`.
    pub max_volume_change: f64,
    /// Standard deviation of a per-scan radial change at the region, relative
    /// to `max_volume_change`. It does not enter the label.
    pub fluctuation: f64,
}

impl Default for Effect {
    fn default() -> Self {
        Self {
            target: Toxicity::NgTube,
            region: "constrictor".into(),
            strength: 3.0,
            base_rate: 0.3,
            growth: EffectGrowth::Linear,
            max_volume_change: 0.25,
            fluctuation: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n: usize,
    pub dims: [usize; 3],
    pub spacing_mm: f64,
    pub fractions: Vec<u32>,
    pub effect: Effect,
    /// Peak of the label-independent trend at the last fraction.
    pub nuisance_mm: f64,
    /// Peak of the per-scan random deformation.
    pub jitter_mm: f64,
    pub setup_translation_mm: [f64; 2],
    pub setup_rotation_deg: f64,
    pub noise_sigma: f64,
    pub blur_sigma_vox: f64,
    pub n_landmarks: usize,
    /// Base rate of the two non-target toxicities.
    pub other_rate: f64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self::new(40, [32; 3])
    }
}

impl CohortConfig {
    pub fn new(n: usize, dims: [usize; 3]) -> Self {
        let p = phantom::PhantomConfig::for_dims(dims);
        Self {
            n,
            dims,
            spacing_mm: p.spacing_mm,
            fractions: vec![1, 5, 10, 15, 20, 25, 30],
            effect: Effect::default(),
            nuisance_mm: 3.0,
            jitter_mm: 0.5,
            setup_translation_mm: p.setup_translation_mm,
            setup_rotation_deg: p.setup_rotation_deg,
            noise_sigma: p.noise_sigma,
            blur_sigma_vox: p.blur_sigma_vox,
            n_landmarks: p.n_landmarks,
            other_rate: 0.2,
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dims, [self.spacing_mm; 3], [0.0; 3])
    }

    fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::InvalidArgument(format!("cohort size {} < 10", self.n)));
        }
        let e = &self.effect;
        if !(e.base_rate > 0.0 && e.base_rate < 1.0) || !(0.0..1.0).contains(&self.other_rate) {
            return Err(Error::InvalidArgument("rates must lie in (0, 1)".into()));
        }
        if !e.strength.is_finite()
            || e.strength < 0.0
            || !(e.max_volume_change > -1.0 && e.max_volume_change < 1.0)
            || !(e.fluctuation >= 0.0 && e.fluctuation.is_finite())
        {
            return Err(Error::InvalidArgument("effect strength or amplitude out of range".into()));
        }
        let mut prev = 0;
        for &t in &self.fractions {
            if t <= prev || t > MAX_FRACTION {
                return Err(Error::InvalidArgument(format!("fractions must increase within 1..={MAX_FRACTION}")));
            }
            prev = t;
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// The generator's label model: `P(y=1) = sigmoid(strength·z + bias)` with
/// `z` the cohort z-score of regional volume change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelOracle {
    pub strength: f64,
    pub bias: f64,
    pub z: Vec<f64>,
    pub probs: Vec<f64>,
}

impl LabelOracle {
    /// Solves the bias so the mean probability equals `base_rate`.
    pub fn fit(volume_change: &[f64], strength: f64, base_rate: f64) -> Result<Self> {
        let n = volume_change.len() as f64;
        let mean = volume_change.iter().sum::<f64>() / n;
        let var = volume_change.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        let z: Vec<f64> = if sd > 0.0 {
            volume_change.iter().map(|v| (v - mean) / sd).collect()
        } else {
            vec![0.0; volume_change.len()]
        };
        let mean_p = |b: f64| z.iter().map(|&zi| sigmoid(strength * zi + b)).sum::<f64>() / n;
        let (mut lo, mut hi) = (-60.0, 60.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mean_p(mid) < base_rate {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let bias = 0.5 * (lo + hi);
        let probs = z.iter().map(|&zi| sigmoid(strength * zi + bias)).collect();
        Ok(Self { strength, bias, z, probs })
    }

    /// Expected balanced accuracy of the best rule given the true
    /// probabilities: positive iff `p` exceeds the mean probability.
    pub fn bayes_bacc(&self) -> f64 {
        let pi = self.probs.iter().sum::<f64>() / self.probs.len() as f64;
        let (mut tp, mut pos, mut tn, mut neg) = (0.0, 0.0, 0.0, 0.0);
        for &p in &self.probs {
            pos += p;
            neg += 1.0 - p;
            if p > pi {
                tp += p;
            } else {
                tn += 1.0 - p;
            }
        }
        0.5 * (tp / pos + tn / neg)
    }
}

/// One synthetic patient. Images are rendered on demand from the stored
/// analytic description.
#[derive(Clone, Debug)]
pub struct SynthPatient {
    pub record: PatientRecord,
    pub anatomy: Anatomy,
    pub grid: Grid,
    /// Label-driving radial change at the last fraction.
    pub effect: Deformation,
    pub nuisance: Deformation,
    pub growth: EffectGrowth,
    /// Per-fraction random deformation and patient setup.
    pub jitter: Vec<(u32, Deformation, RigidTransform)>,
    pub landmarks_moving: Vec<[f64; 3]>,
    /// Mean of `det J − 1` inside the region at the last fraction.
    pub volume_change: f64,
    /// Latent effect size in [−1, 1].
    pub latent: f64,
    seed: u64,
    noise_sigma: f64,
    blur_sigma_vox: f64,
}

impl SynthPatient {
    /// Ground-truth deformation underlying scan `t`.
    pub fn deformation(&self, t: u32) -> Result<Deformation> {
        let (_, jitter, _) = self
            .jitter
            .iter()
            .find(|(f, _, _)| *f == t)
            .ok_or_else(|| Error::InvalidArgument(format!("patient {} has no scan at fraction {t}", self.record.id)))?;
        let k = t as f64 / MAX_FRACTION as f64;
        let effect = match self.growth {
            EffectGrowth::Linear => self.effect.scaled(k),
            EffectGrowth::Constant => self.effect.clone(),
        };
        Ok(effect.plus(&self.nuisance.scaled(k)).plus(jitter))
    }

    pub fn gt_dvf(&self, t: u32) -> Result<DisplacementField> {
        Ok(self.deformation(t)?.sample(&self.grid))
    }

    pub fn pct(&self) -> Result<Volume> {
        phantom::render_pct(&self.anatomy, &self.grid, &mut rng::child(self.seed, 2))
    }

    pub fn body_mask(&self) -> Result<MaskVolume> {
        let head = self.anatomy.structure("head").expect("head structure");
        let g = &self.grid;
        let data = (0..g.len())
            .map(|i| {
                let [x, y, z] = g.coords(i);
                head.contains(g.voxel_to_world([x as f64, y as f64, z as f64])) as u8
            })
            .collect();
        MaskVolume::new(g.clone(), data)
    }

    pub fn scan(&self, t: u32) -> Result<FractionScan> {
        let deformation = self.deformation(t)?;
        let (_, _, setup) = self.jitter.iter().find(|(f, _, _)| *f == t).expect("checked above");
        let mut r = rng::child(self.seed, 100 + t as u64);
        let cbct = phantom::render_cbct(
            &self.anatomy,
            &self.grid,
            &deformation,
            setup,
            self.noise_sigma,
            self.blur_sigma_vox,
            &mut r,
        )?;
        let landmarks = self
            .landmarks_moving
            .iter()
            .enumerate()
            .map(|(id, &m)| Landmark {
                id,
                fixed_mm: phantom::fixed_point(m, &deformation, setup),
                moving_mm: m,
            })
            .collect();
        Ok(FractionScan {
            t,
            cbct,
            gt_dvf: deformation.sample(&self.grid),
            setup: setup.clone(),
            landmarks,
        })
    }
}

#[derive(Clone, Debug)]
pub struct SynthCohort {
    pub config: CohortConfig,
    pub patients: Vec<SynthPatient>,
    pub oracle: LabelOracle,
}

impl SynthCohort {
    pub fn records(&self) -> Vec<PatientRecord> {
        self.patients.iter().map(|p| p.record.clone()).collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        let t = self.config.effect.target;
        self.patients.iter().map(|p| t.get(&p.record.labels)).collect()
    }

    /// Writes volumes, ground-truth fields, landmarks and `manifest.json`
    /// under `dir`, with paths in the manifest relative to it.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut records = Vec::with_capacity(self.patients.len());
        for p in &self.patients {
            let id = &p.record.id;
            let pdir = dir.join(id);
            std::fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
            write_volume(&p.pct()?, pdir.join("pct.v3j"))?;
            let mut marks = None;
            for r in &p.record.cbcts {
                let scan = p.scan(r.t)?;
                write_volume(&scan.cbct, dir.join(&r.cbct))?;
                if let Some(g) = &r.gt_dvf {
                    write_volume(scan.gt_dvf.volume(), dir.join(g))?;
                }
                if r.t == *self.config.fractions.last().expect("fractions") {
                    marks = Some(scan.landmarks);
                }
            }
            let mut rec = p.record.clone();
            if let Some(m) = marks {
                let name = format!("{id}/landmarks.csv");
                super::write_landmarks(&dir.join(&name), &m)?;
                rec.landmarks = Some(name);
            }
            records.push(rec);
        }
        super::write_manifest(&dir.join("manifest.json"), &records)
    }
}

fn random_record(id: String, fractions: &[u32], r: &mut Rng) -> PatientRecord {
    let pick = |cats: &[&str], r: &mut Rng| cats.choose(r).expect("non-empty").to_string();
    PatientRecord {
        age_years: r.random_range(40.0f64..85.0).round(),
        sex: pick(&super::SEXES, r),
        kps: [60.0, 70.0, 80.0, 90.0, 100.0][r.random_range(0..5)],
        tumor_location: pick(&super::LOCATIONS, r),
        smoker: pick(&super::SMOKER, r),
        alcohol: pick(&super::ALCOHOL, r),
        t_stage: pick(&super::T_STAGES, r),
        n_stage: pick(&super::N_STAGES, r),
        m_stage: pick(&super::M_STAGES, r),
        p16: pick(&super::P16, r),
        surgery: r.random_bool(0.3),
        chemo: r.random_bool(0.7),
        feeding_tube_at_onset: false,
        labels: ToxicityLabels::default(),
        pct: format!("{id}/pct.v3j"),
        cbcts: fractions
            .iter()
            .map(|&t| FractionRef {
                t,
                cbct: format!("{id}/cbct_{t:02}.v3j"),
                gt_dvf: Some(format!("{id}/gt_dvf_{t:02}.v3j")),
            })
            .collect(),
        landmarks: None,
        id,
    }
}

fn regional_change(d: &Deformation, grid: &Grid, region: &phantom::Structure) -> Result<f64> {
    let det = jacobian_determinant(&jacobian_field(&d.sample(grid))?);
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, &v) in det.data().iter().enumerate() {
        let [x, y, z] = grid.coords(i);
        if region.contains(grid.voxel_to_world([x as f64, y as f64, z as f64])) {
            sum += v as f64 - 1.0;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument(format!("region {} covers no voxel", region.name)));
    }
    Ok(sum / count as f64)
}

/// Generates `cfg.n` patients. The target label depends only on regional
/// volume change; clinical covariates and the other toxicities are drawn
/// independently of it.
pub fn synth_cohort(seed: u64, cfg: &CohortConfig) -> Result<SynthCohort> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let mut patients = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let pseed = rng::derive(seed, i as u64);
        let anatomy = Anatomy::random(&grid, &mut rng::child(pseed, 1));
        let region = anatomy
            .structure(&cfg.effect.region)
            .ok_or_else(|| Error::UnknownCategory { field: "region", value: cfg.effect.region.clone() })?
            .clone();
        let mut r = rng::child(pseed, 3);
        let latent = r.random_range(-1.0f64..=1.0);
        let sigma = 0.8 * region.semi_mm.iter().sum::<f64>() / 3.0;
        let effect = Deformation {
            bumps: Vec::new(),
            radial: vec![RadialBump {
                center_mm: region.center_mm,
                sigma_mm: sigma,
                amplitude: cfg.effect.max_volume_change * latent,
            }],
        };
        let nuisance = phantom::random_bumps(&anatomy, &grid, 2, [0.25, 0.4], cfg.nuisance_mm, &mut r);
        let jitter = cfg
            .fractions
            .iter()
            .map(|&t| {
                let mut fr = rng::child(pseed, 200 + t as u64);
                let mut d = phantom::random_bumps(&anatomy, &grid, 2, [0.2, 0.35], cfg.jitter_mm, &mut fr);
                let s = phantom::random_setup(&grid, cfg.setup_translation_mm, cfg.setup_rotation_deg, &mut fr);
                let z: f64 = fr.sample(StandardNormal);
                d.radial.push(RadialBump {
                    center_mm: region.center_mm,
                    sigma_mm: sigma,
                    amplitude: cfg.effect.max_volume_change * cfg.effect.fluctuation * z,
                });
                (t, d, s)
            })
            .collect();
        let volume_change = regional_change(&effect.plus(&nuisance), &grid, &region)?;
        let landmarks_moving = phantom::moving_landmarks(&anatomy, &grid, cfg.n_landmarks, &mut rng::child(pseed, 4));
        let record = random_record(format!("p{i:03}"), &cfg.fractions, &mut rng::child(pseed, 5));
        patients.push(SynthPatient {
            record,
            anatomy,
            grid: grid.clone(),
            effect,
            nuisance,
            growth: cfg.effect.growth,
            jitter,
            landmarks_moving,
            volume_change,
            latent,
            seed: pseed,
            noise_sigma: cfg.noise_sigma,
            blur_sigma_vox: cfg.blur_sigma_vox,
        });
    }
    let changes: Vec<f64> = patients.iter().map(|p| p.volume_change).collect();
    let oracle = LabelOracle::fit(&changes, cfg.effect.strength, cfg.effect.base_rate)?;
    let mut lr = rng::child(seed, u64::MAX);
    let others: Vec<Toxicity> = [Toxicity::NgTube, Toxicity::Hospitalization, Toxicity::Radionecrosis]
        .into_iter()
        .filter(|t| *t != cfg.effect.target)
        .collect();
    for (p, &prob) in patients.iter_mut().zip(&oracle.probs) {
        let y = lr.random_bool(prob.clamp(0.0, 1.0));
        cfg.effect.target.set(&mut p.record.labels, y);
        for &o in &others {
            let v = lr.random_bool(cfg.other_rate);
            o.set(&mut p.record.labels, v);
        }
    }
    let positives = patients.iter().filter(|p| cfg.effect.target.get(&p.record.labels)).count();
    if positives == 0 || positives == patients.len() {
        return Err(Error::SingleClass);
    }
    Ok(SynthCohort {
        config: cfg.clone(),
        patients,
        oracle,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, strength: f64) -> CohortConfig {
        let mut c = CohortConfig::new(n, [16, 16, 16]);
        c.effect.strength = strength;
        c.fractions = vec![5, 35];
        c
    }

    #[test]
    fn null_effect_gives_prior_bias() {
        let changes: Vec<f64> = (0..50).map(|i| (i as f64).sin()).collect();
        let o = LabelOracle::fit(&changes, 0.0, 0.3).unwrap();
        assert!((o.bias - (0.3f64 / 0.7).ln()).abs() < 1e-9);
        assert!((o.bayes_bacc() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn strong_effect_is_nearly_deterministic() {
        let changes: Vec<f64> = (0..200).map(|i| (i as f64 * 0.7).sin()).collect();
        let o = LabelOracle::fit(&changes, 50.0, 0.3).unwrap();
        let mean = o.probs.iter().sum::<f64>() / 200.0;
        assert!((mean - 0.3).abs() < 1e-9);
        assert!(o.bayes_bacc() > 0.97);
        let weak = LabelOracle::fit(&changes, 1.0, 0.3).unwrap();
        assert!(weak.bayes_bacc() < o.bayes_bacc());
    }

    #[test]
    fn prevalence_matches_base_rate() {
        let mut pos = 0usize;
        let mut total = 0usize;
        for seed in 0..4 {
            let c = synth_cohort(seed, &small(60, 2.0)).unwrap();
            pos += c.labels().iter().filter(|&&y| y).count();
            total += c.patients.len();
        }
        let p = pos as f64 / total as f64;
        let se = (0.3f64 * 0.7 / total as f64).sqrt();
        assert!((p - 0.3).abs() < 3.0 * se, "prevalence {p}");
    }

    #[test]
    fn labels_follow_volume_change() {
        let c = synth_cohort(7, &small(40, 20.0)).unwrap();
        let labels = c.labels();
        let mean = |y: bool| {
            let v: Vec<f64> = c.patients.iter().zip(&labels).filter(|(_, &l)| l == y).map(|(p, _)| p.volume_change).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(true) > mean(false));
        assert!(c.oracle.bayes_bacc() > 0.9);
    }

    #[test]
    fn deterministic_and_lazy_scans_agree() {
        let a = synth_cohort(3, &small(10, 1.0)).unwrap();
        let b = synth_cohort(3, &small(10, 1.0)).unwrap();
        assert_eq!(a.records(), b.records());
        let sa = a.patients[0].scan(35).unwrap();
        let sb = b.patients[0].scan(35).unwrap();
        assert_eq!(sa.cbct, sb.cbct);
        assert_eq!(sa.gt_dvf, a.patients[0].gt_dvf(35).unwrap());
        assert!(a.patients[0].scan(6).is_err());
    }

    #[test]
    fn tiny_cohort_is_rejected() {
        assert!(matches!(synth_cohort(0, &small(5, 1.0)), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn write_produces_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let c = synth_cohort(1, &small(10, 1.0)).unwrap();
        c.write(dir.path()).unwrap();
        let recs = super::super::read_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(recs.len(), 10);
        let v = crate::volio::read_volume(dir.path().join(&recs[0].cbcts[0].cbct)).unwrap();
        assert_eq!(v.dims(), [16, 16, 16]);
        assert!(recs[0].landmarks.is_some());
    }
}
