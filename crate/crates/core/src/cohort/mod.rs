//! Clinical records, their fixed-width encoding, the cohort manifest, and
//! synthetic phantoms/cohorts with known ground truth.

mod phantom;
mod synth;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use phantom::{
    synth_phantom, synth_phantom_with, Anatomy, Bump, Deformation, FractionScan, Landmark, Phantom, PhantomConfig,
    RadialBump, Structure,
};
pub use synth::{
    synth_cohort, CohortConfig, Effect, EffectGrowth, LabelOracle, SynthCohort, SynthPatient, Toxicity,
};

pub const SEXES: [&str; 2] = ["M", "F"];
pub const LOCATIONS: [&str; 6] = [
    "oropharynx",
    "larynx",
    "nasopharynx",
    "hypopharynx",
    "oral cavity",
    "unknown primary",
];
pub const SMOKER: [&str; 3] = ["never", "former", "current"];
pub const ALCOHOL: [&str; 2] = ["no", "yes"];
pub const T_STAGES: [&str; 5] = ["T1", "T2", "T3", "T4", "Tx"];
pub const N_STAGES: [&str; 5] = ["N0", "N1", "N2", "N3", "Nx"];
pub const M_STAGES: [&str; 3] = ["M0", "M1", "Mx"];
pub const P16: [&str; 3] = ["pos", "neg", "unknown"];

/// Width of [`encode_clinical`] output.
pub const CLINICAL_WIDTH: usize = 35;

/// Highest fraction index of a treatment course.
pub const MAX_FRACTION: u32 = 35;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToxicityLabels {
    pub ng_tube: bool,
    pub hospitalization: bool,
    pub radionecrosis: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FractionRef {
    pub t: u32,
    pub cbct: String,
    /// Ground-truth displacement field, present for synthetic patients.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_dvf: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub age_years: f64,
    pub sex: String,
    pub kps: f64,
    pub tumor_location: String,
    pub smoker: String,
    pub alcohol: String,
    pub t_stage: String,
    pub n_stage: String,
    pub m_stage: String,
    pub p16: String,
    pub surgery: bool,
    pub chemo: bool,
    pub feeding_tube_at_onset: bool,
    pub labels: ToxicityLabels,
    pub pct: String,
    pub cbcts: Vec<FractionRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<String>,
}

fn one_hot(field: &'static str, value: &str, cats: &[&str], out: &mut Vec<f32>) -> Result<()> {
    let k = cats.iter().position(|c| *c == value).ok_or_else(|| Error::UnknownCategory {
        field,
        value: value.to_string(),
    })?;
    out.extend((0..cats.len()).map(|i| if i == k { 1.0 } else { 0.0 }));
    Ok(())
}

fn flag(v: bool, out: &mut Vec<f32>) {
    out.extend(if v { [0.0, 1.0] } else { [1.0, 0.0] });
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        encode_clinical(self)?;
        let mut prev = 0;
        for f in &self.cbcts {
            if f.t <= prev || f.t > MAX_FRACTION {
                return Err(Error::InvalidMetadata(format!(
                    "patient {}: fraction indices must increase within 1..={MAX_FRACTION}",
                    self.id
                )));
            }
            prev = f.t;
        }
        Ok(())
    }
}

/// Fixed-width clinical vector: age/100, sex (M, F), KPS/100, location (6),
/// smoker (3), alcohol (2), T (5), N (5), M (3), p16 (3), surgery (no, yes),
/// chemotherapy (no, yes).
pub fn encode_clinical(rec: &PatientRecord) -> Result<Vec<f32>> {
    for (name, v) in [("age_years", rec.age_years), ("kps", rec.kps)] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::InvalidArgument(format!("{name} {v} outside [0, 100]")));
        }
    }
    let mut out = Vec::with_capacity(CLINICAL_WIDTH);
    out.push((rec.age_years / 100.0) as f32);
    one_hot("sex", &rec.sex, &SEXES, &mut out)?;
    out.push((rec.kps / 100.0) as f32);
    one_hot("tumor_location", &rec.tumor_location, &LOCATIONS, &mut out)?;
    one_hot("smoker", &rec.smoker, &SMOKER, &mut out)?;
    one_hot("alcohol", &rec.alcohol, &ALCOHOL, &mut out)?;
    one_hot("t_stage", &rec.t_stage, &T_STAGES, &mut out)?;
    one_hot("n_stage", &rec.n_stage, &N_STAGES, &mut out)?;
    one_hot("m_stage", &rec.m_stage, &M_STAGES, &mut out)?;
    one_hot("p16", &rec.p16, &P16, &mut out)?;
    flag(rec.surgery, &mut out);
    flag(rec.chemo, &mut out);
    debug_assert_eq!(out.len(), CLINICAL_WIDTH);
    Ok(out)
}

/// Drops patients who needed a feeding tube at the start of treatment.
pub fn exclusion_filter(records: Vec<PatientRecord>) -> Vec<PatientRecord> {
    records.into_iter().filter(|r| !r.feeding_tube_at_onset).collect()
}

pub fn write_manifest(path: &Path, records: &[PatientRecord]) -> Result<()> {
    let json = serde_json::to_vec_pretty(records).expect("records serialize");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<PatientRecord>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let recs: Vec<PatientRecord> =
        serde_json::from_slice(&bytes).map_err(|e| Error::InvalidMetadata(format!("{}: {e}", path.display())))?;
    for r in &recs {
        r.validate()?;
    }
    Ok(recs)
}

#[derive(Debug, Serialize, Deserialize)]
struct LandmarkRow {
    id: usize,
    fixed_x: f64,
    fixed_y: f64,
    fixed_z: f64,
    moving_x: f64,
    moving_y: f64,
    moving_z: f64,
    millimeters: bool,
}

pub fn write_landmarks(path: &Path, marks: &[Landmark]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    for m in marks {
        w.serialize(LandmarkRow {
            id: m.id,
            fixed_x: m.fixed_mm[0],
            fixed_y: m.fixed_mm[1],
            fixed_z: m.fixed_mm[2],
            moving_x: m.moving_mm[0],
            moving_y: m.moving_mm[1],
            moving_z: m.moving_mm[2],
            millimeters: true,
        })
        .map_err(|e| Error::Csv(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_landmarks(path: &Path) -> Result<Vec<Landmark>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: LandmarkRow = row.map_err(|e| Error::Csv(e.to_string()))?;
        if !row.millimeters {
            return Err(Error::Csv("landmarks must be given in millimetres".into()));
        }
        out.push(Landmark {
            id: row.id,
            fixed_mm: [row.fixed_x, row.fixed_y, row.fixed_z],
            moving_mm: [row.moving_x, row.moving_y, row.moving_z],
        });
    }
    Ok(out)
}
