//! Confusion-matrix metrics, stratified folds, landmark error and the
//! linear fit used by the evolution study.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cohort::Landmark;
use crate::error::{Error, Result};
use crate::field::DisplacementField;
use crate::rng;

/// Metrics of one evaluation fold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub bacc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(v: &[f64]) -> Self {
        if v.is_empty() {
            return Self::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Fold-wise metrics with their mean ± standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: Vec<FoldMetrics>,
    pub bacc: MeanStd,
    pub sensitivity: MeanStd,
    pub specificity: MeanStd,
}

impl MetricsReport {
    pub fn from_folds(folds: Vec<FoldMetrics>) -> Self {
        let col = |f: fn(&FoldMetrics) -> f64| MeanStd::of(&folds.iter().map(f).collect::<Vec<_>>());
        Self {
            bacc: col(|m| m.bacc),
            sensitivity: col(|m| m.sensitivity),
            specificity: col(|m| m.specificity),
            folds,
        }
    }
}

pub fn confusion_metrics(predictions: &[bool], labels: &[bool]) -> Result<FoldMetrics> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: labels.len(),
            found: predictions.len(),
        });
    }
    let (mut tp, mut fn_, mut tn, mut fp) = (0, 0, 0, 0);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (y, p) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
            (false, true) => fp += 1,
        }
    }
    if tp + fn_ == 0 || tn + fp == 0 {
        return Err(Error::SingleClass);
    }
    let sensitivity = tp as f64 / (tp + fn_) as f64;
    let specificity = tn as f64 / (tn + fp) as f64;
    Ok(FoldMetrics {
        bacc: (sensitivity + specificity) / 2.0,
        sensitivity,
        specificity,
        tp,
        fn_,
        tn,
        fp,
    })
}

/// `k` disjoint folds of positions into `n` items. With labels, each class
/// is shuffled and dealt round-robin, continuing across classes, so fold
/// sizes and per-fold positive counts each differ by at most one.
pub fn kfold_split(n: usize, k: usize, seed: u64, stratify: Option<&[bool]>) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(Error::InvalidArgument(format!("cannot split {n} items into {k} folds")));
    }
    let mut r = rng::child(seed, 0xF01D);
    let groups: Vec<Vec<usize>> = match stratify {
        Some(labels) => {
            if labels.len() != n {
                return Err(Error::LengthMismatch { expected: n, found: labels.len() });
            }
            let mut groups = Vec::new();
            for class in [true, false] {
                let members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
                if members.len() < k {
                    return Err(Error::StratifyTooSmall {
                        class: class as u8,
                        count: members.len(),
                        folds: k,
                    });
                }
                groups.push(members);
            }
            groups
        }
        None => vec![(0..n).collect()],
    };
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for mut g in groups {
        g.shuffle(&mut r);
        for i in g {
            folds[next].push(i);
            next = (next + 1) % k;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// SHA-256 over the fold assignment, for logging that runs share folds.
pub fn fold_hash(folds: &[Vec<usize>]) -> String {
    let mut h = Sha256::new();
    for (i, f) in folds.iter().enumerate() {
        h.update((i as u64).to_le_bytes());
        for &j in f {
            h.update((j as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Target registration error: for each pair, the distance between the
/// fixed landmark mapped through `x + u(x)` and the moving landmark.
/// Returns mean and population standard deviation in mm.
pub fn tre(landmarks: &[Landmark], dvf: &DisplacementField) -> Result<MeanStd> {
    if landmarks.is_empty() {
        return Err(Error::InvalidArgument("tre needs at least one landmark".into()));
    }
    let mut d = Vec::with_capacity(landmarks.len());
    for m in landmarks {
        if !dvf.grid().contains_world(m.fixed_mm) {
            return Err(Error::OutsideGrid(m.fixed_mm));
        }
        let u = dvf.sample_world(m.fixed_mm);
        d.push((0..3).map(|i| (m.fixed_mm[i] + u[i] - m.moving_mm[i]).powi(2)).sum::<f64>().sqrt());
    }
    Ok(MeanStd::of(&d))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least-squares line with `r² = 1 − SS_res/SS_tot`; `r² = 0` when the ys
/// are constant.
pub fn linear_fit_r2(xs: &[f64], ys: &[f64]) -> Result<LinearFit> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch { expected: xs.len(), found: ys.len() });
    }
    if xs.len() < 3 {
        return Err(Error::InvalidArgument("linear fit needs at least 3 points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::InvalidArgument("linear fit needs distinct x values".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 {
        let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        (1.0 - ss_res / syy).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(LinearFit { slope, intercept, r2 })
}
