//! Evaluation: metrics, cross-validation folds, landmark error, and the
//! ablation and risk-evolution studies.

mod metrics;
mod studies;

pub use metrics::{
    confusion_metrics, fold_hash, kfold_split, linear_fit_r2, tre, FoldMetrics, LinearFit, MeanStd, MetricsReport,
};
pub use studies::{
    ablation_study, cohort_images, cohort_samples, load_images, sample_from_images, PatientImages, cross_validate, risk_evolution, standard_combos, write_ablation_csv,
    write_evolution_csv, AblationRow, AblationTable, Combo, EvolutionRow, EvolutionTable, FeatureOptions, JfChannels,
    JfSource, StudyConfig, CORRELATION_R2,
};
