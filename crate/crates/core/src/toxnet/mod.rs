//! Toxicity classifier: 3D ResNet image branches and a clinical MLP fused
//! by one softmax decision layer.

mod fusion;
mod resnet;
mod train;

pub use fusion::{
    batch_inputs, build_model, forward, BranchInputs, ClinicalBranchConfig, ClinicalMlp, FusionConfig, FusionModel,
    FusionNet, Sample,
};
pub use resnet::{ResNet, ResNetBranchConfig, ResNetVariant};
pub use train::{class_weights, probabilities, train_classifier, write_history_csv, ClassifierTrainConfig, HistoryRow};
