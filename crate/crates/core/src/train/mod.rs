//! Joint classification and triplet training.

mod checkpoint;
mod config;
mod dataset;
mod loss;
mod optim;
mod trainer;

pub use checkpoint::{Checkpoint, TensorEntry, FORMAT_VERSION, MANIFEST_FILE, PARAMS_FILE};
pub use config::{LossMode, TrainConfig, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use dataset::{
    crop_or_pad, feature_path, make_batch, pk_sample, read_manifest, write_manifest,
    LabeledDataset, ManifestEntry, Recording, Split,
};
pub use loss::{total_loss, LossParts};
pub use optim::Adam;
pub use trainer::{log_csv, train, validation_map, EpochMetrics, TrainOutcome, LOG_HEADER};
