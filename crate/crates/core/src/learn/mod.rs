//! Synthetic data, training loops and test-time adaptation.

pub mod augment;
pub mod optim;
pub mod synth;
pub mod train;
pub mod tta;

pub use optim::{cosine_schedule, OptKind, OptState};
pub use synth::{synth_dataset, SynthSample, N_SHAPE_CLASSES};
pub use train::{
    accuracy, embeddings, info_nce, linear_probe, make_views, train_contrastive, train_supervised, Example, LogRow,
    TrainConfig, TrainLog,
};
pub use tta::{changed_params, prototypes, tta_step, TtaRecord, NORM_PARAM_PATTERN};
