//! Optimizer, learning-rate schedule, dataset readers, run configuration
//! and the training loop.

mod config;
mod data;
mod optim;
mod run;

pub use config::{DataConfig, RunConfig};
pub use data::{
    load_cifar10, load_dataset, load_mnist, parse_cifar_batch, parse_idx_images,
    parse_idx_labels, Augment, Batches, Dataset, DatasetKind, DatasetSource, Normalization,
    Split,
};
pub use optim::{cosine_lr, OptimState, DEFAULT_LR, DEFAULT_WEIGHT_DECAY};
pub use run::{
    count_correct, evaluate, evaluate_with, load_splits, train, train_on, EpochMetrics,
    TrainOutcome,
};
