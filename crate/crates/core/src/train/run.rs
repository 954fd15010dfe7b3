use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::{load_dataset, Augment, Batches, Dataset, DatasetSource, Normalization, Split};
use super::optim::{cosine_lr, OptimState};
use crate::autograd::Graph;
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 500;

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

pub struct TrainOutcome {
    pub final_model: Model<f32>,
    /// Weights of the epoch with the best test accuracy (the initial model
    /// when no epoch ran).
    pub best_model: Model<f32>,
    pub best_epoch: usize,
    pub best_test_acc: Option<f64>,
    pub metrics: Vec<EpochMetrics>,
    pub normalization: Normalization,
}

/// Train and test splits after applying the configured item limits.
pub fn load_splits(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let src = |split| DatasetSource {
        kind: cfg.dataset.kind,
        path: cfg.dataset.path.clone(),
        split,
        augment: cfg.dataset.augment,
    };
    let mut train = load_dataset(&src(Split::Train))?;
    let mut test = load_dataset(&src(Split::Test))?;
    if let Some(n) = cfg.dataset.train_limit {
        train.truncate(n);
    }
    if let Some(n) = cfg.dataset.test_limit {
        test.truncate(n);
    }
    train.check_labels(cfg.model.classes)?;
    test.check_labels(cfg.model.classes)?;
    Ok((train, test))
}

pub fn train(cfg: &RunConfig, on_epoch: &mut dyn FnMut(&EpochMetrics)) -> Result<TrainOutcome> {
    let (train_set, test_set) = load_splits(cfg)?;
    train_on(cfg, &train_set, &test_set, on_epoch)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Count of rows of `logits` whose argmax equals the label.
pub fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count()
}

/// Top-1 accuracy of an eval-mode forward function over a dataset.
pub fn evaluate_with(
    ds: &Dataset,
    norm: &Normalization,
    mut forward: impl FnMut(Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let mut correct = 0;
    for (x, labels) in Batches::new(ds, norm, EVAL_BATCH, Augment::default(), None) {
        correct += count_correct(&forward(x)?, &labels);
    }
    Ok(correct as f64 / ds.len() as f64)
}

pub fn evaluate(model: &Model<f32>, ds: &Dataset, norm: &Normalization) -> Result<f64> {
    evaluate_with(ds, norm, |x| model.predict(x))
}

fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if metrics.is_empty() {
        w.write_record(["epoch", "lr", "train_loss", "train_acc", "test_acc"])?;
    }
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Train from a fresh random init on already loaded splits.
pub fn train_on(
    cfg: &RunConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    if train_set.shape != cfg.model.architecture.input_shape() {
        return Err(Error::shape(
            "train",
            format!("dataset images {:?} do not fit {}", train_set.shape, cfg.model.architecture.id()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::<f32>::new(cfg.model.clone(), &mut rng)?;
    let normalization = Normalization::from_dataset(train_set);
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut opt = OptimState::new(cfg.weight_decay);
    let mut metrics = Vec::new();
    let mut best_model = model.clone();
    let (mut best_epoch, mut best_test_acc) = (0, None::<f64>);

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.epochs);
        let shuffle_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64 + 1);
        let batches = Batches::new(train_set, &normalization, cfg.batch, cfg.dataset.augment, Some(shuffle_seed));
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for (step, (x, labels)) in batches.enumerate() {
            let diverged = |loss: f64| Error::Diverged {
                epoch: epoch + 1,
                step,
                loss,
            };
            let mut g = Graph::new();
            let fp = match model.forward(&mut g, x, true) {
                Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
                r => r?,
            };
            let loss = match g.softmax_cross_entropy(fp.logits, &labels) {
                Err(Error::NonFinite(_)) => return Err(diverged(f64::NAN)),
                r => r?,
            };
            let loss_value = g.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(diverged(loss_value));
            }
            correct += count_correct(g.value(fp.logits), &labels);
            let mut grads = g.backward(loss)?;
            let grads: Vec<Tensor<f32>> = fp
                .params
                .iter()
                .map(|&v| grads.take(v).expect("every parameter has a gradient"))
                .collect();
            match opt.step_model(&mut model, &grads, lr) {
                Err(Error::NonFinite(_)) => return Err(diverged(loss_value)),
                r => r?,
            }
            loss_sum += loss_value * labels.len() as f64;
            seen += labels.len();
        }
        let test_acc = match evaluate(&model, test_set, &normalization) {
            Err(Error::NonFinite(_)) => {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    step: seen.div_ceil(cfg.batch),
                    loss: f64::NAN,
                })
            }
            r => r?,
        };
        let row = EpochMetrics {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            train_acc: correct as f64 / seen.max(1) as f64,
            test_acc,
        };
        on_epoch(&row);
        metrics.push(row);
        let improved = best_test_acc.is_none_or(|b| test_acc > b);
        if improved {
            best_model = model.clone();
            best_epoch = epoch + 1;
            best_test_acc = Some(test_acc);
        }
        if let Some(dir) = &cfg.out_dir {
            write_metrics(&dir.join("metrics.csv"), &metrics)?;
            let meta = |e, acc| CheckpointMeta {
                model: cfg.model.clone(),
                normalization: normalization.clone(),
                epoch: e,
                test_acc: acc,
                seed: cfg.seed,
            };
            save_checkpoint(&dir.join("last.sttk"), &meta(epoch + 1, Some(test_acc)), &model)?;
            if improved {
                save_checkpoint(&dir.join("best.sttk"), &meta(epoch + 1, Some(test_acc)), &model)?;
            }
        }
    }
    if let (Some(dir), true) = (&cfg.out_dir, metrics.is_empty()) {
        write_metrics(&dir.join("metrics.csv"), &metrics)?;
    }
    Ok(TrainOutcome {
        final_model: model,
        best_model,
        best_epoch,
        best_test_acc,
        metrics,
        normalization,
    })
}
