//! Desk-scale training: AdamW, a per-epoch cosine schedule and seeded batching.

mod data;
mod optim;

pub use data::{
    cifar_dataset, ingest_cifar_binary, parse_cifar_records, synthetic_dataset, write_cifar_records, CifarRecord,
    Dataset, SyntheticSpec, CIFAR_CLASSES, CIFAR_MEAN, CIFAR_RECORD_BYTES, CIFAR_STD,
};
pub use optim::{adamw_step, cosine_lr, AdamW, AdamWConfig, Moments};

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::param::Graph;
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Cifar { path: PathBuf },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticSpec::default())
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Synthetic(s) => synthetic_dataset(s),
            DatasetSpec::Cifar { path } => ingest_cifar_binary(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub dataset: DatasetSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr_initial: 2e-3,
            lr_min: 1e-5,
            weight_decay: 0.05,
            seed: 0,
            dataset: DatasetSpec::default(),
        }
    }
}

impl TrainConfig {
    /// Zero rates are accepted so a frozen run can be expressed.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.lr_min >= 0.0 && self.lr_initial >= self.lr_min && self.lr_initial.is_finite()) {
            return Err(Error::config(format!(
                "learning rates must satisfy 0 <= min ({}) <= initial ({})",
                self.lr_min, self.lr_initial
            )));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be non-negative"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        cosine_lr(self.lr_initial, self.lr_min, epoch, self.epochs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct History {
    pub records: Vec<EpochMetrics>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,loss,accuracy\n");
        for r in &self.records {
            writeln!(s, "{},{},{:.9},{:.6}", r.epoch, r.split, r.loss, r.accuracy).expect("write to string");
        }
        s
    }

    pub fn split(&self, split: &str) -> impl Iterator<Item = &EpochMetrics> {
        let split = split.to_string();
        self.records.iter().filter(move |r| r.split == split)
    }
}

fn check_compatible<T: Real>(model: &Model<T>, data: &Dataset) -> Result<()> {
    let cfg = model.config();
    if data.side != cfg.image_side || data.channels != cfg.in_channels || data.classes > cfg.num_classes {
        return Err(Error::Dataset(format!(
            "dataset of {}x{}x{} images with {} classes does not fit a model taking {}x{}x{} images with {} classes",
            data.side,
            data.side,
            data.channels,
            data.classes,
            cfg.image_side,
            cfg.image_side,
            cfg.in_channels,
            cfg.num_classes
        )));
    }
    if data.is_empty() {
        return Err(Error::Dataset("dataset is empty".into()));
    }
    Ok(())
}

fn argmax_hits<T: Real>(logits: &[T], classes: usize, labels: &[usize]) -> usize {
    logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, row[0]), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            best == l
        })
        .count()
}

/// Mean loss and accuracy without updating parameters.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    check_compatible(model, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let (mut loss, mut hits) = (0.0, 0);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch::<T>(chunk);
        let mut g = Graph::new(model.store(), false);
        let xv = g.input(x);
        let logits = model.forward(&mut g, xv)?;
        let l = g.tape.cross_entropy(logits, &labels)?;
        loss += g.value(l).data()[0].to_f64().unwrap_or(f64::NAN) * chunk.len() as f64;
        hits += argmax_hits(g.value(logits).data(), model.config().num_classes, &labels);
    }
    Ok((loss / data.len() as f64, hits as f64 / data.len() as f64))
}

/// One optimizer step on a batch; returns the batch loss and correct count.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    opt: &mut AdamW<T>,
    data: &Dataset,
    indices: &[usize],
    lr: f64,
) -> Result<(f64, usize)> {
    let (x, labels) = data.batch::<T>(indices);
    let (loss, hits, grads) = {
        let mut g = Graph::new(model.store(), true);
        let xv = g.input(x);
        let logits = model.forward(&mut g, xv)?;
        let l = g.tape.cross_entropy(logits, &labels)?;
        g.backward(l)?;
        let loss = g.value(l).data()[0].to_f64().unwrap_or(f64::NAN);
        let hits = argmax_hits(g.value(logits).data(), model.config().num_classes, &labels);
        (loss, hits, g.param_grads())
    };
    opt.step(model.store_mut(), &grads, lr)?;
    Ok((loss, hits))
}

/// Trains in place. Each epoch records running `train` metrics and, when
/// `eval` is given, an `eval` row measured after the epoch.
pub fn train_loop<T: Real>(
    model: &mut Model<T>,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    check_compatible(model, train)?;
    if let Some(e) = eval {
        check_compatible(model, e)?;
    }
    let mut opt = AdamW::new(
        model.store(),
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss, mut hits) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let (l, h) = train_step(model, &mut opt, train, chunk, lr)?;
            loss += l * chunk.len() as f64;
            hits += h;
        }
        history.records.push(EpochMetrics {
            epoch,
            split: "train".into(),
            loss: loss / train.len() as f64,
            accuracy: hits as f64 / train.len() as f64,
        });
        if let Some(e) = eval {
            let (l, a) = evaluate(model, e, cfg.batch_size)?;
            history.records.push(EpochMetrics {
                epoch,
                split: "eval".into(),
                loss: l,
                accuracy: a,
            });
        }
    }
    Ok(history)
}
