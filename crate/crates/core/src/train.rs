//! Mini-batch training with Adam, warmup, gradient accumulation and an
//! optional frozen word encoder.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::AggregatorKind;
use crate::chunker::ChunkedDocument;
use crate::data::Record;
use crate::error::{Error, Result};
use crate::model::{is_word_param, HierModel, ModelConfig, WordPool};
use crate::optim::{Adam, Schedule};
use crate::rng::{stream, substream, Stream};
use crate::tensor::{DType, Element, Tensor};
use crate::transformer::Dropout;

/// Environment variable capping worker threads. Unset means 1.
pub const THREADS_ENV: &str = "CHUNKSTACK_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Every parameter is trained end to end.
    #[serde(rename = "finetune")]
    FineTune,
    /// Word-encoder parameters are frozen and get no gradients.
    #[serde(rename = "frozen")]
    FeatureExtract,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::FineTune => "finetune",
            Mode::FeatureExtract => "frozen",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finetune" => Ok(Mode::FineTune),
            "frozen" => Ok(Mode::FeatureExtract),
            other => Err(Error::invalid(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub mode: Mode,
    pub seed: u64,
    pub dtype: DType,
    pub word_pool: WordPool,
    pub aggregator: AggregatorKind,
    pub dropout: f64,
    /// Decay linearly to zero over the remaining steps after warmup.
    pub linear_decay: bool,
}

impl TrainConfig {
    /// End-to-end fine-tuning regime.
    pub fn finetune() -> Self {
        TrainConfig {
            lr: 3e-5,
            batch_size: 16,
            grad_accum_steps: 2,
            epochs: 40,
            warmup_steps: 150,
            mode: Mode::FineTune,
            seed: 0,
            dtype: DType::F32,
            word_pool: WordPool::Cls,
            aggregator: AggregatorKind::Transformer { use_positions: false },
            dropout: 0.0,
            linear_decay: false,
        }
    }

    /// Frozen-encoder regime with weighted-sum pooling.
    pub fn frozen() -> Self {
        TrainConfig {
            batch_size: 32,
            grad_accum_steps: 1,
            epochs: 20,
            warmup_steps: 40,
            mode: Mode::FeatureExtract,
            word_pool: WordPool::WeightedSum,
            ..Self::finetune()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("grad_accum_steps", self.grad_accum_steps),
            ("epochs", self.epochs),
            ("warmup_steps", self.warmup_steps),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be ≥ 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.grad_accum_steps
    }

    pub fn steps_per_epoch(&self, n_docs: usize) -> usize {
        n_docs.div_ceil(self.effective_batch())
    }

    pub fn schedule(&self, total_steps: usize) -> Schedule {
        Schedule {
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            decay_to: self.linear_decay.then_some(total_steps),
        }
    }

    /// Copies the pooling and aggregator choice into a model configuration.
    pub fn apply_to(&self, model: &mut ModelConfig) {
        model.word_pool = self.word_pool;
        model.aggregator = self.aggregator;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean cross-entropy over the effective batch, before the update.
    pub loss: f64,
}

pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Owns the model and optimizer state for one run.
pub struct Trainer<T: Element> {
    model: HierModel<T>,
    cfg: TrainConfig,
    schedule: Schedule,
    adam: Adam,
    frozen: Vec<bool>,
    step: usize,
    docs_seen: u64,
    pool: Option<rayon::ThreadPool>,
}

impl<T: Element> Trainer<T> {
    pub fn new(model: HierModel<T>, cfg: TrainConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        if cfg.dtype != T::DTYPE {
            return Err(Error::invalid(format!("config dtype {} but model is {}", cfg.dtype, T::DTYPE)));
        }
        let frozen = model
            .params()
            .names()
            .iter()
            .map(|n| cfg.mode == Mode::FeatureExtract && is_word_param(n))
            .collect();
        let mut trainer = Trainer {
            adam: Adam::new(model.params().tensors()),
            schedule: cfg.schedule(total_steps),
            model,
            cfg,
            frozen,
            step: 0,
            docs_seen: 0,
            pool: None,
        };
        trainer.set_threads(worker_threads())?;
        Ok(trainer)
    }

    /// Overrides the worker count from the environment. Results do not depend on it.
    pub fn set_threads(&mut self, n: usize) -> Result<()> {
        self.pool = if n > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::invalid(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(())
    }

    pub fn model(&self) -> &HierModel<T> {
        &self.model
    }

    pub fn into_model(self) -> HierModel<T> {
        self.model
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    fn doc_grads(&self, doc: &(ChunkedDocument, usize), key: u64) -> Result<(f64, Vec<Tensor<T>>)> {
        let train_word = self.cfg.mode == Mode::FineTune;
        if self.cfg.dropout > 0.0 {
            let mut d = Dropout::new(self.cfg.dropout, substream(self.cfg.seed, Stream::Dropout, key));
            self.model.loss_and_grads(&doc.0, doc.1, train_word, Some(&mut d))
        } else {
            self.model.loss_and_grads(&doc.0, doc.1, train_word, None)
        }
    }

    /// One optimizer update on an effective batch, processed as
    /// `grad_accum_steps` micro-batches. Per-document gradients are summed in
    /// batch order whatever the thread count, then averaged.
    pub fn step(&mut self, batch: &[&(ChunkedDocument, usize)], epoch: usize) -> Result<StepLog> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let step = self.step + 1;
        let lr = self.schedule.at(step);
        let mut sum: Vec<Tensor<T>> = self.model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let mut loss_sum = 0.0;
        let window = self.pool.as_ref().map_or(1, |p| p.current_num_threads());
        for micro in batch.chunks(self.cfg.batch_size) {
            for group in micro.chunks(window) {
                let base = self.docs_seen;
                let results: Vec<Result<(f64, Vec<Tensor<T>>)>> = match &self.pool {
                    Some(pool) => pool.install(|| {
                        group
                            .par_iter()
                            .enumerate()
                            .map(|(i, d)| self.doc_grads(d, base + i as u64))
                            .collect()
                    }),
                    None => group
                        .iter()
                        .enumerate()
                        .map(|(i, d)| self.doc_grads(d, base + i as u64))
                        .collect(),
                };
                self.docs_seen += group.len() as u64;
                for r in results {
                    let (loss, grads) = r.map_err(|e| match e {
                        Error::NonFinite { .. } => Error::NonFiniteLoss { step, loss: f64::NAN },
                        e => e,
                    })?;
                    loss_sum += loss;
                    for (acc, g) in sum.iter_mut().zip(&grads) {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a = *a + b;
                        }
                    }
                }
            }
        }
        let n = batch.len() as f64;
        let loss = loss_sum / n;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        let inv = T::from_f64(1.0 / n);
        for g in &mut sum {
            for v in g.data_mut() {
                *v = *v * inv;
            }
        }
        self.adam.step(self.model.params_mut().tensors_mut(), &sum, lr, &self.frozen)?;
        self.step = step;
        Ok(StepLog { step, epoch, lr, loss })
    }
}

/// Trains for `cfg.epochs` epochs, reshuffling each epoch from the seed's shuffle stream.
pub fn train<T: Element>(
    model: HierModel<T>,
    docs: &[(ChunkedDocument, usize)],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<(HierModel<T>, Vec<StepLog>)> {
    if docs.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let n_class = model.config().n_class;
    if let Some((_, y)) = docs.iter().find(|(_, y)| *y >= n_class) {
        return Err(Error::invalid(format!("label {y} out of range for {n_class} classes")));
    }
    let total = cfg.steps_per_epoch(docs.len()) * cfg.epochs;
    let mut trainer = Trainer::new(model, cfg.clone(), total)?;
    let mut shuffle = stream(cfg.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut log = Vec::with_capacity(total);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(cfg.effective_batch()) {
            let refs: Vec<&(ChunkedDocument, usize)> = batch.iter().map(|&i| &docs[i]).collect();
            let entry = trainer.step(&refs, epoch)?;
            on_step(&entry);
            log.push(entry);
        }
    }
    Ok((trainer.into_model(), log))
}

/// Samples every class down to the minority-class count, then shuffles.
pub fn downsample_balance(records: &[Record], n_class: usize, seed: u64) -> Result<Vec<Record>> {
    let mut by_class: BTreeMap<usize, Vec<&Record>> = (0..n_class).map(|c| (c, Vec::new())).collect();
    for r in records {
        by_class
            .get_mut(&r.label)
            .ok_or_else(|| Error::invalid(format!("label {} out of range for {n_class} classes", r.label)))?
            .push(r);
    }
    if let Some((c, _)) = by_class.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::invalid(format!("class {c} has no records")));
    }
    let keep = by_class.values().map(Vec::len).min().unwrap_or(0);
    let mut rng = stream(seed, Stream::Downsample);
    let mut out: Vec<Record> = Vec::with_capacity(keep * n_class);
    for members in by_class.values() {
        let mut picked = index::sample(&mut rng, members.len(), keep).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| members[i].clone()));
    }
    out.shuffle(&mut rng);
    Ok(out)
}
