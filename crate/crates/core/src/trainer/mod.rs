//! Mini-batch training with Adam, periodic validation, and resumable state.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predictions_from_logits, Checkpoint, Model, OPTIM_PREFIX};
use crate::numeric::Tensor;
use crate::params::ParamStore;
use crate::text::EncodedDocument;

pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const DEFAULT_EPOCHS: usize = 20;
pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.05;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const STATE_CHECKPOINT: &str = "state.ckpt";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: DEFAULT_LEARNING_RATE, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub epochs: usize,
    pub seed: u64,
    /// Validate every this many steps; 0 validates at the end of each epoch.
    pub eval_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            adam: AdamConfig::default(),
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            eval_every: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch size must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return Err(Error::InvalidSpec(format!("learning rate {} must be positive", a.learning_rate)));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::InvalidSpec("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient
/// holds a non-finite value.
pub fn adam_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::dim("adam_step", "one gradient and moment pair per parameter"));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: p.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { tensor: name.to_string() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((_, p), g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
        for ((x, &g), (m, v)) in it {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *x -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: u64,
    /// Mean batch loss since the previous record.
    pub train_loss: f64,
    pub val_acc: Option<f64>,
    /// Wall-clock milliseconds since training started; not reproducible.
    pub wall_ms: u64,
}

impl MetricRecord {
    /// Equality ignoring `wall_ms`, with floats compared bitwise.
    pub fn same_run(&self, other: &Self) -> bool {
        self.step == other.step
            && self.epoch == other.epoch
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.val_acc.map(f64::to_bits) == other.val_acc.map(f64::to_bits)
    }
}

pub fn write_metric_log(path: impl AsRef<Path>, records: &[MetricRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::io(path, e.into()))?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metric_log(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { line: i as u64 + 1, message: e.to_string() })
        })
        .collect()
}

/// Seeded split into `(train, validation)`; the validation part holds
/// `round(fraction · len)` documents, leaving at least one for training.
pub fn split_validation(
    docs: Vec<EncodedDocument>,
    fraction: f64,
    seed: u64,
) -> (Vec<EncodedDocument>, Vec<EncodedDocument>) {
    let n = docs.len();
    let n_val = ((fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let val_set: std::collections::HashSet<usize> = order[..n_val].iter().copied().collect();
    let (mut train, mut val) = (Vec::with_capacity(n - n_val), Vec::with_capacity(n_val));
    for (i, d) in docs.into_iter().enumerate() {
        if val_set.contains(&i) {
            val.push(d);
        } else {
            train.push(d);
        }
    }
    (train, val)
}

/// Accuracy, mean loss, and confusion counts (`confusion[true][predicted]`).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub documents: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub confusion: Vec<Vec<usize>>,
}

const EVAL_CHUNK: usize = 64;

/// Eval-mode accuracy and loss over `docs`.
pub fn evaluate(model: &Model, docs: &[EncodedDocument]) -> Result<Evaluation> {
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n = model.spec().n;
    let mut confusion = vec![vec![0; n]; n];
    let mut correct = 0;
    let mut loss = 0.0;
    for chunk in docs.chunks(EVAL_CHUNK) {
        let refs: Vec<&EncodedDocument> = chunk.iter().collect();
        let logits = model.logits(&refs)?;
        for (d, p) in chunk.iter().zip(predictions_from_logits(&logits)) {
            let y = d.label();
            if y >= n {
                return Err(Error::Label { label: y, classes: n });
            }
            confusion[y][p.class] += 1;
            correct += usize::from(p.class == y);
            loss -= p.probabilities[y].max(f64::MIN_POSITIVE).ln();
        }
    }
    Ok(Evaluation {
        documents: docs.len(),
        accuracy: correct as f64 / docs.len() as f64,
        loss: loss / docs.len() as f64,
        confusion,
    })
}

/// Training loop state. Everything needed to continue bit-identically is
/// captured by [`Trainer::to_checkpoint`].
pub struct Trainer {
    config: TrainConfig,
    model: Model,
    adam: AdamState,
    epoch: u64,
    /// Batches already consumed in the current epoch.
    batch_pos: u64,
    loss_sum: f64,
    loss_batches: u64,
    best_val: Option<f64>,
    log: Vec<MetricRecord>,
    started: Instant,
}

/// Returned by [`train`].
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<MetricRecord>,
    pub best_val_acc: Option<f64>,
}

/// Trains a freshly initialized model for `config.epochs` epochs.
pub fn train(
    train_docs: &[EncodedDocument],
    val_docs: &[EncodedDocument],
    spec: crate::model::ModelSpec,
    config: TrainConfig,
) -> Result<TrainOutcome> {
    let model = Model::seeded(spec, config.seed)?;
    let mut trainer = Trainer::new(model, config)?;
    trainer.run(train_docs, val_docs, None)?;
    Ok(trainer.finish())
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(model.params());
        Ok(Self {
            config,
            model,
            adam,
            epoch: 0,
            batch_pos: 0,
            loss_sum: 0.0,
            loss_batches: 0,
            best_val: None,
            log: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn log(&self) -> &[MetricRecord] {
        &self.log
    }

    pub fn best_val_acc(&self) -> Option<f64> {
        self.best_val
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome { model: self.model, log: self.log, best_val_acc: self.best_val }
    }

    pub fn is_done(&self) -> bool {
        self.epoch as usize >= self.config.epochs
    }

    fn epoch_order(&self, len: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.epoch + 1);
        order.shuffle(&mut rng);
        order
    }

    /// Trains until all epochs are done or `max_steps` more steps ran.
    pub fn run(
        &mut self,
        train_docs: &[EncodedDocument],
        val_docs: &[EncodedDocument],
        max_steps: Option<u64>,
    ) -> Result<()> {
        if train_docs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let n = self.model.spec().n;
        if let Some(d) = train_docs.iter().chain(val_docs).find(|d| d.label() >= n) {
            return Err(Error::Label { label: d.label(), classes: n });
        }
        let batch = self.config.batch_size;
        let batches = train_docs.len().div_ceil(batch) as u64;
        let mut budget = max_steps.unwrap_or(u64::MAX);
        while !self.is_done() && budget > 0 {
            let order = self.epoch_order(train_docs.len());
            while self.batch_pos < batches && budget > 0 {
                let start = self.batch_pos as usize * batch;
                let refs: Vec<&EncodedDocument> =
                    order[start..(start + batch).min(order.len())].iter().map(|&i| &train_docs[i]).collect();
                self.train_batch(&refs)?;
                self.batch_pos += 1;
                budget -= 1;
                let every = self.config.eval_every as u64;
                if every > 0 && self.adam.step % every == 0 {
                    self.record(val_docs)?;
                }
            }
            if self.batch_pos == batches {
                if self.config.eval_every == 0 {
                    self.record(val_docs)?;
                }
                self.epoch += 1;
                self.batch_pos = 0;
            }
        }
        if self.is_done() && self.loss_batches > 0 {
            self.record(val_docs)?;
        }
        if let Some(dir) = &self.config.checkpoint_dir {
            self.to_checkpoint().save(dir.join(STATE_CHECKPOINT))?;
        }
        Ok(())
    }

    /// Forward, backward, and one Adam update on `docs`.
    pub fn train_batch(&mut self, docs: &[&EncodedDocument]) -> Result<f64> {
        let step = self.model.loss_and_grads(docs, true)?;
        adam_step(self.model.params_mut(), &step.grads, &mut self.adam, &self.config.adam)?;
        self.model.set_bn_state(step.bn);
        self.loss_sum += step.loss;
        self.loss_batches += 1;
        Ok(step.loss)
    }

    fn record(&mut self, val_docs: &[EncodedDocument]) -> Result<()> {
        let val_acc = if val_docs.is_empty() {
            None
        } else {
            Some(evaluate(&self.model, val_docs)?.accuracy)
        };
        let train_loss = if self.loss_batches == 0 {
            f64::NAN
        } else {
            self.loss_sum / self.loss_batches as f64
        };
        self.log.push(MetricRecord {
            step: self.adam.step,
            epoch: self.epoch,
            train_loss,
            val_acc,
            wall_ms: self.started.elapsed().as_millis() as u64,
        });
        self.loss_sum = 0.0;
        self.loss_batches = 0;
        let score = val_acc.unwrap_or(f64::NEG_INFINITY);
        let improved = match self.best_val {
            None => true,
            Some(best) => score > best,
        };
        if improved {
            self.best_val = Some(score);
            if let Some(dir) = &self.config.checkpoint_dir {
                self.model.save(dir.join(BEST_CHECKPOINT))?;
            }
        }
        Ok(())
    }

    /// Model tensors, Adam moments, and loop counters.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = self.model.to_checkpoint();
        for ((name, _), (m, v)) in self.model.params().iter().zip(self.adam.m.iter().zip(&self.adam.v)) {
            ckpt.tensors.push((format!("{OPTIM_PREFIX}m.{name}"), m.clone()));
            ckpt.tensors.push((format!("{OPTIM_PREFIX}v.{name}"), v.clone()));
        }
        ckpt.counters = vec![
            ("seed".into(), self.config.seed),
            ("step".into(), self.adam.step),
            ("epoch".into(), self.epoch),
            ("batch_pos".into(), self.batch_pos),
            ("loss_sum_bits".into(), self.loss_sum.to_bits()),
            ("loss_batches".into(), self.loss_batches),
            ("has_best".into(), u64::from(self.best_val.is_some())),
            ("best_bits".into(), self.best_val.unwrap_or(0.0).to_bits()),
        ];
        ckpt
    }

    /// Restores a trainer saved by [`Trainer::to_checkpoint`]. The seed in
    /// `config` must match the saved one.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::from_checkpoint(ckpt)?;
        let counter = |name: &str| {
            ckpt.counter(name).ok_or_else(|| Error::Format(format!("training state lacks `{name}`")))
        };
        let seed = counter("seed")?;
        if seed != config.seed {
            return Err(Error::InvalidSpec(format!("state was trained with seed {seed}, config has {}", config.seed)));
        }
        let mut adam = AdamState::new(model.params());
        adam.step = counter("step")?;
        for (i, (name, p)) in model.params().iter().enumerate() {
            for (slot, kind) in [(&mut adam.m[i], "m"), (&mut adam.v[i], "v")] {
                let key = format!("{OPTIM_PREFIX}{kind}.{name}");
                let t = ckpt.tensor(&key).ok_or_else(|| Error::Format(format!("training state lacks `{key}`")))?;
                if t.shape() != p.shape() {
                    return Err(Error::ShapeMismatch { name: key, expected: p.shape().to_vec(), found: t.shape().to_vec() });
                }
                *slot = t.clone();
            }
        }
        Ok(Self {
            config,
            model,
            adam,
            epoch: counter("epoch")?,
            batch_pos: counter("batch_pos")?,
            loss_sum: f64::from_bits(counter("loss_sum_bits")?),
            loss_batches: counter("loss_batches")?,
            best_val: (counter("has_best")? == 1).then(|| f64::from_bits(counter("best_bits").unwrap_or(0))),
            log: Vec::new(),
            started: Instant::now(),
        })
    }
}

#[cfg(test)]
mod tests;
