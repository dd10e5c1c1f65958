//! Deterministic training loop: seeded shuffling and flips, Adam, a step
//! learning-rate decay at half of the epochs, PSG supervision and
//! checkpointing.
//!
//! Parameters and optimizer moments are rounded to single precision at the end
//! of every epoch, the precision a checkpoint stores them in. A run resumed
//! from a checkpoint therefore continues bit-for-bit like an uninterrupted one.

mod adam;
mod checkpoint;

pub use adam::{Adam, BETA1, BETA2, EPS};
pub use checkpoint::{Checkpoint, MAGIC};

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dataio::{batch_tensors, Sample};
use crate::error::{Error, Result};
use crate::losses::{overall, LossBreakdown, LossConfig, PsgRefresh};
use crate::metrics::{evaluate_dataset, Aggregation, MetricsReport};
use crate::model::{ModelConfig, ParamStore, SaliencyModel};
use crate::morphology::{psg_target, SaliencyMap};
use crate::ndtensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub seed: u64,
    /// Validate every this many epochs (and always after the last one).
    pub eval_every: usize,
    /// Fraction of a dataset held out for validation by [`train`].
    pub holdout: f64,
    /// Record the prediction and PSG target of one image after every epoch.
    pub probe: bool,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 5e-5,
            lr_decay_factor: 0.1,
            seed: 1,
            eval_every: 1,
            holdout: 0.2,
            probe: false,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return Err(Error::Config(format!(
                "train.lr_decay_factor must be positive, got {}",
                self.lr_decay_factor
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("train.eval_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::Config(format!(
                "train.holdout must lie in [0, 1), got {}",
                self.holdout
            )));
        }
        self.loss.validate()?;
        self.model.validate()
    }
}

/// First 0-indexed epoch trained at the decayed rate.
pub fn decay_epoch(epochs: usize) -> usize {
    epochs.div_ceil(2)
}

pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < decay_epoch(cfg.epochs) {
        cfg.lr
    } else {
        cfg.lr * cfg.lr_decay_factor
    }
}

/// One `train.log` line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub main_loss: f64,
    pub aux_loss: f64,
    pub overall: f64,
    pub val_max_f: Option<f64>,
    pub val_mae: Option<f64>,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        write!(
            f,
            "{}, {:e}, {:.8}, {:.8}, {:.8}, {}, {}",
            self.epoch,
            self.lr,
            self.main_loss,
            self.aux_loss,
            self.overall,
            opt(self.val_max_f),
            opt(self.val_mae)
        )
    }
}

/// Prediction and PSG target of the probe image after an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub id: String,
    pub pred: SaliencyMap,
    pub pgt: SaliencyMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    pub log: EpochLog,
    pub probe: Option<Probe>,
}

/// Splits off the last `holdout` fraction (rounded, at least one sample when
/// positive) for validation, keeping at least one training sample.
pub fn split_holdout(mut samples: Vec<Sample>, holdout: f64) -> (Vec<Sample>, Vec<Sample>) {
    let n = samples.len();
    if holdout <= 0.0 || n < 2 {
        return (samples, Vec::new());
    }
    let n_val = ((n as f64 * holdout).round() as usize).clamp(1, n - 1);
    let val = samples.split_off(n - n_val);
    (samples, val)
}

fn round_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    model: SaliencyModel,
    adam: Adam,
    epoch: usize,
    train: Vec<Sample>,
    val: Vec<Sample>,
}

impl Trainer {
    /// Samples whose size differs from the model input are resized.
    pub fn new(cfg: TrainConfig, train: Vec<Sample>, val: Vec<Sample>) -> Result<Self> {
        cfg.validate()?;
        let model = SaliencyModel::new(cfg.model.clone(), cfg.seed)?;
        Self::assemble(cfg, model, None, 0, train, val)
    }

    /// Continues the run stored in `ckpt`.
    pub fn resume(ckpt: &Checkpoint, train: Vec<Sample>, val: Vec<Sample>) -> Result<Self> {
        let (cfg, model) = load_model(ckpt)?;
        if ckpt.rng_seed != cfg.seed {
            return Err(Error::Checkpoint(format!(
                "rng seed {} disagrees with the config seed {}",
                ckpt.rng_seed, cfg.seed
            )));
        }
        let mut adam = Adam::new(model.params().tensors());
        adam.step = ckpt.adam_step;
        for (i, name) in model.params().names().iter().enumerate() {
            for (prefix, slot) in [("adam_m", &mut adam.m[i]), ("adam_v", &mut adam.v[i])] {
                let key = format!("{prefix}/{name}");
                let t = ckpt
                    .array(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing array {key}")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{key} has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )));
                }
                *slot = t.clone();
            }
        }
        let epoch = ckpt.epoch as usize;
        Self::assemble(cfg, model, Some(adam), epoch, train, val)
    }

    fn assemble(
        cfg: TrainConfig,
        model: SaliencyModel,
        adam: Option<Adam>,
        epoch: usize,
        train: Vec<Sample>,
        val: Vec<Sample>,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let size = cfg.model.input_size;
        let fit = |s: Vec<Sample>| -> Vec<Sample> {
            s.into_iter()
                .map(|s| {
                    if s.image.width() == size && s.image.height() == size {
                        s
                    } else {
                        s.resize(size)
                    }
                })
                .collect()
        };
        let adam = adam.unwrap_or_else(|| Adam::new(model.params().tensors()));
        Ok(Trainer {
            cfg,
            model,
            adam,
            epoch,
            train: fit(train),
            val: fit(val),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &SaliencyModel {
        &self.model
    }

    pub fn into_model(self) -> SaliencyModel {
        self.model
    }

    pub fn adam(&self) -> &Adam {
        &self.adam
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    /// One optimizer step on a B×3×H×W batch. `pgt` replaces the PSG target
    /// computed from the current prediction.
    pub fn step(
        &mut self,
        images: &Tensor,
        masks: &Tensor,
        pgt: Option<Tensor>,
        lr: f64,
    ) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let bound = self.model.params().bind(&mut tape, true);
        let x = tape.constant(images.clone());
        let pred = self.model.forward(&mut tape, &bound, x)?;
        let (loss, breakdown) = overall(&mut tape, pred, masks, &self.cfg.loss, pgt)?;
        if !breakdown.overall.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite loss at epoch {}",
                self.epoch
            )));
        }
        tape.backward(loss)?;
        let grads: Vec<Tensor> = bound
            .vars()
            .iter()
            .zip(self.model.params().tensors())
            .map(|(&v, p)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        self.adam
            .update(self.model.params_mut().tensors_mut(), &grads, lr)?;
        Ok(breakdown)
    }

    /// Trains one epoch, validates when due, and returns its log line.
    pub fn run_epoch(&mut self) -> Result<EpochOutcome> {
        if self.is_finished() {
            return Err(Error::Config(format!(
                "all {} epochs are already trained",
                self.cfg.epochs
            )));
        }
        let epoch = self.epoch;
        let lr = lr_schedule(epoch, &self.cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(1 + epoch as u64);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng);
        let flips: Vec<bool> = order.iter().map(|_| rng.gen_bool(0.5)).collect();

        let epoch_pgt = match (self.cfg.loss.use_psg, self.cfg.loss.psg_refresh) {
            (true, PsgRefresh::Epoch) => Some(self.psg_targets(&self.train)?),
            _ => None,
        };

        let mut sums = [0.0; 3];
        let mut batches = 0usize;
        for (idx, flip) in order
            .chunks(self.cfg.batch_size)
            .zip(flips.chunks(self.cfg.batch_size))
        {
            let samples: Vec<&Sample> = idx.iter().map(|&i| &self.train[i]).collect();
            let (images, masks) = batch_tensors(&samples, flip)?;
            let pgt = match &epoch_pgt {
                Some(all) => {
                    let items: Vec<Tensor> = idx
                        .iter()
                        .zip(flip)
                        .map(|(&i, &f)| {
                            let m = if f { all[i].hflip() } else { all[i].clone() };
                            m.to_tensor().reshape(&[1, m.height(), m.width()])
                        })
                        .collect::<Result<_>>()?;
                    Some(Tensor::stack(&items)?)
                }
                None => None,
            };
            let b = self.step(&images, &masks, pgt, lr)?;
            sums[0] += b.main;
            sums[1] += b.aux;
            sums[2] += b.overall;
            batches += 1;
        }

        for t in self.model.params_mut().tensors_mut() {
            round_f32(t);
        }
        for t in self.adam.m.iter_mut().chain(self.adam.v.iter_mut()) {
            round_f32(t);
        }
        self.epoch += 1;

        let due = self.epoch % self.cfg.eval_every == 0 || self.is_finished();
        let report = if due && !self.val.is_empty() {
            Some(self.evaluate(&self.val, Aggregation::default())?)
        } else {
            None
        };
        let probe = if self.cfg.probe {
            Some(self.probe()?)
        } else {
            None
        };
        let n = batches as f64;
        Ok(EpochOutcome {
            log: EpochLog {
                epoch,
                lr,
                main_loss: sums[0] / n,
                aux_loss: sums[1] / n,
                overall: sums[2] / n,
                val_max_f: report.as_ref().map(|r| r.max_f),
                val_mae: report.as_ref().map(|r| r.mae),
            },
            probe,
        })
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self) -> Result<Vec<EpochOutcome>> {
        let mut out = Vec::new();
        while !self.is_finished() {
            out.push(self.run_epoch()?);
        }
        Ok(out)
    }

    /// Predictions at model resolution, in sample order.
    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<SaliencyMap>> {
        predict_samples(&self.model, samples, self.cfg.batch_size)
    }

    pub fn evaluate(&self, samples: &[Sample], aggregation: Aggregation) -> Result<MetricsReport> {
        let preds = self.predict(samples)?;
        let gts: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
        evaluate_dataset(&preds, &gts, aggregation)
    }

    fn psg_targets(&self, samples: &[Sample]) -> Result<Vec<SaliencyMap>> {
        let se = self.cfg.loss.structuring_element()?;
        self.predict(samples)?
            .iter()
            .zip(samples)
            .map(|(p, s)| psg_target(p, &s.mask, se))
            .collect()
    }

    fn probe(&self) -> Result<Probe> {
        let sample = self.val.first().unwrap_or(&self.train[0]);
        let one = std::slice::from_ref(sample);
        let pred = self.predict(one)?.remove(0);
        let pgt = psg_target(&pred, &sample.mask, self.cfg.loss.structuring_element()?)?;
        Ok(Probe {
            id: sample.id.clone(),
            pred,
            pgt,
        })
    }

    /// Snapshot with the config, parameters, Adam moments and epoch.
    pub fn checkpoint(&self) -> Checkpoint {
        let run = RunConfig {
            train: self.cfg.clone(),
            ..Default::default()
        };
        let params = self.model.params();
        let mut arrays = Vec::with_capacity(3 * params.len());
        for (name, t) in params.iter() {
            arrays.push((format!("param/{name}"), t.clone()));
        }
        for (prefix, moments) in [("adam_m", &self.adam.m), ("adam_v", &self.adam.v)] {
            for (name, t) in params.names().iter().zip(moments) {
                arrays.push((format!("{prefix}/{name}"), t.clone()));
            }
        }
        Checkpoint {
            config: run.to_text(),
            epoch: self.epoch as u64,
            rng_seed: self.cfg.seed,
            adam_step: self.adam.step,
            arrays,
        }
    }
}

/// Batched inference; each map is at the samples' resolution, which must match
/// the model input.
pub fn predict_samples(
    model: &SaliencyModel,
    samples: &[Sample],
    batch_size: usize,
) -> Result<Vec<SaliencyMap>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (images, _) = batch_tensors(&refs, &vec![false; refs.len()])?;
        let pred = model.predict(&images)?;
        for i in 0..chunk.len() {
            out.push(SaliencyMap::from_tensor(&pred.batch_item(i))?);
        }
    }
    Ok(out)
}

/// Rebuilds the training config and model stored in a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<(TrainConfig, SaliencyModel)> {
    let cfg = RunConfig::parse(&ckpt.config)?.train;
    let mut store = ParamStore::new();
    for (name, t) in &ckpt.arrays {
        if let Some(param) = name.strip_prefix("param/") {
            store.insert(param, t.clone())?;
        }
    }
    let model = SaliencyModel::from_params(cfg.model.clone(), store)
        .map_err(|e| Error::Checkpoint(format!("parameters do not fit the model: {e}")))?;
    Ok((cfg, model))
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochOutcome>,
    pub model: SaliencyModel,
}

/// Holds out the tail of `dataset` for validation and trains all epochs.
pub fn train(cfg: &TrainConfig, dataset: Vec<Sample>) -> Result<TrainRun> {
    if dataset.is_empty() {
        return Err(Error::Dataset("dataset is empty".into()));
    }
    let (train_set, val) = split_holdout(dataset, cfg.holdout);
    let mut trainer = Trainer::new(cfg.clone(), train_set, val)?;
    let epochs = trainer.run()?;
    let checkpoint = trainer.checkpoint();
    Ok(TrainRun {
        checkpoint,
        epochs,
        model: trainer.into_model(),
    })
}
