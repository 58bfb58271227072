//! The training loop: batch assembly with per-step caption sampling,
//! projection forward, symmetric InfoNCE, backprop, global-norm clipping,
//! Adam, periodic validation with early stopping, and checkpointing.
//!
//! All randomness is a pure function of `(seed, step)`: the image order of
//! each epoch and the caption picked for each image at each step. Resuming
//! from a checkpoint therefore replays exactly.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use ndarray::{s, Array2};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainProgress};
use crate::contrastive::{infonce_loss, normalize, normalize_backward};
use crate::error::{Error, Result};
use crate::optimizer::{clip_global_norm, AdamConfig, AdamState};
use crate::projection::{ParamKind, ProjectionConfig, ProjectionNet};
use crate::seed::{derive_rng, stream};
use crate::store::PairedDataset;

/// Batches that may be assembled ahead of the step consuming them.
const PREFETCH: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: u64,
    pub val_fraction: f64,
    pub val_interval: u64,
    pub early_stop_patience: u32,
    pub tau: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16_384,
            max_steps: 5_000,
            val_fraction: 0.02,
            val_interval: 100,
            early_stop_patience: 5,
            tau: crate::contrastive::DEFAULT_TAU,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return Err(Error::InvalidConfig(format!("val_fraction must lie in (0, 0.5), got {}", self.val_fraction)));
        }
        if self.val_interval == 0 {
            return Err(Error::InvalidConfig("val_interval must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidTau(self.tau));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps_run: u64,
    pub final_train_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub best_step: Option<u64>,
    pub stopped_early: bool,
    pub wall_clock_secs: f64,
    pub checkpoint_path: Option<PathBuf>,
    pub history: Vec<LogEntry>,
}

impl TrainReport {
    /// `step,train_loss,val_loss` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,train_loss,val_loss\n");
        for e in &self.history {
            let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", e.step, e.train_loss, val);
        }
        out
    }
}

/// Disjoint image-level split. Validation keeps every caption of its images.
pub fn split_train_val(dataset: &PairedDataset, val_fraction: f64, seed: u64) -> Result<(PairedDataset, PairedDataset)> {
    let n = dataset.len();
    if n == 0 {
        return Err(Error::TooSmall("dataset is empty".into()));
    }
    let n_val = (n as f64 * val_fraction).floor() as usize;
    if n_val == 0 {
        return Err(Error::TooSmall(format!("{n} images × {val_fraction} leaves an empty validation split")));
    }
    if n_val >= n {
        return Err(Error::TooSmall(format!("{n} images × {val_fraction} leaves no training images")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, stream::SPLIT, 0));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((dataset.subset(&train), dataset.subset(&val)))
}

/// One assembled training batch. Row `i` of `vision` and `text` is a
/// matched pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub vision: Array2<f32>,
    pub text: Array2<f32>,
    /// Dataset-local image indices.
    pub images: Vec<usize>,
    /// Text-store rows of the chosen captions.
    pub caption_rows: Vec<usize>,
}

impl Batch {
    pub fn image_ids<'a>(&self, dataset: &'a PairedDataset) -> Vec<&'a str> {
        self.images.iter().map(|&i| dataset.image_ids()[i].as_str()).collect()
    }

    pub fn caption_ids<'a>(&self, dataset: &'a PairedDataset) -> Vec<&'a str> {
        self.caption_rows.iter().map(|&r| dataset.text().id(r)).collect()
    }
}

fn assemble<R: Rng>(dataset: &PairedDataset, images: Vec<usize>, rng: &mut R) -> Batch {
    let caption_rows: Vec<usize> = images
        .iter()
        .map(|&i| {
            let rows = dataset.caption_rows(i);
            rows[rng.random_range(0..rows.len())]
        })
        .collect();
    let image_rows: Vec<usize> = images.iter().map(|&i| dataset.image_row(i)).collect();
    Batch {
        vision: dataset.vision().gather(&image_rows),
        text: dataset.text().gather(&caption_rows),
        images,
        caption_rows,
    }
}

/// Distinct images drawn uniformly, one uniformly chosen caption each.
pub fn sample_batch<R: Rng>(dataset: &PairedDataset, batch_size: usize, rng: &mut R) -> Result<Batch> {
    if batch_size > dataset.len() {
        return Err(Error::BatchExceedsDataset { batch_size, available: dataset.len() });
    }
    let images = index::sample(rng, dataset.len(), batch_size).into_vec();
    Ok(assemble(dataset, images, rng))
}

/// Epoch-wise sampler: each epoch walks a fresh permutation of the images in
/// `batch_size` chunks (an incomplete tail chunk is skipped), so images in a
/// batch are distinct. A batch depends only on `(seed, step)`.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    seed: u64,
    batch_size: usize,
    images: usize,
    epoch: Option<(u64, Vec<usize>)>,
}

impl EpochSampler {
    pub fn new(dataset: &PairedDataset, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > dataset.len() {
            return Err(Error::BatchExceedsDataset { batch_size, available: dataset.len() });
        }
        Ok(Self { seed, batch_size, images: dataset.len(), epoch: None })
    }

    pub fn batches_per_epoch(&self) -> u64 {
        (self.images / self.batch_size) as u64
    }

    pub fn batch(&mut self, dataset: &PairedDataset, step: u64) -> Batch {
        let per_epoch = self.batches_per_epoch();
        let (epoch, k) = (step / per_epoch, (step % per_epoch) as usize);
        if self.epoch.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut order: Vec<usize> = (0..self.images).collect();
            order.shuffle(&mut derive_rng(self.seed, stream::EPOCH, epoch));
            self.epoch = Some((epoch, order));
        }
        let order = &self.epoch.as_ref().unwrap().1;
        let images = order[k * self.batch_size..(k + 1) * self.batch_size].to_vec();
        assemble(dataset, images, &mut derive_rng(self.seed, stream::CAPTION, step))
    }
}

/// Store rows read while training, for leak auditing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccessLog {
    pub vision_rows: HashSet<usize>,
    pub text_rows: HashSet<usize>,
}

impl AccessLog {
    fn record(&mut self, dataset: &PairedDataset, images: &[usize], caption_rows: &[usize]) {
        self.vision_rows.extend(images.iter().map(|&i| dataset.image_row(i)));
        self.text_rows.extend(caption_rows.iter().copied());
    }
}

fn decay_mask(net: &ProjectionNet<f32>) -> Vec<bool> {
    net.param_kinds().iter().map(|k| *k == ParamKind::Weight).collect()
}

fn check_dims(projection: &ProjectionConfig, dataset: &PairedDataset) -> Result<()> {
    if dataset.text().dim() != projection.input_dim {
        return Err(Error::DimMismatch(format!(
            "text store dim {} != projection input_dim {}",
            dataset.text().dim(),
            projection.input_dim
        )));
    }
    if dataset.vision().dim() != projection.output_dim {
        return Err(Error::DimMismatch(format!(
            "vision store dim {} != projection output_dim {}",
            dataset.vision().dim(),
            projection.output_dim
        )));
    }
    Ok(())
}

pub struct Trainer {
    config: TrainConfig,
    net: ProjectionNet<f32>,
    adam: AdamState<f32>,
    progress: TrainProgress,
    train: PairedDataset,
    val: Option<PairedDataset>,
    access_log: Option<AccessLog>,
}

impl Trainer {
    /// A fresh run. `val` may be omitted to train without validation or
    /// early stopping.
    pub fn new(
        config: TrainConfig,
        projection: ProjectionConfig,
        optimizer: AdamConfig,
        train: PairedDataset,
        val: Option<PairedDataset>,
    ) -> Result<Self> {
        optimizer.validate()?;
        let net = ProjectionNet::<f32>::init(projection)?;
        let adam = AdamState::for_params(optimizer, &net.param_slices());
        Self::assemble(config, net, adam, TrainProgress::default(), train, val)
    }

    /// Continue from a checkpoint. The step counter and early-stopping state
    /// come from the checkpoint; everything else from `config`.
    pub fn resume(config: TrainConfig, checkpoint: Checkpoint, train: PairedDataset, val: Option<PairedDataset>) -> Result<Self> {
        Self::assemble(config, checkpoint.net, checkpoint.adam, checkpoint.progress, train, val)
    }

    fn assemble(
        config: TrainConfig,
        net: ProjectionNet<f32>,
        adam: AdamState<f32>,
        progress: TrainProgress,
        train: PairedDataset,
        val: Option<PairedDataset>,
    ) -> Result<Self> {
        if config.batch_size < 2 {
            return Err(Error::InvalidConfig(format!("batch_size must be at least 2, got {}", config.batch_size)));
        }
        if config.val_interval == 0 {
            return Err(Error::InvalidConfig("val_interval must be positive".into()));
        }
        if !(config.tau > 0.0 && config.tau.is_finite()) {
            return Err(Error::InvalidTau(config.tau));
        }
        check_dims(net.config(), &train)?;
        if let Some(v) = &val {
            check_dims(net.config(), v)?;
            if v.is_empty() {
                return Err(Error::TooSmall("validation split is empty".into()));
            }
        }
        if config.batch_size > train.len() {
            return Err(Error::BatchExceedsDataset { batch_size: config.batch_size, available: train.len() });
        }
        Ok(Self { config, net, adam, progress, train, val, access_log: None })
    }

    pub fn record_access(&mut self) {
        self.access_log.get_or_insert_with(AccessLog::default);
    }

    pub fn access_log(&self) -> Option<&AccessLog> {
        self.access_log.as_ref()
    }

    pub fn net(&self) -> &ProjectionNet<f32> {
        &self.net
    }

    pub fn into_net(self) -> ProjectionNet<f32> {
        self.net
    }

    pub fn step(&self) -> u64 {
        self.progress.step
    }

    pub fn progress(&self) -> &TrainProgress {
        &self.progress
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { net: self.net.clone(), adam: self.adam.clone(), seed: self.config.seed, progress: self.progress.clone() }
    }

    /// Contrastive loss on the validation split in eval mode. Each image uses
    /// one fixed caption; the split is scored in chunks of `batch_size` (the
    /// remainder joins the last chunk) and chunk losses are averaged by size.
    pub fn validation_loss(&mut self) -> Result<Option<f64>> {
        let Some(val) = &self.val else { return Ok(None) };
        let mut rng = derive_rng(self.config.seed, stream::VALIDATION, 0);
        let all: Vec<usize> = (0..val.len()).collect();
        let batch = assemble(val, all, &mut rng);
        if let Some(log) = &mut self.access_log {
            log.record(val, &batch.images, &batch.caption_rows);
        }
        let n = val.len();
        let chunks = (n / self.config.batch_size).max(1);
        let mut total = 0.0;
        for c in 0..chunks {
            let start = c * self.config.batch_size;
            let end = if c + 1 == chunks { n } else { start + self.config.batch_size };
            let text = self.net.forward_eval(batch.text.slice(s![start..end, ..]))?;
            let z_txt = normalize(text.view())?;
            let z_img = normalize(batch.vision.slice(s![start..end, ..]))?;
            let loss = infonce_loss(&z_img, &z_txt, self.config.tau)?;
            total += loss.total_loss as f64 * (end - start) as f64;
        }
        Ok(Some(total / n as f64))
    }

    /// One optimization step on a prepared batch; returns the train loss.
    pub fn train_step(&mut self, batch: &Batch) -> Result<f64> {
        let step = self.progress.step;
        let (text_out, cache) = self.net.forward_train(batch.text.view())?;
        if let Some(bad) = text_out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                diagnostics: format!("projected text row {} is not finite", bad / text_out.ncols()),
            });
        }
        let z_txt = normalize(text_out.view())?;
        let z_img = normalize(batch.vision.view())?;
        let loss = infonce_loss(&z_img, &z_txt, self.config.tau)?;
        if !loss.total_loss.is_finite() {
            let max_abs = text_out.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            return Err(Error::NonFiniteLoss {
                step,
                diagnostics: format!(
                    "loss_t2i={} loss_i2t={} max |projected|={max_abs}",
                    loss.loss_t2i, loss.loss_i2t
                ),
            });
        }
        let upstream = normalize_backward(loss.grad_z_txt.view(), text_out.view())?;
        let mut grads = self.net.backward(&cache, upstream.view())?;
        if let Some(max_norm) = self.adam.config.clip_norm {
            clip_global_norm(&mut grads.slices_mut(), max_norm)
                .map_err(|e| Error::NonFiniteLoss { step, diagnostics: format!("gradient: {e}") })?;
        }
        let decay = decay_mask(&self.net);
        self.adam.step(&mut self.net.param_slices_mut(), &grads.slices(), &decay)?;
        if let Some(log) = &mut self.access_log {
            log.record(&self.train, &batch.images, &batch.caption_rows);
        }
        self.progress.step += 1;
        self.progress.last_train_loss = Some(loss.total_loss as f64);
        Ok(loss.total_loss as f64)
    }

    /// Train until `max_steps` or early stop. With `out_dir`, the best
    /// validation checkpoint is kept as `best.ckpt`, the final state as
    /// `last.ckpt`, and the loss log as `train_log.csv`.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<TrainReport> {
        let started = Instant::now();
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let first = self.progress.step;
        let last = self.config.max_steps;
        let mut history = Vec::new();
        let mut stopped_early = false;
        let mut sampler = EpochSampler::new(&self.train, self.config.batch_size, self.config.seed)?;
        let train = self.train.clone();

        std::thread::scope(|scope| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel::<Batch>(PREFETCH);
            scope.spawn(move || {
                for step in first..last {
                    if tx.send(sampler.batch(&train, step)).is_err() {
                        break;
                    }
                }
            });
            for _ in first..last {
                let batch = rx.recv().expect("batch producer exited early");
                let train_loss = self.train_step(&batch)?;
                let step = self.progress.step;
                let mut entry = LogEntry { step: step - 1, train_loss, val_loss: None };
                if self.val.is_some() && step.is_multiple_of(self.config.val_interval) {
                    let val_loss = self.validation_loss()?.unwrap();
                    entry.val_loss = Some(val_loss);
                    if self.progress.best_val_loss.is_none_or(|best| val_loss < best) {
                        self.progress.best_val_loss = Some(val_loss);
                        self.progress.best_step = Some(step);
                        self.progress.checks_without_improvement = 0;
                        if let Some(dir) = out_dir {
                            self.checkpoint().save(dir.join("best.ckpt"))?;
                        }
                    } else {
                        self.progress.checks_without_improvement += 1;
                    }
                }
                history.push(entry);
                if self.progress.checks_without_improvement >= self.config.early_stop_patience
                    && self.config.early_stop_patience > 0
                {
                    stopped_early = true;
                    break;
                }
            }
            drop(rx);
            Ok(())
        })?;

        let mut checkpoint_path = None;
        if let Some(dir) = out_dir {
            let last_path = dir.join("last.ckpt");
            self.checkpoint().save(&last_path)?;
            let best = dir.join("best.ckpt");
            checkpoint_path = Some(if best.exists() { best } else { last_path });
        }
        let report = TrainReport {
            steps_run: self.progress.step - first,
            final_train_loss: self.progress.last_train_loss,
            best_val_loss: self.progress.best_val_loss,
            best_step: self.progress.best_step,
            stopped_early,
            wall_clock_secs: started.elapsed().as_secs_f64(),
            checkpoint_path,
            history,
        };
        if let Some(dir) = out_dir {
            let log = dir.join("train_log.csv");
            fs::write(&log, report.to_csv()).map_err(|e| Error::io(&log, e))?;
        }
        Ok(report)
    }
}

/// Split off a validation set, then train.
pub fn train(
    config: &TrainConfig,
    projection: &ProjectionConfig,
    optimizer: &AdamConfig,
    dataset: &PairedDataset,
    out_dir: Option<&Path>,
) -> Result<(TrainReport, ProjectionNet<f32>)> {
    config.validate()?;
    check_dims(projection, dataset)?;
    let (train_set, val_set) = split_train_val(dataset, config.val_fraction, config.seed)?;
    let mut trainer = Trainer::new(config.clone(), projection.clone(), optimizer.clone(), train_set, Some(val_set))?;
    let report = trainer.run(out_dir)?;
    Ok((report, trainer.into_net()))
}

/// Eval-mode embeddings of one caption per image (the first), stacked with
/// the image embeddings. Handy for self-retrieval checks.
pub fn embed_pairs(net: &ProjectionNet<f32>, dataset: &PairedDataset) -> Result<(Array2<f32>, Array2<f32>)> {
    let image_rows: Vec<usize> = (0..dataset.len()).map(|i| dataset.image_row(i)).collect();
    let caption_rows: Vec<usize> = (0..dataset.len()).map(|i| dataset.caption_rows(i)[0]).collect();
    let img = crate::embed::vision_rows(dataset.vision(), &image_rows)?;
    let txt = crate::embed::text_rows(net, dataset.text(), &caption_rows)?;
    Ok((img, txt))
}
