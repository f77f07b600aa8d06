//! AdamW, training configuration and the resumable training loop.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::FusionRule;
use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::data::{synthetic_dataset, ImagePair, Manifest, PreparedPair, Raster};
use crate::error::{Error, Result};
use crate::losses::{mean_of, total_loss, LossConfig, LossReport, LossTerms};
use crate::network::{AdaFuseModel, FusionMode, ModelConfig};
use crate::param::ParamStore;
use crate::tensor::{Element, Tensor};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One AdamW update of a flat parameter slice at step `t` (1-based).
pub fn adamw_update<T: Element>(cfg: &AdamWConfig, t: u64, theta: &mut [T], grad: &[T], m: &mut [T], v: &mut [T]) {
    let bc1 = 1.0 - cfg.beta1.powf(t as f64);
    let bc2 = 1.0 - cfg.beta2.powf(t as f64);
    for i in 0..theta.len() {
        let g = grad[i].as_f64();
        let mi = cfg.beta1 * m[i].as_f64() + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i].as_f64() + (1.0 - cfg.beta2) * g * g;
        m[i] = T::from_f64(mi);
        v[i] = T::from_f64(vi);
        let mut p = theta[i].as_f64();
        p -= cfg.lr * cfg.weight_decay * p;
        p -= cfg.lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.eps);
        theta[i] = T::from_f64(p);
    }
}

/// First and second moments mirroring the parameter store, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Element> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Element> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![T::from_f64(0.0); t.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Applies one AdamW step to every parameter using its accumulated gradient.
pub fn optimizer_step<T: Element>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>, cfg: &AdamWConfig) -> Result<()> {
    let grads = store
        .iter()
        .map(|(_, name, t)| t.grad().ok_or_else(|| Error::MissingGradient(name.to_string())))
        .collect::<Result<Vec<_>>>()?;
    state.step += 1;
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let mut theta = store.get(id).to_vec();
        adamw_update(cfg, state.step, &mut theta, &grads[k], &mut state.m[k], &mut state.v[k]);
        store.set(id, theta)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic {
        #[serde(default = "default_count")]
        count: usize,
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default)]
        seed: u64,
    },
    Manifest {
        path: PathBuf,
    },
}

fn default_count() -> usize {
    10
}

fn default_size() -> usize {
    64
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::Synthetic {
            count: default_count(),
            size: default_size(),
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Vec<ImagePair>> {
        let pairs = match self {
            Self::Synthetic { count, size, seed } => synthetic_dataset(*count, *size, *seed),
            Self::Manifest { path } => Manifest::load(path)?.load_all()?,
        };
        if pairs.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        Ok(pairs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub device: String,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: AdamWConfig,
    pub dataset: DatasetConfig,
    pub epochs: u64,
    pub batch_size: usize,
    /// Hard cap on optimiser steps, on top of `epochs`.
    pub max_steps: Option<u64>,
    pub seed: u64,
    /// Write a checkpoint every this many steps; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Epochs without relative improvement of at least `min_delta` before stopping.
    pub patience: Option<u64>,
    pub min_delta: f64,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            device: "cpu".into(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optimizer: AdamWConfig::default(),
            dataset: DatasetConfig::default(),
            epochs: 50,
            batch_size: 4,
            max_steps: None,
            seed: 0,
            checkpoint_every: 0,
            patience: Some(10),
            min_delta: 1e-4,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "config schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.device != "cpu" {
            return Err(Error::invalid(format!("unsupported device {:?}", self.device)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.optimizer.lr > 0.0) || !(0.0..1.0).contains(&self.optimizer.beta1) || !(0.0..1.0).contains(&self.optimizer.beta2) {
            return Err(Error::invalid("optimizer needs lr > 0 and betas in [0, 1)"));
        }
        self.model.validate()?;
        self.loss.validate()
    }

    /// Reads a JSON config; a relative manifest path is taken relative to the config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: TrainConfig = serde_json::from_str(&text)?;
        if let DatasetConfig::Manifest { path: m } = &mut cfg.dataset {
            if m.is_relative() {
                *m = path.parent().unwrap_or(Path::new("")).join(&*m);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// One ablation variant: feature fusion strategy, FGFB on/off and loss subset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ablation {
    pub fusion: FusionMode,
    pub fgfb: bool,
    pub terms: LossTerms,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            fusion: FusionMode::Caf,
            fgfb: true,
            terms: LossTerms::Both,
        }
    }
}

impl Ablation {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        cfg.model.fusion = self.fusion;
        cfg.model.fgfb = self.fgfb;
        cfg.loss.terms = self.terms;
    }

    /// Every combination of fusion strategy, FGFB and loss subset.
    pub fn all() -> Vec<Ablation> {
        let fusions = [
            FusionMode::Caf,
            FusionMode::Rule(FusionRule::Avg),
            FusionMode::Rule(FusionRule::L1),
            FusionMode::Rule(FusionRule::Max),
        ];
        let mut out = Vec::new();
        for fusion in fusions {
            for fgfb in [true, false] {
                for terms in [LossTerms::Both, LossTerms::Content, LossTerms::Structure] {
                    out.push(Ablation { fusion, fgfb, terms });
                }
            }
        }
        out
    }
}

/// Luminance pair as network inputs.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub pair_id: String,
    pub a: Tensor<f32>,
    pub b: Tensor<f32>,
}

impl TrainPair {
    pub fn new(prepared: &PreparedPair) -> Result<Self> {
        Ok(Self {
            pair_id: prepared.pair_id.clone(),
            a: prepared.y_a.to_tensor()?,
            b: prepared.y_b.to_tensor()?,
        })
    }

    pub fn from_pairs(pairs: &[ImagePair]) -> Result<Vec<Self>> {
        pairs.iter().map(|p| Self::new(&PreparedPair::new(p)?)).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    pub best_loss: Option<f64>,
    pub stale_epochs: u64,
    pub epoch_loss_sum: f64,
    pub epoch_batches: u64,
    pub stopped_early: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    pub report: LossReport,
    pub wall_ms: f64,
}

pub const CURVE_HEADER: &str = "step,content,grad,ssim,total,wall_ms";
pub const CHECKPOINT_FILE: &str = "checkpoint.adfz";
pub const CURVE_FILE: &str = "loss_curve.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: u64,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub stopped_early: bool,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: AdaFuseModel<f32>,
    pub optimizer: OptimizerState<f32>,
    pub state: TrainState,
    pub curve: Vec<CurveRow>,
}

fn moments(store: &ParamStore<f32>, values: &[Vec<f32>]) -> Vec<NamedTensor> {
    store
        .iter()
        .zip(values)
        .map(|((_, name, t), v)| NamedTensor::new(name, t.shape(), v.clone()))
        .collect()
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut model_cfg = config.model.clone();
        model_cfg.seed = config.seed;
        let model = AdaFuseModel::new(model_cfg)?;
        let optimizer = OptimizerState::new(&model.params);
        Ok(Self {
            config,
            model,
            optimizer,
            state: TrainState::default(),
            curve: Vec::new(),
        })
    }

    /// Restores model, moments and loop position from a training checkpoint.
    pub fn resume(config: TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let model = AdaFuseModel::<f32>::from_checkpoint(ckpt)?;
        let mut expected = config.model.clone();
        expected.seed = config.seed;
        if *model.config() != expected {
            return Err(Error::Checkpoint("checkpoint model config differs from the training config".into()));
        }
        let restore = |list: &[NamedTensor], what: &str| -> Result<Vec<Vec<f32>>> {
            model
                .params
                .iter()
                .map(|(_, name, t)| {
                    list.iter()
                        .find(|n| n.name == name && n.shape == t.shape())
                        .map(|n| n.data.clone())
                        .ok_or_else(|| Error::Checkpoint(format!("missing {what} moment for {name}")))
                })
                .collect()
        };
        let state: TrainState = match &ckpt.train_state {
            Some(v) => serde_json::from_value(v.clone())?,
            None => return Err(Error::Checkpoint("checkpoint has no training state".into())),
        };
        let optimizer = OptimizerState {
            step: state.step,
            m: restore(&ckpt.adam_m, "first")?,
            v: restore(&ckpt.adam_v, "second")?,
        };
        Ok(Self {
            config,
            model,
            optimizer,
            state,
            curve: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = self.model.to_checkpoint();
        ckpt.adam_m = moments(&self.model.params, &self.optimizer.m);
        ckpt.adam_v = moments(&self.model.params, &self.optimizer.v);
        ckpt.optimizer = Some(serde_json::json!({
            "kind": "adamw",
            "step": self.optimizer.step,
            "config": self.config.optimizer,
        }));
        ckpt.train_state = Some(serde_json::to_value(&self.state)?);
        Ok(ckpt)
    }

    fn batches_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.config.batch_size) as u64
    }

    /// Pair indices of batch `b` in `epoch`; the order is a pure function of seed and epoch.
    fn batch(&self, n: usize, epoch: u64, b: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(1000 + epoch);
        order.shuffle(&mut rng);
        let start = b as usize * self.config.batch_size;
        order[start..(start + self.config.batch_size).min(n)].to_vec()
    }

    /// Loss of a set of pairs under the current parameters, without an update.
    pub fn evaluate_loss(&self, pairs: &[TrainPair]) -> Result<LossReport> {
        let mut reports = Vec::new();
        for p in pairs {
            let out = self.model.forward(&p.a.detach(), &p.b.detach())?;
            reports.push(total_loss(&out, &p.a, &p.b, &self.config.loss)?.1);
        }
        Ok(mean_report(&reports))
    }

    /// One optimiser step on the next batch.
    pub fn step(&mut self, pairs: &[TrainPair]) -> Result<CurveRow> {
        if pairs.is_empty() {
            return Err(Error::invalid("training needs at least one pair"));
        }
        let start = Instant::now();
        let bpe = self.batches_per_epoch(pairs.len());
        let (epoch, b) = (self.state.step / bpe, self.state.step % bpe);
        let mut losses = Vec::new();
        let mut reports = Vec::new();
        for i in self.batch(pairs.len(), epoch, b) {
            let p = &pairs[i];
            let out = self.model.forward(&p.a, &p.b)?;
            let (loss, report) = total_loss(&out, &p.a, &p.b, &self.config.loss)?;
            losses.push(loss);
            reports.push(report);
        }
        let loss = mean_of(&losses)?;
        let report = mean_report(&reports);
        if !report.total.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        loss.backward()?;
        optimizer_step(&mut self.model.params, &mut self.optimizer, &self.config.optimizer)?;
        self.state.step += 1;
        self.state.epoch_loss_sum += report.total;
        self.state.epoch_batches += 1;
        if b + 1 == bpe {
            self.end_epoch();
        }
        let row = CurveRow {
            step: self.state.step,
            report,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.curve.push(row);
        Ok(row)
    }

    fn end_epoch(&mut self) {
        let mean = self.state.epoch_loss_sum / self.state.epoch_batches.max(1) as f64;
        self.state.epoch += 1;
        self.state.epoch_loss_sum = 0.0;
        self.state.epoch_batches = 0;
        match self.state.best_loss {
            Some(best) if mean >= best - self.config.min_delta * best.abs() => self.state.stale_epochs += 1,
            _ => {
                self.state.best_loss = Some(mean);
                self.state.stale_epochs = 0;
            }
        }
        if self.config.patience.is_some_and(|p| self.state.stale_epochs >= p) {
            self.state.stopped_early = true;
        }
    }

    pub fn finished(&self, n: usize) -> bool {
        let total = self.config.epochs * self.batches_per_epoch(n);
        let cap = self.config.max_steps.unwrap_or(u64::MAX).min(total);
        self.state.stopped_early || self.state.step >= cap
    }

    /// Trains to completion. With `out_dir`, appends to the loss curve CSV
    /// and writes checkpoints on the configured cadence and at the end.
    pub fn run(&mut self, pairs: &[TrainPair], out_dir: Option<&Path>) -> Result<TrainSummary> {
        let mut curve_file = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(CURVE_FILE);
                let fresh = self.state.step == 0 || !path.exists();
                let mut f = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .append(!fresh)
                    .truncate(fresh)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                if fresh {
                    writeln!(f, "{CURVE_HEADER}").map_err(|e| Error::io(&path, e))?;
                }
                Some((f, path))
            }
            None => None,
        };
        let first_step = self.curve.len();
        while !self.finished(pairs.len()) {
            let row = self.step(pairs)?;
            let r = row.report;
            log::info!("step {} total {:.6} ({:.0} ms)", row.step, r.total, row.wall_ms);
            if let Some((f, path)) = curve_file.as_mut() {
                writeln!(f, "{},{},{},{},{},{:.3}", row.step, r.content, r.grad, r.ssim, r.total, row.wall_ms)
                    .map_err(|e| Error::io(&*path, e))?;
            }
            if let Some(dir) = out_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && row.step % every == 0 {
                    self.checkpoint()?.write(&dir.join(format!("step-{:06}.adfz", row.step)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint()?.write(&dir.join(CHECKPOINT_FILE))?;
        }
        let run = &self.curve[first_step..];
        Ok(TrainSummary {
            steps: self.state.step,
            epochs: self.state.epoch,
            first_loss: run.first().map(|r| r.report.total),
            last_loss: run.last().map(|r| r.report.total),
            stopped_early: self.state.stopped_early,
        })
    }
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let avg = |g: fn(&LossReport) -> f64| reports.iter().map(g).sum::<f64>() / n;
    LossReport {
        content: avg(|r| r.content),
        grad: avg(|r| r.grad),
        ssim: avg(|r| r.ssim),
        total: avg(|r| r.total),
    }
}

/// Runs the model on a prepared pair and returns the fused image at the
/// original size (RGB when `color` is set and a source was colour).
pub fn fuse_prepared<T: Element>(model: &AdaFuseModel<T>, pair: &PreparedPair, color: bool) -> Result<Raster> {
    let out = model.forward(&pair.y_a.to_tensor()?, &pair.y_b.to_tensor()?)?;
    pair.finish(&Raster::from_tensor(&out)?, color)
}

/// Fused luminance at the original size, for scoring.
pub fn fuse_luminance<T: Element>(model: &AdaFuseModel<T>, pair: &PreparedPair) -> Result<Raster> {
    fuse_prepared(model, pair, false)
}
