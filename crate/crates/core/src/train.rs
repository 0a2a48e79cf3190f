//! Seeded training loop with a from-scratch Adam optimizer.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, DatasetManifest, FrameRecord, Split};
use crate::label::{ChainLabel, Level};
use crate::loss::{class_ids, shl_loss_with, ContrastiveBatch, ContrastiveLoss, LossError, ShlConfig, SupCon};
use crate::model::{
    finish_preprocess, resize_for_model, save_checkpoint, HeadCache, Model, ModelConfig, ModelError, ParamSet, PreprocessConfig,
};
use crate::raster::ImageBuffer;
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("the training split is empty")]
    EmptyTrainSplit,
    #[error("gradient layout does not match the parameters")]
    ShapeMismatch,
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("level {0} has no matching head in the model")]
    HeadLevelMismatch(Level),
    #[error("svc-level training needs context labels but no training record has an observed context")]
    NoContextLabels,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update in place. A non-finite gradient leaves
/// both parameters and state untouched.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut AdamState, config: &AdamConfig) -> Result<(), TrainError> {
    if !params.same_layout(grads)
        || state.m.len() != params.len()
        || state.m.iter().zip(&params.tensors).any(|(m, t)| m.len() != t.data.len())
    {
        return Err(TrainError::ShapeMismatch);
    }
    if !grads.is_finite() {
        return Err(TrainError::NonFiniteGradient);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (i, (p, g)) in params.tensors.iter_mut().zip(&grads.tensors).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.data.len() {
            let gj = g.data[j];
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p.data[j] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// A single svc head on which every loss level is computed.
    SingleTask,
    /// One head per loss level.
    MultiTask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub temperature: f64,
    pub levels: Vec<Level>,
    pub weights: Vec<f64>,
    pub seed: u64,
    pub architecture: Architecture,
    pub head_dim: usize,
    pub feature_dim: usize,
    pub conv_channels: [usize; 2],
    pub preprocess: PreprocessConfig,
    /// Write an intermediate checkpoint every this many epochs (0: never).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let shl = ShlConfig::three_level(0.1);
        Self {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            temperature: shl.temperature,
            levels: shl.levels,
            weights: shl.weights,
            seed: 0,
            architecture: Architecture::MultiTask,
            head_dim: 128,
            feature_dim: 256,
            conv_channels: [16, 32],
            preprocess: PreprocessConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn shl(&self) -> ShlConfig {
        ShlConfig {
            levels: self.levels.clone(),
            weights: self.weights.clone(),
            temperature: self.temperature,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut cfg = match self.architecture {
            Architecture::SingleTask => ModelConfig::single_task(self.preprocess, self.head_dim),
            Architecture::MultiTask => ModelConfig::multi_task(self.preprocess, &self.levels, self.head_dim),
        };
        cfg.feature_dim = self.feature_dim;
        cfg.conv_channels = self.conv_channels;
        cfg
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        self.shl().validate()?;
        self.model_config().validate()?;
        Ok(())
    }
}

/// Which head each loss level is computed on.
pub fn level_heads(model: &Model, shl: &ShlConfig) -> Result<Vec<Level>, TrainError> {
    let single = model.config().is_single_task();
    shl.levels
        .iter()
        .map(|&l| {
            if single {
                Ok(model.config().heads[0].level)
            } else {
                model.head_index(l).map(|_| l).map_err(|_| TrainError::HeadLevelMismatch(l))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    /// `(level, unweighted loss, skipped anchors)` in config order.
    pub levels: Vec<(Level, f64, usize)>,
    pub applied: bool,
}

/// Forward, loss, backward and one optimizer update on a preprocessed batch.
pub fn train_step(
    model: &mut Model,
    state: &mut AdamState,
    inputs: &Matrix,
    labels: &[ChainLabel],
    shl: &ShlConfig,
    adam: &AdamConfig,
    loss_fn: &dyn ContrastiveLoss,
) -> Result<StepReport, TrainError> {
    let heads_for = level_heads(model, shl)?;
    let cache = model.forward(inputs)?;
    let mut head_levels: Vec<Level> = Vec::new();
    for &h in &heads_for {
        if !head_levels.contains(&h) {
            head_levels.push(h);
        }
    }
    let head_caches: Vec<HeadCache> = head_levels
        .iter()
        .map(|&h| model.project(&cache.features, h))
        .collect::<Result<_, _>>()?;

    let batches: Vec<ContrastiveBatch> = shl
        .levels
        .iter()
        .zip(&heads_for)
        .map(|(&level, h)| {
            let hc = &head_caches[head_levels.iter().position(|x| x == h).unwrap()];
            let keys: Vec<_> = labels.iter().map(|l| l.key(level)).collect();
            ContrastiveBatch::new(hc.embeddings.clone(), class_ids(&keys), shl.temperature)
        })
        .collect::<Result<_, _>>()?;
    let pairs: Vec<(Level, &ContrastiveBatch)> = shl.levels.iter().copied().zip(batches.iter()).collect();
    let out = shl_loss_with(loss_fn, &pairs, shl)?;

    let mut head_grads: Vec<Matrix> = head_caches
        .iter()
        .map(|c| Matrix::zeros(c.embeddings.rows(), c.embeddings.cols()))
        .collect();
    for (lvl, h) in out.levels.iter().zip(&heads_for) {
        let g = &mut head_grads[head_levels.iter().position(|x| x == h).unwrap()];
        for (a, b) in g.data_mut().iter_mut().zip(lvl.output.grad.data()) {
            *a += b;
        }
    }
    let pairs: Vec<(&HeadCache, &Matrix)> = head_caches.iter().zip(head_grads.iter()).collect();
    let grads = model.backward(&cache, &pairs);
    let applied = match adam_step(model.params_mut(), &grads, state, adam) {
        Ok(()) => true,
        Err(TrainError::NonFiniteGradient) => {
            log::warn!("non-finite gradient, step skipped");
            false
        }
        Err(e) => return Err(e),
    };
    Ok(StepReport {
        loss: out.loss,
        levels: out
            .levels
            .iter()
            .map(|l| (l.level, l.output.loss, l.output.skipped_anchors))
            .collect(),
        applied,
    })
}

/// One row of the per-epoch loss log. `level` is a level name or `shl` for
/// the weighted total.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub level: String,
    pub loss: f64,
    pub skipped_anchors: usize,
}

pub fn format_log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("epoch,level,loss,skipped_anchors\n");
    for r in rows {
        writeln!(s, "{},{},{:.17e},{}", r.epoch, r.level, r.loss, r.skipped_anchors).unwrap();
    }
    s
}

/// Epoch-mean weighted loss per epoch, read back from a log.
pub fn epoch_losses(rows: &[LogRow]) -> Vec<f64> {
    rows.iter().filter(|r| r.level == "shl").map(|r| r.loss).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRow>,
    pub steps: u64,
}

/// Called after each epoch with the epoch number (1-based) and the model.
pub type EpochHook<'a> = dyn FnMut(usize, &Model) -> Result<(), TrainError> + 'a;

/// Trains on labelled images held in memory. Samples whose split is not
/// `Train` are ignored.
pub fn train_in_memory(
    records: &[FrameRecord],
    images: &[ImageBuffer],
    config: &TrainConfig,
    on_epoch: Option<&mut EpochHook<'_>>,
) -> Result<TrainOutcome, TrainError> {
    assert_eq!(records.len(), images.len(), "records and images must align");
    config.validate()?;
    let train: Vec<usize> = (0..records.len()).filter(|&i| records[i].split == Split::Train).collect();
    check_train_set(records, &train, config)?;
    let resized = train
        .iter()
        .map(|&i| resize_for_model(&images[i], &config.preprocess))
        .collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<ChainLabel> = train.iter().map(|&i| records[i].label.clone()).collect();
    run(&resized, &labels, config, on_epoch)
}

/// Trains from a manifest, writing `model.ckpt`, intermediate
/// `epoch_NNNN.ckpt` files and `metrics.csv` into `out_dir`.
pub fn train(manifest: &DatasetManifest, config: &TrainConfig, out_dir: impl AsRef<Path>) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    let train: Vec<usize> = (0..manifest.records.len())
        .filter(|&i| manifest.records[i].split == Split::Train)
        .collect();
    check_train_set(&manifest.records, &train, config)?;
    let mut resized = Vec::with_capacity(train.len());
    for &i in &train {
        let img = manifest.load_image(&manifest.records[i])?;
        resized.push(resize_for_model(&img, &config.preprocess)?);
    }
    let labels: Vec<ChainLabel> = train.iter().map(|&i| manifest.records[i].label.clone()).collect();
    let every = config.checkpoint_every;
    let total = config.epochs;
    let mut hook = |epoch: usize, model: &Model| {
        if every > 0 && epoch.is_multiple_of(every) && epoch < total {
            save_checkpoint(model, out_dir.join(format!("epoch_{epoch:04}.ckpt")))?;
        }
        Ok(())
    };
    let outcome = run(&resized, &labels, config, Some(&mut hook))?;
    save_checkpoint(&outcome.model, out_dir.join("model.ckpt"))?;
    let csv = out_dir.join("metrics.csv");
    std::fs::write(&csv, format_log_csv(&outcome.log)).map_err(|source| TrainError::Io { path: csv, source })?;
    Ok(outcome)
}

fn check_train_set(records: &[FrameRecord], train: &[usize], config: &TrainConfig) -> Result<(), TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyTrainSplit);
    }
    let wants_svc =
        config.levels.contains(&Level::Svc) && config.weights[config.levels.iter().position(|&l| l == Level::Svc).unwrap()] > 0.0;
    if wants_svc && !train.iter().any(|&i| records[i].context_observed) {
        return Err(TrainError::NoContextLabels);
    }
    Ok(())
}

fn run(
    resized: &[Vec<f64>],
    labels: &[ChainLabel],
    config: &TrainConfig,
    mut on_epoch: Option<&mut EpochHook<'_>>,
) -> Result<TrainOutcome, TrainError> {
    let mut model = Model::new(config.model_config(), config.seed)?;
    let shl = config.shl();
    level_heads(&model, &shl)?;
    let adam = config.adam();
    let mut state = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let n = resized.len();
    let dim = config.preprocess.input_len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::new();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut per_level = vec![(0.0, 0usize); shl.levels.len()];
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut inputs = Matrix::zeros(chunk.len(), dim);
            for (r, &i) in chunk.iter().enumerate() {
                inputs
                    .row_mut(r)
                    .copy_from_slice(&finish_preprocess(&resized[i], &config.preprocess, true, &mut rng));
            }
            let batch_labels: Vec<ChainLabel> = chunk.iter().map(|&i| labels[i].clone()).collect();
            let report = train_step(&mut model, &mut state, &inputs, &batch_labels, &shl, &adam, &SupCon)?;
            total += report.loss;
            for (acc, (_, l, skipped)) in per_level.iter_mut().zip(&report.levels) {
                acc.0 += l;
                acc.1 += skipped;
            }
            batches += 1;
        }
        if batches == 0 {
            return Err(TrainError::InvalidConfig("no batch of at least 2 samples could be formed".into()));
        }
        let nb = batches as f64;
        let mut skipped_total = 0;
        for (&level, (l, skipped)) in shl.levels.iter().zip(&per_level) {
            skipped_total += skipped;
            log.push(LogRow {
                epoch,
                level: level.to_string(),
                loss: l / nb,
                skipped_anchors: *skipped,
            });
        }
        log.push(LogRow {
            epoch,
            level: "shl".into(),
            loss: total / nb,
            skipped_anchors: skipped_total,
        });
        log::info!("epoch {epoch}: loss {:.6}", total / nb);
        if let Some(hook) = on_epoch.as_deref_mut() {
            hook(epoch, &model)?;
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        steps: state.step,
    })
}
