//! Subcommand bodies. Each resolves its settings, runs the core operation
//! and leaves the resolved config and provenance beside its output.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use uiwf_core::dataset::{format_stats, label_stats, load_manifest, save_manifest};
use uiwf_core::eval::{embed_images, evaluate, export_embeddings, EvalOptions};
use uiwf_core::model::load_checkpoint;
use uiwf_core::motion::{dedup_records, MotionConfig};
use uiwf_core::synth::augment_dataset;
use uiwf_core::train::Architecture;
use uiwf_core::{
    train, AssetDb, DatasetManifest, EmbeddingSet, FrameRecord, ImageBuffer, LabelRegistry, Level, Split, SynthConfig, TrainConfig,
};

use crate::args::{ArchitectureArg, Command, DedupArgs, EvalArgs, ExportArgs, GlobalOptions, SplitArg, StatsArgs, SynthArgs, TrainArgs};
use crate::output::{layered, parent_dir, read_config_file, write_run_files};

/// An invocation problem (bad flag combination or settings) rather than a
/// problem with the data; mapped to exit code 1.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

struct RunContext {
    config: Option<Value>,
    registry: LabelRegistry,
}

pub fn run(global: &GlobalOptions, command: &Command) -> Result<()> {
    let config = global
        .config
        .as_deref()
        .map(read_config_file)
        .transpose()
        .map_err(|e| UsageError(format!("{e:#}")))?;
    let registry = match &global.registry {
        Some(p) => LabelRegistry::load(p).with_context(|| format!("loading registry {}", p.display()))?,
        None => LabelRegistry::default(),
    };
    let ctx = RunContext { config, registry };
    match command {
        Command::Dedup(a) => dedup(global, &ctx, a),
        Command::Synth(a) => synth(global, &ctx, a),
        Command::Train(a) => train_cmd(global, &ctx, a),
        Command::Eval(a) => eval(global, &ctx, a),
        Command::Stats(a) => stats(global, &ctx, a),
        Command::ExportEmbeddings(a) => export(global, &ctx, a),
    }
}

fn settings<T: Serialize + for<'de> Deserialize<'de> + Default>(ctx: &RunContext) -> Result<T> {
    layered(ctx.config.as_ref()).map_err(|e| UsageError(format!("{e:#}")).into())
}

fn load(path: &Path, registry: &LabelRegistry) -> Result<DatasetManifest> {
    load_manifest(path, registry).with_context(|| format!("loading manifest {}", path.display()))
}

fn dedup(global: &GlobalOptions, ctx: &RunContext, a: &DedupArgs) -> Result<()> {
    let mut cfg: MotionConfig = settings(ctx)?;
    if let Some(tc) = a.tc {
        cfg.contour_area_threshold = tc;
    }
    if let Some(tb) = a.tb {
        cfg.binarize_threshold = tb;
    }
    if let Some(k) = a.kg {
        cfg.gaussian_kernel = (k, k);
    }
    if let Some(k) = a.kd {
        cfg.dilation_kernel = (k, k);
    }
    if let Err(e) = cfg.validate() {
        return usage(e.to_string());
    }
    let manifest = load(&a.input.join(&a.manifest_name), &ctx.registry)?;
    let kept = dedup_records(&manifest, &cfg)?;
    log::info!("kept {} of {} frames", kept.len(), manifest.len());
    let out_root = parent_dir(&a.out_manifest);
    std::fs::create_dir_all(out_root).with_context(|| format!("creating {}", out_root.display()))?;
    if !same_dir(&manifest.root, out_root) {
        for r in &kept {
            let dst = out_root.join(&r.image_path);
            if let Some(p) = dst.parent() {
                std::fs::create_dir_all(p)?;
            }
            std::fs::copy(manifest.image_path(r), &dst).with_context(|| format!("copying {}", r.image_path))?;
        }
    }
    let out = DatasetManifest::new(out_root, kept, &ctx.registry)?;
    save_manifest(&out, &a.out_manifest)?;
    write_run_files(out_root, "dedup", global.seed.unwrap_or(0), &cfg)
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SynthSettings {
    fraction: f64,
    seed: u64,
    #[serde(flatten)]
    generator: SynthConfig,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            fraction: 0.6666,
            seed: 0,
            generator: SynthConfig::default(),
        }
    }
}

fn synth(global: &GlobalOptions, ctx: &RunContext, a: &SynthArgs) -> Result<()> {
    let mut s: SynthSettings = settings(ctx)?;
    if let Some(f) = a.fraction {
        s.fraction = f;
    }
    s.seed = global.seed.unwrap_or(s.seed);
    let db = AssetDb::load(&a.assets, &ctx.registry).with_context(|| format!("loading assets {}", a.assets.display()))?;
    let manifest = load(&a.manifest, &ctx.registry)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (out, placements) = augment_dataset(&manifest, &ctx.registry, &db, &s.generator, s.fraction, s.seed, &a.out)?;
    log::info!("{} synthetic frames added to {} records", placements.len(), manifest.len());
    save_manifest(&out, a.out.join("manifest.jsonl"))?;
    let mut w = BufWriter::new(File::create(a.out.join("placements.jsonl"))?);
    for p in &placements {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    write_run_files(&a.out, "synth", s.seed, &s)
}

fn train_cmd(global: &GlobalOptions, ctx: &RunContext, a: &TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = settings(ctx)?;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.temperature {
        cfg.temperature = v;
    }
    if let Some(v) = &a.levels {
        cfg.levels = v.clone();
    }
    if let Some(v) = &a.weights {
        cfg.weights = v.clone();
    }
    if let Some(v) = a.architecture {
        cfg.architecture = match v {
            ArchitectureArg::SingleTask => Architecture::SingleTask,
            ArchitectureArg::MultiTask => Architecture::MultiTask,
        };
    }
    cfg.seed = global.seed.unwrap_or(cfg.seed);
    if let Err(e) = cfg.validate() {
        return usage(e.to_string());
    }
    let manifest = load(&a.manifest, &ctx.registry)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let outcome = train(&manifest, &cfg, &a.out)?;
    log::info!("{} optimizer steps", outcome.steps);
    write_run_files(&a.out, "train", cfg.seed, &cfg)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalSettings {
    levels: Vec<Level>,
    head: Level,
    seed: u64,
    batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let o = EvalOptions::default();
        Self {
            levels: o.levels,
            head: o.head,
            seed: o.seed,
            batch_size: o.batch_size,
        }
    }
}

fn eval(global: &GlobalOptions, ctx: &RunContext, a: &EvalArgs) -> Result<()> {
    let mut s: EvalSettings = settings(ctx)?;
    if let Some(v) = &a.levels {
        s.levels = v.clone();
    }
    if let Some(v) = a.head {
        s.head = v;
    }
    s.seed = global.seed.unwrap_or(s.seed);
    if s.levels.is_empty() || s.batch_size == 0 {
        return usage("eval needs at least one level and a positive batch size");
    }
    let model = load_checkpoint(&a.ckpt).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let manifest = load(&a.manifest, &ctx.registry)?;
    let opts = EvalOptions {
        levels: s.levels.clone(),
        head: s.head,
        seed: s.seed,
        batch_size: s.batch_size,
    };
    let result = evaluate(&model, &manifest, &opts)?;
    let dir = parent_dir(&a.out);
    std::fs::create_dir_all(dir)?;
    std::fs::write(&a.out, result.report.to_json()).with_context(|| format!("writing {}", a.out.display()))?;
    let mut table = format!("{:<5} {:>8} {:>8} {:>8} {:>8}\n", "level", "AMI", "P@1", "R-Prec", "mAP@R");
    for l in &result.report.levels {
        let _ = writeln!(
            table,
            "{:<5} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            l.level.as_str(),
            l.ami,
            l.precision_at_1,
            l.r_precision,
            l.map_at_r
        );
    }
    print!("{table}");
    write_run_files(dir, "eval", s.seed, &s)
}

fn split_filter(split: SplitArg) -> impl Fn(&&FrameRecord) -> bool {
    move |r| match split {
        SplitArg::All => true,
        SplitArg::Train => r.split == Split::Train,
        SplitArg::Test => r.split == Split::Test,
    }
}

fn split_name(split: SplitArg) -> &'static str {
    match split {
        SplitArg::All => "all",
        SplitArg::Train => "train",
        SplitArg::Test => "test",
    }
}

fn stats(global: &GlobalOptions, ctx: &RunContext, a: &StatsArgs) -> Result<()> {
    if ctx.config.as_ref().and_then(Value::as_object).is_some_and(|m| !m.is_empty()) {
        return usage("stats takes no config file settings");
    }
    let manifest = load(&a.manifest, &ctx.registry)?;
    let table = format_stats(&label_stats(manifest.records.iter().filter(split_filter(a.split)), a.level));
    print!("{table}");
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("stats.txt"), &table)?;
        let resolved = json!({"level": a.level, "split": split_name(a.split)});
        write_run_files(out, "stats", global.seed.unwrap_or(0), &resolved)?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExportSettings {
    batch_size: usize,
}

impl Default for ExportSettings {
    fn default() -> Self {
        Self {
            batch_size: EvalOptions::default().batch_size,
        }
    }
}

fn export(global: &GlobalOptions, ctx: &RunContext, a: &ExportArgs) -> Result<()> {
    let s: ExportSettings = settings(ctx)?;
    if s.batch_size == 0 {
        return usage("batch_size must be positive");
    }
    let model = load_checkpoint(&a.ckpt).with_context(|| format!("loading checkpoint {}", a.ckpt.display()))?;
    let manifest = load(&a.manifest, &ctx.registry)?;
    let records: Vec<FrameRecord> = manifest.records.iter().filter(split_filter(a.split)).cloned().collect();
    let images = records
        .iter()
        .map(|r| manifest.load_image(r))
        .collect::<Result<Vec<ImageBuffer>, _>>()?;
    let refs: Vec<&ImageBuffer> = images.iter().collect();
    let embeddings = embed_images(&model, &refs, a.head, s.batch_size)?;
    let set = EmbeddingSet {
        head: a.head,
        embeddings,
        labels: records.iter().map(|r| r.label.clone()).collect(),
    };
    export_embeddings(&set, &records, &a.out)?;
    let resolved = json!({"head": a.head, "split": split_name(a.split), "batch_size": s.batch_size});
    write_run_files(parent_dir(&a.out), "export-embeddings", global.seed.unwrap_or(0), &resolved)
}
