//! Frame manifests (JSON lines), splits and label statistics.
//!
//! A manifest lives in a directory; every `image_path` is relative to that
//! directory, conventionally `<video_id>/<frame_index>.png`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Component, Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label::{ChainLabel, LabelError, LabelRegistry, Level, LevelKey};
use crate::raster::{ImageBuffer, RasterError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("record {record}: {source}")]
    InvalidLabel {
        record: String,
        #[source]
        source: LabelError,
    },
    #[error("record {record}: {message}")]
    InvalidRecord { record: String, message: String },
    #[error("video {0:?} appears in both the train and the test split")]
    SplitOverlap(String),
    #[error("need at least two videos to split, found {0}")]
    TooFewVideos(usize),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One screenshot with its identity, label and provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub video_id: String,
    pub frame_index: u64,
    pub image_path: String,
    pub label: ChainLabel,
    pub context_observed: bool,
    pub synthetic: bool,
    pub split: Split,
}

impl FrameRecord {
    /// `video_id:frame_index`, with a `+synth` suffix for synthetic frames.
    pub fn id(&self) -> String {
        if self.synthetic {
            format!("{}:{}+synth", self.video_id, self.frame_index)
        } else {
            format!("{}:{}", self.video_id, self.frame_index)
        }
    }

    pub fn default_image_path(video_id: &str, frame_index: u64) -> String {
        format!("{video_id}/{frame_index}.png")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<FrameRecord>,
}

impl DatasetManifest {
    /// Builds a manifest and checks every invariant against `registry`.
    pub fn new(root: impl Into<PathBuf>, records: Vec<FrameRecord>, registry: &LabelRegistry) -> Result<Self, DatasetError> {
        let m = DatasetManifest {
            root: root.into(),
            records,
        };
        m.validate(registry)?;
        Ok(m)
    }

    pub fn validate(&self, registry: &LabelRegistry) -> Result<(), DatasetError> {
        let mut seen = HashSet::new();
        for r in &self.records {
            registry
                .check(&r.label)
                .map_err(|source| DatasetError::InvalidLabel { record: r.id(), source })?;
            if !seen.insert((r.video_id.as_str(), r.frame_index, r.synthetic)) {
                return Err(DatasetError::InvalidRecord {
                    record: r.id(),
                    message: "duplicate (video_id, frame_index, synthetic)".into(),
                });
            }
            if !is_contained_relative(&r.image_path) {
                return Err(DatasetError::InvalidRecord {
                    record: r.id(),
                    message: format!("image_path {:?} does not stay under the manifest root", r.image_path),
                });
            }
        }
        check_split_disjoint(&self.records)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_path(&self, record: &FrameRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }

    pub fn load_image(&self, record: &FrameRecord) -> Result<ImageBuffer, DatasetError> {
        Ok(ImageBuffer::load_png(self.image_path(record))?)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &FrameRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

fn is_contained_relative(p: &str) -> bool {
    let path = Path::new(p);
    !p.is_empty() && path.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

fn check_split_disjoint(records: &[FrameRecord]) -> Result<(), DatasetError> {
    let train: BTreeSet<&str> = records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.video_id.as_str())
        .collect();
    match records
        .iter()
        .find(|r| r.split == Split::Test && train.contains(r.video_id.as_str()))
    {
        Some(r) => Err(DatasetError::SplitOverlap(r.video_id.clone())),
        None => Ok(()),
    }
}

/// Reads a JSON-lines manifest. The manifest root is the file's directory.
pub fn load_manifest(path: impl AsRef<Path>, registry: &LabelRegistry) -> Result<DatasetManifest, DatasetError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: FrameRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::new(root, records, registry)
}

/// Writes one record per line. The caller places the file so that its
/// directory is the manifest root.
pub fn save_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in &manifest.records {
        serde_json::to_writer(&mut w, r).expect("records serialize");
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Test frames divided by whole videos into a retrieval database and a query set.
#[derive(Debug, Clone, PartialEq)]
pub struct DatabaseQuerySplit {
    pub database: Vec<FrameRecord>,
    pub query: Vec<FrameRecord>,
}

/// Above this many (videos × frames) cells the exact subset-sum search is
/// replaced by greedy largest-first packing.
const EXACT_SPLIT_BUDGET: usize = 50_000_000;

/// Splits test records by video id into two halves whose frame counts
/// differ as little as whole-video assignment allows.
///
/// Videos are ordered by size (largest first, ties by a seeded shuffle) and
/// an exact subset-sum search picks one half; the larger half becomes the
/// database.
pub fn split_database_query(test_records: &[FrameRecord], seed: u64) -> Result<DatabaseQuerySplit, DatasetError> {
    let (db, q) = split_database_query_indices(test_records, seed)?;
    Ok(DatabaseQuerySplit {
        database: db.iter().map(|&i| test_records[i].clone()).collect(),
        query: q.iter().map(|&i| test_records[i].clone()).collect(),
    })
}

/// Index form of [`split_database_query`]: positions into `test_records`
/// for the database and the query half, each in input order.
pub fn split_database_query_indices(test_records: &[FrameRecord], seed: u64) -> Result<(Vec<usize>, Vec<usize>), DatasetError> {
    let mut sizes: BTreeMap<&str, usize> = BTreeMap::new();
    for r in test_records {
        *sizes.entry(r.video_id.as_str()).or_default() += 1;
    }
    if sizes.len() < 2 {
        return Err(DatasetError::TooFewVideos(sizes.len()));
    }
    let mut videos: Vec<(&str, usize)> = sizes.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    videos.shuffle(&mut rng);
    videos.sort_by_key(|v| std::cmp::Reverse(v.1));

    let sizes: Vec<usize> = videos.iter().map(|v| v.1).collect();
    let total: usize = sizes.iter().sum();
    let side = if videos.len() * (total + 1) <= EXACT_SPLIT_BUDGET {
        balanced_subset(&sizes)
    } else {
        greedy_subset(&sizes)
    };
    let side_videos: HashSet<&str> = videos.iter().zip(&side).filter(|(_, &q)| q).map(|(v, _)| v.0).collect();

    let (side, rest): (Vec<usize>, Vec<usize>) =
        (0..test_records.len()).partition(|&i| side_videos.contains(test_records[i].video_id.as_str()));
    Ok(if side.len() > rest.len() { (side, rest) } else { (rest, side) })
}

/// Chooses a non-empty subset of `sizes[1..]` whose sum is closest to half
/// the total (ties prefer the smaller sum). Item 0 always stays out, so
/// both sides are non-empty.
fn balanced_subset(sizes: &[usize]) -> Vec<bool> {
    let total: usize = sizes.iter().sum();
    let n = sizes.len();
    // reach[i][s]: some subset of sizes[1..=i] sums to s
    let mut reach = vec![vec![false; total + 1]; n];
    reach[0][0] = true;
    for i in 1..n {
        let (prev, next) = reach.split_at_mut(i);
        let (prev, next) = (&prev[i - 1], &mut next[0]);
        for s in 0..=total {
            next[s] = prev[s] || (s >= sizes[i] && prev[s - sizes[i]]);
        }
    }
    let best = (1..=total)
        .filter(|&s| reach[n - 1][s])
        .min_by_key(|&s| (total.abs_diff(2 * s), s))
        .expect("at least one non-empty subset");
    let mut pick = vec![false; n];
    let mut s = best;
    for i in (1..n).rev() {
        if !reach[i - 1][s] {
            pick[i] = true;
            s -= sizes[i];
        }
    }
    debug_assert_eq!(s, 0);
    pick
}

fn greedy_subset(sizes: &[usize]) -> Vec<bool> {
    let (mut a, mut b) = (0usize, 0usize);
    let mut pick = vec![false; sizes.len()];
    for (i, &w) in sizes.iter().enumerate() {
        if i > 0 && b <= a {
            pick[i] = true;
            b += w;
        } else {
            a += w;
        }
    }
    pick
}

/// Percentage of records per class key at `level`.
pub fn label_stats<'a, I>(records: I, level: Level) -> BTreeMap<LevelKey, f64>
where
    I: IntoIterator<Item = &'a FrameRecord>,
{
    let mut counts: BTreeMap<LevelKey, usize> = BTreeMap::new();
    let mut total = 0usize;
    for r in records {
        *counts.entry(r.label.key(level)).or_default() += 1;
        total += 1;
    }
    counts.into_iter().map(|(k, c)| (k, 100.0 * c as f64 / total as f64)).collect()
}

/// Renders a statistics table as aligned text, largest class first.
pub fn format_stats(stats: &BTreeMap<LevelKey, f64>) -> String {
    let mut rows: Vec<_> = stats.iter().collect();
    rows.sort_by(|a, b| b.1.partial_cmp(a.1).unwrap().then_with(|| a.0.cmp(b.0)));
    let width = rows.iter().map(|(k, _)| k.to_string().len()).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}  {:>10}\n", "class", "percentage");
    for (k, p) in rows {
        let _ = writeln!(out, "{:<width$}  {:>10.2}", k.to_string(), p);
    }
    out
}
