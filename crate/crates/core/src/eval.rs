//! Retrieval and clustering metrics over embedding sets.
//!
//! Retrieval ranks database rows by dot product with the query (cosine
//! similarity for unit rows), ties going to the lower database index. Every
//! per-query score is averaged within the query's class and the class means
//! are averaged with equal weight.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::dataset::{split_database_query_indices, DatasetError, DatasetManifest, FrameRecord, Split};
use crate::label::{ChainLabel, Level, LevelKey};
use crate::model::{preprocess, EmbeddingSet, Model, ModelError};
use crate::raster::ImageBuffer;
use crate::tensor::{dot, Matrix};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k = {k} exceeds the {n} available items")]
    KTooLarge { k: usize, n: usize },
    #[error("partitions have {0} and {1} items")]
    LengthMismatch(usize, usize),
    #[error("embedding dims differ: database {0}, query {1}")]
    DimMismatch(usize, usize),
    #[error("keys ({keys}) and rows ({rows}) are misaligned")]
    KeyCount { keys: usize, rows: usize },
    #[error("svc-level evaluation needs context labels; record {0} has none")]
    MissingContext(String),
    #[error("no test records to evaluate")]
    NoTestRecords,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Database rows ranked for `query`, best first, truncated to `k`.
pub fn knn_retrieve(database: &Matrix, query: &[f64], k: usize) -> Result<Vec<usize>, EvalError> {
    if k > database.rows() {
        return Err(EvalError::KTooLarge { k, n: database.rows() });
    }
    let mut ranked = rank_all(database, query);
    ranked.truncate(k);
    Ok(ranked)
}

fn rank_all(database: &Matrix, query: &[f64]) -> Vec<usize> {
    let sims: Vec<f64> = (0..database.rows()).map(|i| dot(database.row(i), query)).collect();
    let mut idx: Vec<usize> = (0..database.rows()).collect();
    idx.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    idx
}

/// Query and database embeddings with their class keys at one level.
#[derive(Debug, Clone)]
pub struct RetrievalIndex<K> {
    pub database: Matrix,
    pub database_keys: Vec<K>,
    pub queries: Matrix,
    pub query_keys: Vec<K>,
}

impl<K: Ord + Clone> RetrievalIndex<K> {
    pub fn new(database: Matrix, database_keys: Vec<K>, queries: Matrix, query_keys: Vec<K>) -> Result<Self, EvalError> {
        if database.cols() != queries.cols() {
            return Err(EvalError::DimMismatch(database.cols(), queries.cols()));
        }
        if database_keys.len() != database.rows() {
            return Err(EvalError::KeyCount {
                keys: database_keys.len(),
                rows: database.rows(),
            });
        }
        if query_keys.len() != queries.rows() {
            return Err(EvalError::KeyCount {
                keys: query_keys.len(),
                rows: queries.rows(),
            });
        }
        Ok(Self {
            database,
            database_keys,
            queries,
            query_keys,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryScores {
    pub precision_at_1: f64,
    pub r_precision: f64,
    pub map_at_r: f64,
    /// Nearest database neighbour.
    pub nearest: usize,
}

/// Scores for one query given its full ranking; `None` when the database
/// holds no reference of the query's class.
pub fn score_ranking<K: PartialEq>(ranking: &[usize], database_keys: &[K], key: &K) -> Option<QueryScores> {
    let r = database_keys.iter().filter(|k| *k == key).count();
    if r == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (i, &d) in ranking[..r].iter().enumerate() {
        if &database_keys[d] == key {
            hits += 1;
            ap += hits as f64 / (i + 1) as f64;
        }
    }
    Some(QueryScores {
        precision_at_1: if &database_keys[ranking[0]] == key { 1.0 } else { 0.0 },
        r_precision: hits as f64 / r as f64,
        map_at_r: ap / r as f64,
        nearest: ranking[0],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScore {
    pub queries: usize,
    pub precision_at_1: f64,
    pub r_precision: f64,
    pub map_at_r: f64,
}

/// Per-class and macro-averaged retrieval scores.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalScores<K> {
    pub per_class: BTreeMap<K, ClassScore>,
    pub precision_at_1: f64,
    pub r_precision: f64,
    pub map_at_r: f64,
    /// Queries without any same-class database reference.
    pub skipped_queries: usize,
    /// Query classes excluded because none of their queries could be scored.
    pub skipped_classes: usize,
    /// Nearest database row per query (`None` for skipped queries).
    pub nearest: Vec<Option<usize>>,
}

pub fn retrieval_scores<K: Ord + Clone>(index: &RetrievalIndex<K>) -> RetrievalScores<K> {
    let mut sums: BTreeMap<K, (usize, f64, f64, f64)> = BTreeMap::new();
    let mut classes: BTreeSet<K> = BTreeSet::new();
    let mut skipped = 0;
    let mut nearest = Vec::with_capacity(index.queries.rows());
    for q in 0..index.queries.rows() {
        let key = &index.query_keys[q];
        classes.insert(key.clone());
        let ranking = rank_all(&index.database, index.queries.row(q));
        match score_ranking(&ranking, &index.database_keys, key) {
            Some(s) => {
                let e = sums.entry(key.clone()).or_default();
                e.0 += 1;
                e.1 += s.precision_at_1;
                e.2 += s.r_precision;
                e.3 += s.map_at_r;
                nearest.push(Some(s.nearest));
            }
            None => {
                skipped += 1;
                nearest.push(None);
            }
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} queries have no same-class database reference and were skipped");
    }
    let per_class: BTreeMap<K, ClassScore> = sums
        .into_iter()
        .map(|(k, (n, p, r, m))| {
            let nf = n as f64;
            (
                k,
                ClassScore {
                    queries: n,
                    precision_at_1: p / nf,
                    r_precision: r / nf,
                    map_at_r: m / nf,
                },
            )
        })
        .collect();
    let c = per_class.len() as f64;
    let avg = |f: fn(&ClassScore) -> f64| if c > 0.0 { per_class.values().map(f).sum::<f64>() / c } else { 0.0 };
    RetrievalScores {
        precision_at_1: avg(|s| s.precision_at_1),
        r_precision: avg(|s| s.r_precision),
        map_at_r: avg(|s| s.map_at_r),
        skipped_queries: skipped,
        skipped_classes: classes.len() - per_class.len(),
        per_class,
        nearest,
    }
}

pub fn precision_at_1<K: Ord + Clone>(index: &RetrievalIndex<K>) -> f64 {
    retrieval_scores(index).precision_at_1
}

pub fn r_precision<K: Ord + Clone>(index: &RetrievalIndex<K>) -> f64 {
    retrieval_scores(index).r_precision
}

pub fn map_at_r<K: Ord + Clone>(index: &RetrievalIndex<K>) -> f64 {
    retrieval_scores(index).map_at_r
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub n_init: usize,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { n_init: 10, max_iter: 300 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn kmeans(data: &Matrix, k: usize, seed: u64) -> Result<KMeansResult, EvalError> {
    kmeans_with(data, k, seed, &KMeansConfig::default())
}

/// Best of `n_init` k-means++-seeded Lloyd runs by inertia.
pub fn kmeans_with(data: &Matrix, k: usize, seed: u64, config: &KMeansConfig) -> Result<KMeansResult, EvalError> {
    let n = data.rows();
    if k > n || k == 0 {
        return Err(EvalError::KTooLarge { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..config.n_init.max(1) {
        let run = lloyd(data, plus_plus(data, k, &mut rng), config.max_iter);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

fn plus_plus(data: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = data.rows();
    let mut centroids = Matrix::zeros(k, data.cols());
    centroids.row_mut(0).copy_from_slice(data.row(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(data.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), centroids.row(c)));
        }
    }
    centroids
}

fn lloyd(data: &Matrix, mut centroids: Matrix, max_iter: usize) -> KMeansResult {
    let (n, dim, k) = (data.rows(), data.cols(), centroids.rows());
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let best = nearest_centroid(data.row(i), &centroids).0;
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // reseed from the point farthest from its current centroid
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(data.row(a), centroids.row(assign[a]))
                            .total_cmp(&sq_dist(data.row(b), centroids.row(assign[b])))
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                let old = assign[far];
                counts[old] -= 1;
                for (s, v) in sums.row_mut(old).iter_mut().zip(data.row(far)) {
                    *s -= v;
                }
                assign[far] = c;
                counts[c] = 1;
                sums.row_mut(c).copy_from_slice(data.row(far));
            }
        }
        for (c, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / cnt as f64;
                }
            }
        }
    }
    let mut inertia = 0.0;
    for (i, a) in assign.iter_mut().enumerate() {
        let (best, d) = nearest_centroid(data.row(i), &centroids);
        *a = best;
        inertia += d;
    }
    KMeansResult {
        assignments: assign,
        centroids,
        inertia,
    }
}

fn nearest_centroid(x: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(x, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Dense cluster ids for arbitrary keys, in sorted key order.
pub fn partition_from_keys<K: Ord + Clone>(keys: &[K]) -> Vec<usize> {
    let ids: BTreeMap<K, usize> = keys
        .iter()
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, k)| (k, i))
        .collect();
    keys.iter().map(|k| ids[k]).collect()
}

fn counts(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut m = BTreeMap::new();
    for &l in labels {
        *m.entry(l).or_insert(0) += 1;
    }
    m
}

fn entropy(c: &BTreeMap<usize, usize>, n: f64) -> f64 {
    c.values().map(|&x| x as f64 / n).map(|p| -p * p.ln()).sum()
}

/// Adjusted mutual information with arithmetic-mean normalization and the
/// hypergeometric expected MI. Natural log.
pub fn ami(u: &[usize], v: &[usize]) -> Result<f64, EvalError> {
    if u.len() != v.len() {
        return Err(EvalError::LengthMismatch(u.len(), v.len()));
    }
    let n = u.len();
    if n == 0 {
        return Ok(0.0);
    }
    let nf = n as f64;
    let (a, b) = (counts(u), counts(v));
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&x, &y) in u.iter().zip(v) {
        *joint.entry((x, y)).or_insert(0) += 1;
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &nij)| {
            let nij = nij as f64;
            nij / nf * (nf * nij / (a[&x] as f64 * b[&y] as f64)).ln()
        })
        .sum();
    let emi = expected_mutual_information(
        &a.values().copied().collect::<Vec<_>>(),
        &b.values().copied().collect::<Vec<_>>(),
        n,
    );
    let denom = 0.5 * (entropy(&a, nf) + entropy(&b, nf)) - emi;
    if denom.abs() < 1e-12 {
        return Ok(0.0);
    }
    Ok((mi - emi) / denom)
}

/// Expected MI of two partitions with the given marginals under random
/// permutation (hypergeometric cell counts).
pub fn expected_mutual_information(a: &[usize], b: &[usize], n: usize) -> f64 {
    let mut lf = vec![0.0f64; n + 1];
    for i in 1..=n {
        lf[i] = lf[i - 1] + (i as f64).ln();
    }
    let nf = n as f64;
    let mut emi = 0.0;
    for &ai in a {
        for &bj in b {
            let lo = (ai + bj).saturating_sub(n).max(1);
            let hi = ai.min(bj);
            for nij in lo..=hi {
                let term = nij as f64 / nf * (nf * nij as f64 / (ai as f64 * bj as f64)).ln();
                let log_p =
                    lf[ai] + lf[bj] + lf[n - ai] + lf[n - bj] - lf[n] - lf[nij] - lf[ai - nij] - lf[bj - nij] - lf[n + nij - ai - bj];
                emi += term * log_p.exp();
            }
        }
    }
    emi
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub class: String,
    pub queries: usize,
    pub precision_at_1: f64,
    pub r_precision: f64,
    pub map_at_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelReport {
    pub level: Level,
    pub ami: f64,
    pub precision_at_1: f64,
    pub r_precision: f64,
    pub map_at_r: f64,
    pub clusters: usize,
    pub queries: usize,
    pub database: usize,
    pub skipped_queries: usize,
    pub skipped_classes: usize,
    pub per_class: Vec<ClassReport>,
}

/// Evaluation results, one block per requested level, all computed from
/// the embeddings of a single head.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub head: Level,
    pub levels: Vec<LevelReport>,
}

impl MetricsReport {
    pub fn level(&self, level: Level) -> Option<&LevelReport> {
        self.levels.iter().find(|l| l.level == level)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub levels: Vec<Level>,
    pub head: Level,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            levels: Level::ALL.to_vec(),
            head: Level::Svc,
            seed: 0,
            batch_size: 64,
        }
    }
}

/// Unit-norm embeddings of `images` through `head`, without augmentation.
pub fn embed_images(model: &Model, images: &[&ImageBuffer], head: Level, batch_size: usize) -> Result<Matrix, EvalError> {
    model.head_index(head)?;
    let pc = model.config().preprocess;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out: Option<Matrix> = None;
    let mut row = 0;
    for chunk in images.chunks(batch_size.max(1)) {
        let mut x = Matrix::zeros(chunk.len(), pc.input_len());
        for (r, img) in chunk.iter().enumerate() {
            x.row_mut(r).copy_from_slice(&preprocess(img, &pc, false, &mut rng)?);
        }
        let e = model.embed(&x, head)?;
        let out = out.get_or_insert_with(|| Matrix::zeros(images.len(), e.cols()));
        for r in 0..e.rows() {
            out.row_mut(row).copy_from_slice(e.row(r));
            row += 1;
        }
    }
    Ok(out.unwrap_or_else(|| Matrix::zeros(0, 0)))
}

/// Per-query predictions of an evaluated level: query record index and the
/// label of its nearest database neighbour.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub query: usize,
    pub predicted: ChainLabel,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Nearest-neighbour predictions at the finest requested level.
    pub predictions: Vec<Prediction>,
}

/// Embeds every test record, splits them into database and query halves by
/// video and scores each requested level.
pub fn evaluate_in_memory(
    model: &Model,
    records: &[FrameRecord],
    images: &[ImageBuffer],
    options: &EvalOptions,
) -> Result<Evaluation, EvalError> {
    assert_eq!(records.len(), images.len(), "records and images must align");
    let test: Vec<usize> = (0..records.len()).filter(|&i| records[i].split == Split::Test).collect();
    if test.is_empty() {
        return Err(EvalError::NoTestRecords);
    }
    if options.levels.contains(&Level::Svc) {
        if let Some(&i) = test.iter().find(|&&i| !records[i].context_observed) {
            return Err(EvalError::MissingContext(records[i].id()));
        }
    }
    let test_records: Vec<FrameRecord> = test.iter().map(|&i| records[i].clone()).collect();
    let test_images: Vec<&ImageBuffer> = test.iter().map(|&i| &images[i]).collect();
    let emb = embed_images(model, &test_images, options.head, options.batch_size)?;
    score_embeddings(
        &EmbeddingSet {
            head: options.head,
            embeddings: emb,
            labels: test_records.iter().map(|r| r.label.clone()).collect(),
        },
        &test_records,
        options,
    )
    .map(|mut e| {
        for p in &mut e.predictions {
            p.query = test[p.query];
        }
        e
    })
}

/// Scores precomputed embeddings aligned with `records` (all test records).
pub fn score_embeddings(set: &EmbeddingSet, records: &[FrameRecord], options: &EvalOptions) -> Result<Evaluation, EvalError> {
    let (db, q) = split_database_query_indices(records, options.seed)?;
    let database = set.embeddings.select_rows(&db);
    let queries = set.embeddings.select_rows(&q);
    let mut levels = Vec::new();
    let mut predictions = Vec::new();
    let finest = options.levels.iter().copied().max();
    for &level in &options.levels {
        let keys: Vec<LevelKey> = set.labels.iter().map(|l| l.key(level)).collect();
        let index = RetrievalIndex::new(
            database.clone(),
            db.iter().map(|&i| keys[i].clone()).collect(),
            queries.clone(),
            q.iter().map(|&i| keys[i].clone()).collect(),
        )?;
        let scores = retrieval_scores(&index);
        let truth = partition_from_keys(&keys);
        let k = truth.iter().collect::<BTreeSet<_>>().len();
        let clusters = kmeans(&set.embeddings, k, options.seed)?;
        let ami_value = ami(&truth, &clusters.assignments)?;
        if Some(level) == finest {
            predictions = q
                .iter()
                .zip(&scores.nearest)
                .filter_map(|(&qi, nn)| {
                    nn.map(|d| Prediction {
                        query: qi,
                        predicted: set.labels[db[d]].clone(),
                    })
                })
                .collect();
        }
        levels.push(LevelReport {
            level,
            ami: ami_value,
            precision_at_1: scores.precision_at_1,
            r_precision: scores.r_precision,
            map_at_r: scores.map_at_r,
            clusters: k,
            queries: q.len(),
            database: db.len(),
            skipped_queries: scores.skipped_queries,
            skipped_classes: scores.skipped_classes,
            per_class: scores
                .per_class
                .iter()
                .map(|(key, s)| ClassReport {
                    class: key.to_string(),
                    queries: s.queries,
                    precision_at_1: s.precision_at_1,
                    r_precision: s.r_precision,
                    map_at_r: s.map_at_r,
                })
                .collect(),
        });
    }
    Ok(Evaluation {
        report: MetricsReport { head: set.head, levels },
        predictions,
    })
}

/// File-backed [`evaluate_in_memory`] over the manifest's test split.
pub fn evaluate(model: &Model, manifest: &DatasetManifest, options: &EvalOptions) -> Result<Evaluation, EvalError> {
    let mut records = Vec::new();
    let mut images = Vec::new();
    for r in manifest.split(Split::Test) {
        images.push(manifest.load_image(r)?);
        records.push(r.clone());
    }
    evaluate_in_memory(model, &records, &images, options)
}

#[derive(Debug, Clone, Serialize)]
struct ExportSidecar<'a> {
    head: Level,
    rows: usize,
    dim: usize,
    dtype: &'static str,
    byte_order: &'static str,
    records: Vec<ExportRow<'a>>,
}

#[derive(Debug, Clone, Serialize)]
struct ExportRow<'a> {
    id: String,
    software: &'a str,
    view: &'a str,
    context: &'a str,
    split: Split,
}

/// Writes `<stem>.bin` (row-major little-endian f64) and `<stem>.json`
/// (shape, dtype and one label entry per row).
pub fn export_embeddings(set: &EmbeddingSet, records: &[FrameRecord], out_stem: impl AsRef<Path>) -> Result<(), EvalError> {
    let stem = out_stem.as_ref();
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| EvalError::Io { path, source }
    };
    if let Some(parent) = stem.parent() {
        std::fs::create_dir_all(parent).map_err(io(parent))?;
    }
    let bin = stem.with_extension("bin");
    let bytes: Vec<u8> = set.embeddings.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(&bin, bytes).map_err(io(&bin))?;
    let sidecar = ExportSidecar {
        head: set.head,
        rows: set.embeddings.rows(),
        dim: set.embeddings.cols(),
        dtype: "f64",
        byte_order: "little",
        records: records
            .iter()
            .map(|r| ExportRow {
                id: r.id(),
                software: &r.label.software,
                view: &r.label.view,
                context: r.label.context.as_str(),
                split: r.split,
            })
            .collect(),
    };
    let json = stem.with_extension("json");
    std::fs::write(&json, serde_json::to_string_pretty(&sidecar).expect("sidecar serializes")).map_err(io(&json))?;
    Ok(())
}
