//! Supervised contrastive loss and its weighted multi-level sum, with
//! analytic gradients with respect to the embedding rows.
//!
//! For anchor `i` with positives `P_i` (other samples sharing its class) the
//! term is `logsumexp_{a≠i}(s_ia) − mean_{p∈P_i}(s_ip)` where
//! `s_ia = f_i·f_a / τ`. The log-sum-exp subtracts the per-anchor maximum,
//! which is exact. Anchors without positives contribute nothing and are
//! counted as skipped. The optimized value is the raw sum over anchors.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::label::Level;
use crate::tensor::{dot, Matrix};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("a contrastive batch needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("{classes} class ids for {rows} embedding rows")]
    LengthMismatch { rows: usize, classes: usize },
    #[error("embeddings contain non-finite values")]
    NonFinite,
    #[error("level {0} is configured but no batch was supplied for it")]
    MissingLevel(Level),
    #[error("batch supplied for level {0} which is not configured")]
    UnexpectedLevel(Level),
    #[error("level {level} has {got} samples, expected {expected}")]
    SampleCountMismatch { level: Level, expected: usize, got: usize },
    #[error("weight for level {0} must be finite and non-negative")]
    BadWeight(Level),
    #[error("at least one level is required")]
    NoLevels,
    #[error("{weights} weights for {levels} levels")]
    WeightCountMismatch { levels: usize, weights: usize },
}

/// Embeddings (one row per sample), integer class ids and temperature.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    embeddings: Matrix,
    classes: Vec<usize>,
    temperature: f64,
}

impl ContrastiveBatch {
    pub fn new(embeddings: Matrix, classes: Vec<usize>, temperature: f64) -> Result<Self, LossError> {
        if embeddings.rows() < 2 {
            return Err(LossError::TooFewSamples(embeddings.rows()));
        }
        if classes.len() != embeddings.rows() {
            return Err(LossError::LengthMismatch {
                rows: embeddings.rows(),
                classes: classes.len(),
            });
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(LossError::BadTemperature(temperature));
        }
        if !embeddings.is_finite() {
            return Err(LossError::NonFinite);
        }
        Ok(Self {
            embeddings,
            classes,
            temperature,
        })
    }

    /// Builds a batch from arbitrary class keys; ids follow first appearance.
    pub fn from_keys<K: Eq + Hash>(embeddings: Matrix, keys: &[K], temperature: f64) -> Result<Self, LossError> {
        Self::new(embeddings, class_ids(keys), temperature)
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Maps keys to dense ids in order of first appearance.
pub fn class_ids<K: Eq + Hash>(keys: &[K]) -> Vec<usize> {
    let mut seen: HashMap<&K, usize> = HashMap::new();
    keys.iter()
        .map(|k| {
            let next = seen.len();
            *seen.entry(k).or_insert(next)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Raw sum over contributing anchors; this is the optimized value.
    pub loss: f64,
    /// `loss` divided by the number of contributing anchors (0 if none).
    pub mean: f64,
    pub skipped_anchors: usize,
    pub grad: Matrix,
}

/// Loss plug-in contract used by the trainer.
pub trait ContrastiveLoss {
    fn evaluate(&self, batch: &ContrastiveBatch) -> LossOutput;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SupCon;

impl ContrastiveLoss for SupCon {
    fn evaluate(&self, batch: &ContrastiveBatch) -> LossOutput {
        supcon_loss(batch)
    }
}

pub fn supcon_loss(batch: &ContrastiveBatch) -> LossOutput {
    let f = &batch.embeddings;
    let (n, d) = (f.rows(), f.cols());
    let inv_t = 1.0 / batch.temperature;

    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for a in i..n {
            let s = dot(f.row(i), f.row(a)) * inv_t;
            sim[i * n + a] = s;
            sim[a * n + i] = s;
        }
    }

    let mut grad = Matrix::zeros(n, d);
    let mut loss = 0.0;
    let mut anchors = 0usize;
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let ci = batch.classes[i];
        let positives = (0..n).filter(|&p| p != i && batch.classes[p] == ci).count();
        if positives == 0 {
            continue;
        }
        anchors += 1;
        let row = &sim[i * n..(i + 1) * n];
        let m = (0..n).filter(|&a| a != i).map(|a| row[a]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).filter(|&a| a != i).map(|a| (row[a] - m).exp()).sum();
        let lse = m + z.ln();
        let inv_p = 1.0 / positives as f64;
        let mut pos_mean = 0.0;
        for a in 0..n {
            if a == i {
                weights[a] = 0.0;
                continue;
            }
            let is_pos = batch.classes[a] == ci;
            if is_pos {
                pos_mean += row[a];
            }
            weights[a] = (row[a] - m).exp() / z - if is_pos { inv_p } else { 0.0 };
        }
        loss += lse - pos_mean * inv_p;

        for (a, &w) in weights.iter().enumerate() {
            if a == i || w == 0.0 {
                continue;
            }
            let k = w * inv_t;
            for c in 0..d {
                let fa = f.get(a, c);
                let fi = f.get(i, c);
                grad.row_mut(i)[c] += k * fa;
                grad.row_mut(a)[c] += k * fi;
            }
        }
    }

    LossOutput {
        loss,
        mean: if anchors > 0 { loss / anchors as f64 } else { 0.0 },
        skipped_anchors: n - anchors,
        grad,
    }
}

/// Levels and weights of the split hierarchy objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShlConfig {
    pub levels: Vec<Level>,
    pub weights: Vec<f64>,
    pub temperature: f64,
}

impl ShlConfig {
    pub fn new(levels: Vec<Level>, weights: Vec<f64>, temperature: f64) -> Result<Self, LossError> {
        let cfg = Self {
            levels,
            weights,
            temperature,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn svc_only(temperature: f64) -> Self {
        Self {
            levels: vec![Level::Svc],
            weights: vec![1.0],
            temperature,
        }
    }

    pub fn two_level(temperature: f64) -> Self {
        Self {
            levels: vec![Level::Sv, Level::Svc],
            weights: vec![0.5, 0.5],
            temperature,
        }
    }

    pub fn three_level(temperature: f64) -> Self {
        Self {
            levels: vec![Level::S, Level::Sv, Level::Svc],
            weights: vec![0.2, 0.4, 0.4],
            temperature,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if self.levels.is_empty() {
            return Err(LossError::NoLevels);
        }
        if self.weights.len() != self.levels.len() {
            return Err(LossError::WeightCountMismatch {
                levels: self.levels.len(),
                weights: self.weights.len(),
            });
        }
        for (i, &l) in self.levels.iter().enumerate() {
            if self.levels[..i].contains(&l) {
                return Err(LossError::UnexpectedLevel(l));
            }
            if !(self.weights[i] >= 0.0 && self.weights[i].is_finite()) {
                return Err(LossError::BadWeight(l));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(LossError::BadTemperature(self.temperature));
        }
        Ok(())
    }

    pub fn weight(&self, level: Level) -> Option<f64> {
        self.levels.iter().position(|&l| l == level).map(|i| self.weights[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelLoss {
    pub level: Level,
    pub weight: f64,
    pub output: LossOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShlOutput {
    pub loss: f64,
    /// One entry per configured level, in config order. Gradients here are
    /// already scaled by the level weight.
    pub levels: Vec<LevelLoss>,
}

/// Weighted sum of per-level contrastive losses. `batches` must hold exactly
/// one batch per configured level, each with the same sample count.
pub fn shl_loss(batches: &[(Level, &ContrastiveBatch)], config: &ShlConfig) -> Result<ShlOutput, LossError> {
    shl_loss_with(&SupCon, batches, config)
}

pub fn shl_loss_with(
    loss_fn: &dyn ContrastiveLoss,
    batches: &[(Level, &ContrastiveBatch)],
    config: &ShlConfig,
) -> Result<ShlOutput, LossError> {
    config.validate()?;
    for (level, _) in batches {
        if config.weight(*level).is_none() {
            return Err(LossError::UnexpectedLevel(*level));
        }
    }
    let mut expected = None;
    let mut total = 0.0;
    let mut levels = Vec::with_capacity(config.levels.len());
    for (&level, &weight) in config.levels.iter().zip(&config.weights) {
        let batch = batches
            .iter()
            .find(|(l, _)| *l == level)
            .map(|(_, b)| *b)
            .ok_or(LossError::MissingLevel(level))?;
        let n = *expected.get_or_insert(batch.len());
        if batch.len() != n {
            return Err(LossError::SampleCountMismatch {
                level,
                expected: n,
                got: batch.len(),
            });
        }
        let mut output = loss_fn.evaluate(batch);
        output.grad.scale(weight);
        total += weight * output.loss;
        levels.push(LevelLoss { level, weight, output });
    }
    Ok(ShlOutput { loss: total, levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Literal transcription of the per-anchor formula, no stabilization.
    fn oracle(f: &[Vec<f64>], classes: &[usize], tau: f64) -> f64 {
        let n = f.len();
        let sim = |i: usize, j: usize| f[i].iter().zip(&f[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
        let mut total = 0.0;
        for i in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&p| p != i && classes[p] == classes[i]).collect();
            if pos.is_empty() {
                continue;
            }
            let denom: f64 = (0..n).filter(|&a| a != i).map(|a| sim(i, a).exp()).sum();
            let s: f64 = pos.iter().map(|&p| -(sim(i, p).exp() / denom).ln()).sum();
            total += s / pos.len() as f64;
        }
        total
    }

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let nrm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-3);
                v.into_iter().map(|x| x / nrm).collect()
            })
            .collect()
    }

    fn batch(rows: &[Vec<f64>], classes: &[usize], tau: f64) -> ContrastiveBatch {
        ContrastiveBatch::new(Matrix::from_rows(rows), classes.to_vec(), tau).unwrap()
    }

    #[test]
    fn two_same_class_samples_give_zero() {
        let out = supcon_loss(&batch(&[vec![1.0, 0.0], vec![0.6, 0.8]], &[3, 3], 0.1));
        assert!(out.loss.abs() < 1e-12);
        assert_eq!(out.skipped_anchors, 0);
    }

    #[test]
    fn identical_embeddings_give_n_log_n_minus_one() {
        for tau in [0.05, 0.1, 1.0, 7.0] {
            let rows = vec![vec![0.6, 0.8]; 4];
            let out = supcon_loss(&batch(&rows, &[0; 4], tau));
            assert!((out.loss - 4.0 * 3f64.ln()).abs() < 1e-9);
            assert!((out.mean - 3f64.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn square_fixture_regression() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0], vec![0.0, -1.0]];
        let classes = [0, 0, 1, 1];
        // frozen from `oracle` on this fixture
        const EXPECTED: f64 = 2.7726795210687447;
        assert!((oracle(&rows, &classes, 0.1) - EXPECTED).abs() < 1e-12);
        assert!((supcon_loss(&batch(&rows, &classes, 0.1)).loss - EXPECTED).abs() < 1e-12);
    }

    #[test]
    fn anchors_without_positives_are_skipped() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]];
        let out = supcon_loss(&batch(&rows, &[0, 1, 1], 0.5));
        assert_eq!(out.skipped_anchors, 1);
        assert!((out.loss - oracle(&rows, &[0, 1, 1], 0.5)).abs() < 1e-12);
        let all_singletons = supcon_loss(&batch(&rows, &[0, 1, 2], 0.5));
        assert_eq!((all_singletons.loss, all_singletons.skipped_anchors), (0.0, 3));
        assert!(all_singletons.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn batch_errors() {
        assert_eq!(
            ContrastiveBatch::new(Matrix::zeros(1, 2), vec![0], 0.1).unwrap_err(),
            LossError::TooFewSamples(1)
        );
        assert!(matches!(
            ContrastiveBatch::new(Matrix::zeros(2, 2), vec![0, 0], 0.0),
            Err(LossError::BadTemperature(_))
        ));
        assert_eq!(
            ContrastiveBatch::new(Matrix::from_vec(2, 1, vec![f64::NAN, 1.0]), vec![0, 0], 0.1).unwrap_err(),
            LossError::NonFinite
        );
        assert!(ContrastiveBatch::new(Matrix::zeros(2, 2), vec![0], 0.1).is_err());
    }

    #[test]
    fn large_similarities_stay_finite() {
        let rows = vec![vec![1.0], vec![1.0], vec![-1.0]];
        let out = supcon_loss(&batch(&rows, &[0, 0, 1], 1e-3));
        assert!(out.loss.is_finite() && out.grad.is_finite());
    }

    fn finite_difference_error(rows: &[Vec<f64>], classes: &[usize], tau: f64) -> f64 {
        let analytic = supcon_loss(&batch(rows, classes, tau)).grad;
        let h = 1e-5;
        let mut num = Vec::new();
        for i in 0..rows.len() {
            for c in 0..rows[0].len() {
                let mut plus = rows.to_vec();
                plus[i][c] += h;
                let mut minus = rows.to_vec();
                minus[i][c] -= h;
                num.push((oracle(&plus, classes, tau) - oracle(&minus, classes, tau)) / (2.0 * h));
            }
        }
        let diff: f64 = num.iter().zip(analytic.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num
            .iter()
            .map(|a| a * a)
            .sum::<f64>()
            .sqrt()
            .max(analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt());
        if scale < 1e-12 {
            diff
        } else {
            diff / scale
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.gen_range(2..=8);
            let d = rng.gen_range(1..=4);
            let rows = unit_rows(&mut rng, n, d);
            let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let err = finite_difference_error(&rows, &classes, 0.5);
            assert!(err <= 1e-6, "relative error {err}");
        }
    }

    #[test]
    fn shl_reductions_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows = unit_rows(&mut rng, 6, 3);
        let b = batch(&rows, &[0, 0, 1, 1, 2, 2], 0.1);
        let single = shl_loss(&[(Level::Svc, &b)], &ShlConfig::svc_only(0.1)).unwrap();
        let direct = supcon_loss(&b);
        assert_eq!(single.loss, direct.loss);
        assert_eq!(single.levels[0].output.grad, direct.grad);

        let three = ShlConfig::three_level(0.1);
        assert_eq!(three.weights, vec![0.2, 0.4, 0.4]);
        assert_eq!(ShlConfig::two_level(0.1).weights, vec![0.5, 0.5]);
        assert_eq!(
            shl_loss(&[(Level::Svc, &b)], &three).unwrap_err(),
            LossError::MissingLevel(Level::S)
        );
        let short = batch(&rows[..4], &[0, 0, 1, 1], 0.1);
        assert!(matches!(
            shl_loss(&[(Level::S, &b), (Level::Sv, &short), (Level::Svc, &b)], &three),
            Err(LossError::SampleCountMismatch { .. })
        ));
        assert_eq!(
            shl_loss(&[(Level::S, &b), (Level::Svc, &b)], &ShlConfig::svc_only(0.1)).unwrap_err(),
            LossError::UnexpectedLevel(Level::S)
        );
        assert!(ShlConfig::new(vec![Level::S], vec![-1.0], 0.1).is_err());
    }

    #[test]
    fn hierarchy_positive_sets_are_nested() {
        use crate::label::{ChainLabel, ContextValue};
        let labels = [
            ChainLabel::new("Mail", "Gmail", ContextValue::None),
            ChainLabel::new("Mail", "Gmail", ContextValue::Menu),
            ChainLabel::new("Mail", "Save", ContextValue::Menu),
            ChainLabel::new("Terminal", "Main View", ContextValue::Menu),
            ChainLabel::new("Mail", "Gmail", ContextValue::None),
        ];
        let ids = |l: Level| class_ids(&labels.iter().map(|x| x.key(l)).collect::<Vec<_>>());
        let (s, sv, svc) = (ids(Level::S), ids(Level::Sv), ids(Level::Svc));
        for i in 0..labels.len() {
            for p in 0..labels.len() {
                if p != i && svc[p] == svc[i] {
                    assert_eq!(sv[p], sv[i]);
                }
                if p != i && sv[p] == sv[i] {
                    assert_eq!(s[p], s[i]);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn matches_oracle_and_is_nonnegative(seed in any::<u64>(), n in 2usize..10, d in 1usize..5, tau in 0.05f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = unit_rows(&mut rng, n, d);
            let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let out = supcon_loss(&batch(&rows, &classes, tau));
            prop_assert!(out.loss >= 0.0);
            let o = oracle(&rows, &classes, tau);
            prop_assert!((out.loss - o).abs() <= 1e-9 * o.abs().max(1.0));
        }

        #[test]
        fn permutation_invariance(seed in any::<u64>(), n in 2usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = unit_rows(&mut rng, n, 3);
            let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let base = supcon_loss(&batch(&rows, &classes, 0.2));
            let prow: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
            let pcls: Vec<usize> = perm.iter().map(|&i| classes[i]).collect();
            let permuted = supcon_loss(&batch(&prow, &pcls, 0.2));
            prop_assert!((base.loss - permuted.loss).abs() < 1e-10);
            for (o, &i) in perm.iter().enumerate() {
                for c in 0..3 {
                    prop_assert!((permuted.grad.get(o, c) - base.grad.get(i, c)).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn shl_is_linear_in_weights(seed in any::<u64>(), w in proptest::collection::vec(0.0f64..3.0, 3)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 8;
            let batches: Vec<ContrastiveBatch> = (0..3)
                .map(|_| {
                    let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
                    batch(&unit_rows(&mut rng, n, 4), &classes, 0.1)
                })
                .collect();
            let cfg = ShlConfig::new(vec![Level::S, Level::Sv, Level::Svc], w.clone(), 0.1).unwrap();
            let pairs = [(Level::S, &batches[0]), (Level::Sv, &batches[1]), (Level::Svc, &batches[2])];
            let out = shl_loss(&pairs, &cfg).unwrap();
            let expected: f64 = w.iter().zip(&batches).map(|(w, b)| w * supcon_loss(b).loss).sum();
            prop_assert!((out.loss - expected).abs() <= 1e-12 * expected.abs().max(1.0));
        }
    }
}
