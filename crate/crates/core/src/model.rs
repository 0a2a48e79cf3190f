//! Preprocessing, the reference convolutional encoder and per-level
//! projection heads, with a hand-written backward pass and a binary
//! checkpoint format.
//!
//! Encoder: two 3×3 stride-2 convolutions with ReLU, global average pooling
//! and a linear map to the backbone feature. Each head is
//! linear → ReLU → linear followed by L2 normalization, with hidden width
//! equal to the feature width.
//!
//! # Checkpoint layout
//!
//! All integers little-endian.
//!
//! | field          | type                                         |
//! |----------------|----------------------------------------------|
//! | magic          | 8 bytes `UIWFCKPT`                           |
//! | version        | u32 (currently 1)                            |
//! | config length  | u32                                          |
//! | config         | UTF-8 JSON of [`ModelConfig`]                |
//! | config digest  | 32 bytes, SHA-256 of the JSON bytes          |
//! | tensor count   | u32                                          |
//! | per tensor     | u32 name length, name, u32 rank, u64 × rank dims, f64 × product(dims) |

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::label::{ChainLabel, Level};
use crate::raster::{resample_bilinear, ImageBuffer};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"UIWFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("zero-sized image")]
    EmptyImage,
    #[error("head {0} is not present in this model")]
    HeadNotPresent(Level),
    #[error("input has {got} columns, expected {expected}")]
    InputShape { expected: usize, got: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config digest does not match its config")]
    DigestMismatch,
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub width: usize,
    pub height: usize,
    /// Brightness shift amplitude as a fraction of full scale.
    pub brightness: f64,
    pub hflip_probability: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            width: 112,
            height: 64,
            brightness: 0.1,
            hflip_probability: 0.5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.width < 8 || self.height < 8 {
            return Err(ModelError::InvalidConfig(format!(
                "target size {}x{} is below 8x8",
                self.width, self.height
            )));
        }
        if !(0.0..=1.0).contains(&self.brightness) || !(0.0..=1.0).contains(&self.hflip_probability) {
            return Err(ModelError::InvalidConfig("augmentation amplitudes must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        3 * self.width * self.height
    }
}

/// Resizes to the target size and scales to `[0, 1]`, returning a
/// channel-major `3 × H × W` vector. With `augment`, a uniform brightness
/// shift and a random horizontal flip are applied before scaling.
pub fn preprocess<R: Rng + ?Sized>(
    image: &ImageBuffer,
    config: &PreprocessConfig,
    augment: bool,
    rng: &mut R,
) -> Result<Vec<f64>, ModelError> {
    let resized = resize_for_model(image, config)?;
    Ok(finish_preprocess(&resized, config, augment, rng))
}

/// The deterministic first half of [`preprocess`]: bilinear resize to the
/// target size, interleaved RGB in `0..=255`.
pub fn resize_for_model(image: &ImageBuffer, config: &PreprocessConfig) -> Result<Vec<f64>, ModelError> {
    if image.is_empty() {
        return Err(ModelError::EmptyImage);
    }
    Ok(resample_bilinear(image, config.width as u32, config.height as u32))
}

/// The second half of [`preprocess`], applied to the output of
/// [`resize_for_model`].
pub fn finish_preprocess<R: Rng + ?Sized>(resized: &[f64], config: &PreprocessConfig, augment: bool, rng: &mut R) -> Vec<f64> {
    let (w, h) = (config.width, config.height);
    let mut shift = 0.0;
    let mut flip = false;
    if augment {
        let amp = config.brightness * 255.0;
        if amp > 0.0 {
            shift = rng.gen_range(-amp..=amp);
        }
        flip = rng.gen_bool(config.hflip_probability);
    }
    let mut out = vec![0.0; 3 * w * h];
    for y in 0..h {
        for x in 0..w {
            let sx = if flip { w - 1 - x } else { x };
            for c in 0..3 {
                let v = resized[(y * w + sx) * 3 + c];
                let v = if shift != 0.0 { (v + shift).clamp(0.0, 255.0) } else { v };
                out[c * w * h + y * w + x] = v / 255.0;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub level: Level,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub preprocess: PreprocessConfig,
    pub conv_channels: [usize; 2],
    pub feature_dim: usize,
    pub heads: Vec<HeadSpec>,
}

impl ModelConfig {
    /// One svc head; every loss level is computed on it.
    pub fn single_task(preprocess: PreprocessConfig, dim: usize) -> Self {
        Self {
            preprocess,
            conv_channels: [16, 32],
            feature_dim: 256,
            heads: vec![HeadSpec { level: Level::Svc, dim }],
        }
    }

    /// One head per listed level, each of width `dim`.
    pub fn multi_task(preprocess: PreprocessConfig, levels: &[Level], dim: usize) -> Self {
        Self {
            preprocess,
            conv_channels: [16, 32],
            feature_dim: 256,
            heads: levels.iter().map(|&level| HeadSpec { level, dim }).collect(),
        }
    }

    pub fn is_single_task(&self) -> bool {
        self.heads.len() == 1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.preprocess.validate()?;
        if self.conv_channels.contains(&0) || self.feature_dim == 0 {
            return Err(ModelError::InvalidConfig("layer widths must be positive".into()));
        }
        if self.heads.is_empty() {
            return Err(ModelError::InvalidConfig("at least one head is required".into()));
        }
        for (i, h) in self.heads.iter().enumerate() {
            if h.dim == 0 {
                return Err(ModelError::InvalidConfig(format!("head {} has zero width", h.level)));
            }
            if self.heads[..i].iter().any(|o| o.level == h.level) {
                return Err(ModelError::InvalidConfig(format!("duplicate head {}", h.level)));
            }
        }
        Ok(())
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(config_json(self).as_bytes()).into()
    }

    fn conv_dims(&self) -> [(usize, usize); 2] {
        let o = |n: usize| (n - 1) / 2 + 1;
        let (w1, h1) = (o(self.preprocess.width), o(self.preprocess.height));
        [(w1, h1), (o(w1), o(h1))]
    }
}

fn config_json(config: &ModelConfig) -> String {
    serde_json::to_string(config).expect("config serializes")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Named parameter (or gradient) tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![0.0; t.data.len()],
                })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }
}

const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const CONV2_W: usize = 2;
const CONV2_B: usize = 3;
const FC_W: usize = 4;
const FC_B: usize = 5;
const HEAD_BASE: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
}

/// Intermediate values of the backbone needed by the backward pass.
#[derive(Debug, Clone)]
pub struct BackboneCache {
    batch: usize,
    cols1: Vec<Vec<f64>>,
    act1: Vec<Vec<f64>>,
    cols2: Vec<Vec<f64>>,
    act2: Vec<Vec<f64>>,
    pooled: Matrix,
    /// Backbone features, one row per sample.
    pub features: Matrix,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    head: usize,
    hidden: Matrix,
    norms: Vec<f64>,
    /// Unit-norm embeddings, one row per sample.
    pub embeddings: Matrix,
}

impl HeadCache {
    pub fn level(&self, model: &Model) -> Level {
        model.config.heads[self.head].level
    }
}

fn tensor_seed(seed: u64, name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    seed ^ u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn init_tensor(seed: u64, name: String, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(tensor_seed(seed, &name));
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor {
        name,
        shape,
        data: (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
    }
}

impl Model {
    /// Seeded fan-in uniform initialization. Each tensor draws from a stream
    /// derived from its name, so tensors shared between architectures start
    /// identical under the same seed.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let [c1, c2] = config.conv_channels;
        let f = config.feature_dim;
        let mut t = vec![
            init_tensor(seed, "conv1.weight".into(), vec![c1, 3, 3, 3], 27),
            init_tensor(seed, "conv1.bias".into(), vec![c1], 27),
            init_tensor(seed, "conv2.weight".into(), vec![c2, c1, 3, 3], c1 * 9),
            init_tensor(seed, "conv2.bias".into(), vec![c2], c1 * 9),
            init_tensor(seed, "fc.weight".into(), vec![f, c2], c2),
            init_tensor(seed, "fc.bias".into(), vec![f], c2),
        ];
        for h in &config.heads {
            let p = format!("head.{}", h.level);
            t.push(init_tensor(seed, format!("{p}.fc1.weight"), vec![f, f], f));
            t.push(init_tensor(seed, format!("{p}.fc1.bias"), vec![f], f));
            t.push(init_tensor(seed, format!("{p}.fc2.weight"), vec![h.dim, f], f));
            t.push(init_tensor(seed, format!("{p}.fc2.bias"), vec![h.dim], f));
        }
        Ok(Self {
            config,
            params: ParamSet { tensors: t },
        })
    }

    pub fn from_parts(config: ModelConfig, params: ParamSet) -> Result<Self, ModelError> {
        let reference = Model::new(config.clone(), 0)?;
        if !reference.params.same_layout(&params) {
            return Err(ModelError::Checkpoint("tensor layout does not match the config".into()));
        }
        if !params.is_finite() {
            return Err(ModelError::Checkpoint("non-finite parameter values".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn head_index(&self, level: Level) -> Result<usize, ModelError> {
        self.config
            .heads
            .iter()
            .position(|h| h.level == level)
            .ok_or(ModelError::HeadNotPresent(level))
    }

    fn w(&self, i: usize) -> &[f64] {
        &self.params.tensors[i].data
    }

    /// Backbone forward pass over preprocessed rows (`batch × 3HW`).
    pub fn forward(&self, input: &Matrix) -> Result<BackboneCache, ModelError> {
        let pc = &self.config.preprocess;
        if input.cols() != pc.input_len() {
            return Err(ModelError::InputShape {
                expected: pc.input_len(),
                got: input.cols(),
            });
        }
        let [c1, c2] = self.config.conv_channels;
        let [(w1, h1), (w2, h2)] = self.config.conv_dims();
        let (p1, p2) = (w1 * h1, w2 * h2);
        let b = input.rows();
        let mut cache = BackboneCache {
            batch: b,
            cols1: Vec::with_capacity(b),
            act1: Vec::with_capacity(b),
            cols2: Vec::with_capacity(b),
            act2: Vec::with_capacity(b),
            pooled: Matrix::zeros(b, c2),
            features: Matrix::zeros(b, self.config.feature_dim),
        };
        for n in 0..b {
            let col1 = im2col(input.row(n), 3, pc.height, pc.width, h1, w1);
            let mut a1 = vec![0.0; c1 * p1];
            conv_forward(self.w(CONV1_W), self.w(CONV1_B), &col1, c1, 27, p1, &mut a1);
            let col2 = im2col(&a1, c1, h1, w1, h2, w2);
            let mut a2 = vec![0.0; c2 * p2];
            conv_forward(self.w(CONV2_W), self.w(CONV2_B), &col2, c2, c1 * 9, p2, &mut a2);
            for (c, pooled) in cache.pooled.row_mut(n).iter_mut().enumerate() {
                *pooled = a2[c * p2..(c + 1) * p2].iter().sum::<f64>() / p2 as f64;
            }
            cache.cols1.push(col1);
            cache.act1.push(a1);
            cache.cols2.push(col2);
            cache.act2.push(a2);
        }
        linear_forward(
            &cache.pooled,
            self.w(FC_W),
            self.w(FC_B),
            self.config.feature_dim,
            &mut cache.features,
        );
        Ok(cache)
    }

    /// Projects backbone features through the head for `level`.
    pub fn project(&self, features: &Matrix, level: Level) -> Result<HeadCache, ModelError> {
        let head = self.head_index(level)?;
        Ok(self.project_index(features, head))
    }

    fn project_index(&self, features: &Matrix, head: usize) -> HeadCache {
        let base = HEAD_BASE + 4 * head;
        let f = self.config.feature_dim;
        let dim = self.config.heads[head].dim;
        let mut hidden = Matrix::zeros(features.rows(), f);
        linear_forward(features, self.w(base), self.w(base + 1), f, &mut hidden);
        hidden.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let mut out = Matrix::zeros(features.rows(), dim);
        linear_forward(&hidden, self.w(base + 2), self.w(base + 3), dim, &mut out);
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= nrm);
            norms.push(nrm);
        }
        HeadCache {
            head,
            hidden,
            norms,
            embeddings: out,
        }
    }

    /// Unit-norm embeddings for preprocessed rows.
    pub fn embed(&self, input: &Matrix, level: Level) -> Result<Matrix, ModelError> {
        let cache = self.forward(input)?;
        Ok(self.project(&cache.features, level)?.embeddings)
    }

    /// Gradients of a scalar loss given its gradients with respect to each
    /// head's unit-norm embeddings. Heads without an entry receive zero.
    pub fn backward(&self, backbone: &BackboneCache, heads: &[(&HeadCache, &Matrix)]) -> ParamSet {
        let mut grads = self.params.zeros_like();
        let f = self.config.feature_dim;
        let b = backbone.batch;
        let mut d_features = Matrix::zeros(b, f);
        for (cache, d_emb) in heads {
            let base = HEAD_BASE + 4 * cache.head;
            let dim = self.config.heads[cache.head].dim;
            // through the normalization
            let mut d_out = Matrix::zeros(b, dim);
            for r in 0..b {
                let y = cache.embeddings.row(r);
                let g = d_emb.row(r);
                let yg: f64 = y.iter().zip(g).map(|(a, c)| a * c).sum();
                for (o, (&yi, &gi)) in d_out.row_mut(r).iter_mut().zip(y.iter().zip(g)) {
                    *o = (gi - yi * yg) / cache.norms[r];
                }
            }
            let mut d_hidden = Matrix::zeros(b, f);
            linear_backward(
                &cache.hidden,
                &d_out,
                self.w(base + 2),
                &mut grads.tensors,
                base + 2,
                Some(&mut d_hidden),
            );
            for (dh, &h) in d_hidden.data_mut().iter_mut().zip(cache.hidden.data()) {
                if h <= 0.0 {
                    *dh = 0.0;
                }
            }
            let mut d_in = Matrix::zeros(b, f);
            linear_backward(
                &backbone.features,
                &d_hidden,
                self.w(base),
                &mut grads.tensors,
                base,
                Some(&mut d_in),
            );
            for (a, &v) in d_features.data_mut().iter_mut().zip(d_in.data()) {
                *a += v;
            }
        }

        let [c1, c2] = self.config.conv_channels;
        let [(w1, h1), (w2, h2)] = self.config.conv_dims();
        let (p1, p2) = (w1 * h1, w2 * h2);
        let mut d_pooled = Matrix::zeros(b, c2);
        linear_backward(
            &backbone.pooled,
            &d_features,
            self.w(FC_W),
            &mut grads.tensors,
            FC_W,
            Some(&mut d_pooled),
        );

        let (before, after) = grads.tensors.split_at_mut(CONV2_W);
        let (conv1_grads, _) = before.split_at_mut(2);
        let (conv2_grads, _) = after.split_at_mut(2);
        let mut d_a2 = vec![0.0; c2 * p2];
        let mut d_col2 = vec![0.0; c1 * 9 * p2];
        let mut d_a1 = vec![0.0; c1 * p1];
        for n in 0..b {
            let a2 = &backbone.act2[n];
            for c in 0..c2 {
                let g = d_pooled.get(n, c) / p2 as f64;
                for p in 0..p2 {
                    d_a2[c * p2 + p] = if a2[c * p2 + p] > 0.0 { g } else { 0.0 };
                }
            }
            conv_backward(
                &d_a2,
                &backbone.cols2[n],
                self.w(CONV2_W),
                c2,
                c1 * 9,
                p2,
                conv2_grads,
                Some(&mut d_col2),
            );
            d_a1.iter_mut().for_each(|v| *v = 0.0);
            col2im(&d_col2, c1, h1, w1, h2, w2, &mut d_a1);
            for (d, &a) in d_a1.iter_mut().zip(&backbone.act1[n]) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            conv_backward(&d_a1, &backbone.cols1[n], self.w(CONV1_W), c1, 27, p1, conv1_grads, None);
        }
        grads
    }
}

/// `C = op(A)·op(B) + beta·C` on row-major slices, `op(A)` being `m × k`
/// and `op(B)` being `k × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above bounds every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Rows are `(channel, ky, kx)` and columns output positions, for a 3×3
/// kernel with stride 2 and zero padding 1.
fn im2col(input: &[f64], channels: usize, h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    let p = ho * wo;
    let mut col = vec![0.0; channels * 9 * p];
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((c * 3 + ky) * 3 + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            row[oy * wo + ox] = plane[iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], channels: usize, h: usize, w: usize, ho: usize, wo: usize, out: &mut [f64]) {
    let p = ho * wo;
    for c in 0..channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((c * 3 + ky) * 3 + kx) * p..][..p];
                for oy in 0..ho {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix >= 0 && ix < w as isize {
                            out[c * h * w + iy as usize * w + ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out = ReLU(W·col + b)` with `W: cout × k`, `col: k × p`.
fn conv_forward(weight: &[f64], bias: &[f64], col: &[f64], cout: usize, k: usize, p: usize, out: &mut [f64]) {
    gemm(cout, k, p, weight, false, col, false, out, 0.0);
    for c in 0..cout {
        for v in &mut out[c * p..(c + 1) * p] {
            *v = (*v + bias[c]).max(0.0);
        }
    }
}

/// Accumulates weight and bias gradients into `grads[0..2]` and optionally
/// writes the gradient with respect to `col`.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    d_out: &[f64],
    col: &[f64],
    weight: &[f64],
    cout: usize,
    k: usize,
    p: usize,
    grads: &mut [Tensor],
    d_col: Option<&mut [f64]>,
) {
    gemm(cout, p, k, d_out, false, col, true, &mut grads[0].data, 1.0);
    for c in 0..cout {
        grads[1].data[c] += d_out[c * p..(c + 1) * p].iter().sum::<f64>();
    }
    if let Some(d_col) = d_col {
        gemm(k, cout, p, weight, true, d_out, false, d_col, 0.0);
    }
}

/// `out = x·Wᵀ + b` with `W: out_dim × in_dim`.
fn linear_forward(x: &Matrix, weight: &[f64], bias: &[f64], out_dim: usize, out: &mut Matrix) {
    gemm(x.rows(), x.cols(), out_dim, x.data(), false, weight, true, out.data_mut(), 0.0);
    for r in 0..out.rows() {
        for (v, b) in out.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn linear_backward(x: &Matrix, d_out: &Matrix, weight: &[f64], grads: &mut [Tensor], w_index: usize, d_x: Option<&mut Matrix>) {
    let (b, in_dim, out_dim) = (x.rows(), x.cols(), d_out.cols());
    gemm(
        out_dim,
        b,
        in_dim,
        d_out.data(),
        true,
        x.data(),
        false,
        &mut grads[w_index].data,
        1.0,
    );
    for r in 0..b {
        for (g, &d) in grads[w_index + 1].data.iter_mut().zip(d_out.row(r)) {
            *g += d;
        }
    }
    if let Some(d_x) = d_x {
        gemm(b, out_dim, in_dim, d_out.data(), false, weight, false, d_x.data_mut(), 0.0);
    }
}

/// Embeddings of one head with their aligned labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub head: Level,
    pub embeddings: Matrix,
    pub labels: Vec<ChainLabel>,
}

fn checkpoint_err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(model: &Model, mut w: W) -> Result<(), ModelError> {
    let json = config_json(&model.config);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(json.as_bytes())?;
    w.write_all(&Sha256::digest(json.as_bytes()))?;
    w.write_all(&(model.params.tensors.len() as u32).to_le_bytes())?;
    for t in &model.params.tensors {
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model, ModelError> {
    fn u32_le<R: Read>(r: &mut R) -> Result<u32, ModelError> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>, ModelError> {
        let mut b = Vec::new();
        r.take(n as u64).read_to_end(&mut b)?;
        if b.len() != n {
            return Err(checkpoint_err("truncated file"));
        }
        Ok(b)
    }
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(checkpoint_err("bad magic"));
    }
    let version = u32_le(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(checkpoint_err(format!("unsupported version {version}")));
    }
    let len = u32_le(&mut r)? as usize;
    let json = bytes(&mut r, len)?;
    let digest = bytes(&mut r, 32)?;
    if Sha256::digest(&json).as_slice() != digest.as_slice() {
        return Err(ModelError::DigestMismatch);
    }
    let config: ModelConfig = serde_json::from_slice(&json).map_err(|e| checkpoint_err(format!("config: {e}")))?;
    let count = u32_le(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32_le(&mut r)? as usize;
        let name = String::from_utf8(bytes(&mut r, name_len)?).map_err(|_| checkpoint_err("tensor name is not UTF-8"))?;
        let rank = u32_le(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(bytes(&mut r, 8)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let raw = bytes(&mut r, n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(Tensor { name, shape, data });
    }
    Model::from_parts(config, ParamSet { tensors })
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model, ModelError> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
