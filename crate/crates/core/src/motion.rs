//! Near-duplicate frame removal for screen recordings.
//!
//! Consecutive frames are compared against a retained reference frame: both
//! are converted to grayscale and Gaussian smoothed, their absolute
//! difference is dilated and binarized, and the outer borders of the
//! foreground regions are traced. A transition is kept when some region's
//! bounding rectangle is larger than the contour area threshold; the newer
//! frame then becomes the reference. Otherwise the reference is retained and
//! the newer frame dropped.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, DatasetManifest, FrameRecord};
use crate::raster::ImageBuffer;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MotionError {
    #[error("frame sizes differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
    #[error("no frames to compare")]
    EmptyInput,
    #[error("invalid motion config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error)]
pub enum DedupError {
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Parameters of the detector. Kernel sizes are `(width, height)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionConfig {
    pub gaussian_kernel: (usize, usize),
    pub dilation_kernel: (usize, usize),
    pub binarize_threshold: u8,
    pub contour_area_threshold: u64,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            gaussian_kernel: (5, 5),
            dilation_kernel: (5, 5),
            binarize_threshold: 40,
            contour_area_threshold: 500,
        }
    }
}

impl MotionConfig {
    pub fn validate(&self) -> Result<(), MotionError> {
        let (gw, gh) = self.gaussian_kernel;
        let (dw, dh) = self.dilation_kernel;
        if gw == 0 || gh == 0 || dw == 0 || dh == 0 {
            return Err(MotionError::InvalidConfig("kernel dimensions must be at least 1".into()));
        }
        if gw % 2 == 0 || gh % 2 == 0 {
            return Err(MotionError::InvalidConfig("gaussian kernel dimensions must be odd".into()));
        }
        Ok(())
    }
}

/// Single-channel image with `f64` intensities in 0..=255.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayPlane {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayPlane {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Luma conversion with weights 0.299 / 0.587 / 0.114.
pub fn to_gray(img: &ImageBuffer) -> GrayPlane {
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect();
    GrayPlane {
        width: img.width() as usize,
        height: img.height() as usize,
        data,
    }
}

/// Normalized 1-D Gaussian taps for an odd size `k`, with
/// `sigma = 0.3 * ((k - 1) / 2 - 1) + 0.8`.
pub fn gaussian_kernel(k: usize) -> Vec<f64> {
    assert!(k % 2 == 1, "gaussian kernel size must be odd");
    let sigma = 0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let half = (k / 2) as f64;
    let taps: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - half;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable Gaussian smoothing with replicated borders.
pub fn gaussian_blur(src: &GrayPlane, kernel: (usize, usize)) -> GrayPlane {
    let kx = gaussian_kernel(kernel.0);
    let ky = gaussian_kernel(kernel.1);
    let (w, h) = (src.width, src.height);
    let (rx, ry) = ((kernel.0 / 2) as isize, (kernel.1 / 2) as isize);
    let mut tmp = GrayPlane::zeros(w, h);
    for y in 0..h {
        let row = &src.data[y * w..(y + 1) * w];
        for x in 0..w {
            tmp.data[y * w + x] = kx
                .iter()
                .enumerate()
                .map(|(j, k)| k * row[clamp_index(x as isize + j as isize - rx, w)])
                .sum();
        }
    }
    let mut out = GrayPlane::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            out.data[y * w + x] = ky
                .iter()
                .enumerate()
                .map(|(j, k)| k * tmp.data[clamp_index(y as isize + j as isize - ry, h) * w + x])
                .sum();
        }
    }
    out
}

fn check_dims(a: &ImageBuffer, b: &ImageBuffer) -> Result<(), MotionError> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(MotionError::DimensionMismatch(a.width(), a.height(), b.width(), b.height()));
    }
    Ok(())
}

fn diff_planes(a: &GrayPlane, b: &GrayPlane) -> GrayPlane {
    GrayPlane {
        width: a.width,
        height: a.height,
        data: a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).collect(),
    }
}

/// Grayscale, smooth with `gaussian_kernel`, then take `|a - b|` per pixel.
pub fn abs_diff(a: &ImageBuffer, b: &ImageBuffer, gaussian_kernel: (usize, usize)) -> Result<GrayPlane, MotionError> {
    check_dims(a, b)?;
    Ok(diff_planes(
        &gaussian_blur(&to_gray(a), gaussian_kernel),
        &gaussian_blur(&to_gray(b), gaussian_kernel),
    ))
}

/// Max filter over a `(width, height)` all-ones structuring element
/// anchored at its center (`k / 2`).
pub fn dilate(src: &GrayPlane, kernel: (usize, usize)) -> GrayPlane {
    let (w, h) = (src.width, src.height);
    let window = |len: usize, k: usize, i: usize| {
        let lo = i as isize - (k / 2) as isize;
        let hi = lo + k as isize - 1;
        (clamp_index(lo, len), clamp_index(hi, len))
    };
    let mut tmp = GrayPlane::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = window(w, kernel.0, x);
            tmp.data[y * w + x] = src.data[y * w + lo..=y * w + hi].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
    }
    let mut out = GrayPlane::zeros(w, h);
    for y in 0..h {
        let (lo, hi) = window(h, kernel.1, y);
        for x in 0..w {
            out.data[y * w + x] = (lo..=hi).map(|yy| tmp.data[yy * w + x]).fold(f64::NEG_INFINITY, f64::max);
        }
    }
    out
}

/// Foreground mask: `true` where the value is strictly above `threshold`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

pub fn binarize(src: &GrayPlane, threshold: u8) -> BinaryImage {
    let t = threshold as f64;
    BinaryImage {
        width: src.width,
        height: src.height,
        data: src.data.iter().map(|&v| v > t).collect(),
    }
}

/// Closed border of a foreground region as `(x, y)` pixel coordinates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Contour {
    pub points: Vec<(u32, u32)>,
}

impl Contour {
    /// `(x, y, width, height)` of the axis-aligned bounding rectangle.
    pub fn bounding_rect(&self) -> (u32, u32, u32, u32) {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for &(x, y) in &self.points {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        (x0, y0, x1 - x0 + 1, y1 - y0 + 1)
    }
}

// Neighbour offsets (row, col) in clockwise order starting east, with rows
// growing downwards.
const DIRS: [(isize, isize); 8] = [(0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1), (-1, 0), (-1, 1)];

/// Suzuki–Abe border following on an 8-connected foreground. Returns the
/// outer border of every connected region, in raster order of their first
/// pixel. Hole borders are traced (to label the image) but not returned.
pub fn trace_outer_borders(img: &BinaryImage) -> Vec<Contour> {
    let (w, h) = (img.width, img.height);
    if w == 0 || h == 0 {
        return Vec::new();
    }
    let pw = w + 2;
    let mut f = vec![0i32; pw * (h + 2)];
    for y in 0..h {
        for x in 0..w {
            if img.data[y * w + x] {
                f[(y + 1) * pw + x + 1] = 1;
            }
        }
    }
    let offs: Vec<isize> = DIRS.iter().map(|&(dr, dc)| dr * pw as isize + dc).collect();
    let dir_of = |from: usize, to: usize| -> usize {
        let d = to as isize - from as isize;
        offs.iter().position(|&o| o == d).expect("neighbouring pixels")
    };

    let mut nbd = 1i32;
    let mut contours = Vec::new();
    for r in 1..=h {
        for c in 1..=w {
            let p = r * pw + c;
            let v = f[p];
            let (outer, from) = if v == 1 && f[p - 1] == 0 {
                (true, p - 1)
            } else if v >= 1 && f[p + 1] == 0 {
                (false, p + 1)
            } else {
                continue;
            };
            nbd += 1;
            let border = follow(&mut f, &offs, &dir_of, p, from, nbd);
            if outer {
                contours.push(Contour {
                    points: border.into_iter().map(|q| ((q % pw - 1) as u32, (q / pw - 1) as u32)).collect(),
                });
            }
        }
    }
    contours
}

fn follow(f: &mut [i32], offs: &[isize], dir_of: &dyn Fn(usize, usize) -> usize, start: usize, from: usize, nbd: i32) -> Vec<usize> {
    let at = |p: usize, d: usize| (p as isize + offs[d]) as usize;
    // clockwise search for the first non-zero neighbour, starting at `from`
    let d0 = dir_of(start, from);
    let Some(first) = (0..8).map(|k| at(start, (d0 + k) % 8)).find(|&q| f[q] != 0) else {
        f[start] = -nbd;
        return vec![start];
    };
    let mut points = Vec::new();
    let (mut prev, mut cur) = (first, start);
    loop {
        // counter-clockwise search around `cur`, starting after `prev`
        let d_prev = dir_of(cur, prev);
        let mut east_zero = false;
        let mut next = prev;
        for k in 1..=8 {
            let d = (d_prev + 8 - k) % 8;
            let q = at(cur, d);
            if f[q] != 0 {
                next = q;
                break;
            }
            if d == 0 {
                east_zero = true;
            }
        }
        if east_zero {
            f[cur] = -nbd;
        } else if f[cur] == 1 {
            f[cur] = nbd;
        }
        points.push(cur);
        if next == start && cur == first {
            break;
        }
        prev = cur;
        cur = next;
    }
    points
}

/// Dilate, binarize and trace the regions of interest in a difference image.
pub fn find_contours(diff: &GrayPlane, dilation_kernel: (usize, usize), threshold: u8) -> Vec<Contour> {
    trace_outer_borders(&binarize(&dilate(diff, dilation_kernel), threshold))
}

/// Bounding-rectangle area of each contour.
pub fn calc_areas(contours: &[Contour]) -> Vec<u64> {
    contours
        .iter()
        .map(|c| {
            let (_, _, w, h) = c.bounding_rect();
            w as u64 * h as u64
        })
        .collect()
}

/// A saved change between frame `prev` and frame `next = prev + 1`.
/// `reference` is the retained frame the change was measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub reference: usize,
    pub prev: usize,
    pub next: usize,
    pub max_area: u64,
}

impl Transition {
    pub fn pair(&self) -> (usize, usize) {
        (self.prev, self.next)
    }
}

/// Streaming form of [`motion_det`]: feed frames in order with [`push`].
///
/// [`push`]: MotionDetector::push
#[derive(Debug)]
pub struct MotionDetector {
    config: MotionConfig,
    reference: Option<(usize, GrayPlane, (u32, u32))>,
    seen: usize,
}

impl MotionDetector {
    pub fn new(config: MotionConfig) -> Result<Self, MotionError> {
        config.validate()?;
        Ok(Self {
            config,
            reference: None,
            seen: 0,
        })
    }

    pub fn push(&mut self, frame: &ImageBuffer) -> Result<Option<Transition>, MotionError> {
        let index = self.seen;
        let smoothed = gaussian_blur(&to_gray(frame), self.config.gaussian_kernel);
        let dims = (frame.width(), frame.height());
        let Some((ref_index, ref_plane, ref_dims)) = &self.reference else {
            self.reference = Some((index, smoothed, dims));
            self.seen += 1;
            return Ok(None);
        };
        if *ref_dims != dims {
            return Err(MotionError::DimensionMismatch(ref_dims.0, ref_dims.1, dims.0, dims.1));
        }
        self.seen += 1;
        let diff = diff_planes(&smoothed, ref_plane);
        let contours = find_contours(&diff, self.config.dilation_kernel, self.config.binarize_threshold);
        let max_area = calc_areas(&contours).into_iter().max().unwrap_or(0);
        if max_area > self.config.contour_area_threshold {
            let t = Transition {
                reference: *ref_index,
                prev: index - 1,
                next: index,
                max_area,
            };
            self.reference = Some((index, smoothed, dims));
            Ok(Some(t))
        } else {
            Ok(None)
        }
    }
}

/// Runs the detector over an ordered frame list and returns the saved
/// transitions. `prev` and `next` are strictly increasing across the list.
pub fn motion_det(frames: &[ImageBuffer], config: &MotionConfig) -> Result<Vec<Transition>, MotionError> {
    if frames.is_empty() {
        return Err(MotionError::EmptyInput);
    }
    let mut det = MotionDetector::new(*config)?;
    let mut out = Vec::new();
    for f in frames {
        if let Some(t) = det.push(f)? {
            out.push(t);
        }
    }
    Ok(out)
}

/// Frame indices to keep: both ends of every transition, deduplicated.
pub fn kept_frames(transitions: &[Transition]) -> BTreeSet<usize> {
    transitions.iter().flat_map(|t| [t.prev, t.next]).collect()
}

/// Runs the detector over every video of a manifest (frames ordered by
/// index) and returns the records of kept frames, grouped by video.
pub fn dedup_records(manifest: &DatasetManifest, config: &MotionConfig) -> Result<Vec<FrameRecord>, DedupError> {
    let mut videos: BTreeMap<&str, Vec<&FrameRecord>> = BTreeMap::new();
    for r in &manifest.records {
        videos.entry(r.video_id.as_str()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (_, mut frames) in videos {
        frames.sort_by_key(|r| r.frame_index);
        let mut det = MotionDetector::new(*config)?;
        let mut transitions = Vec::new();
        for r in &frames {
            if let Some(t) = det.push(&manifest.load_image(r)?)? {
                transitions.push(t);
            }
        }
        out.extend(kept_frames(&transitions).into_iter().map(|i| frames[i].clone()));
    }
    Ok(out)
}
