//! Synthetic context-menu and selected-text instances composited onto real
//! training frames.
//!
//! Menus are drawn from a pool conditioned on the frame's software class,
//! shrunk to fit if necessary and pasted opaquely at a uniform random
//! position. Selections are cropped to a random width, randomly mirrored and
//! pasted the same way. The synthetic frame's context label is overwritten
//! with the generator's class whatever the frame already shows.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{DatasetError, DatasetManifest, FrameRecord, Split};
use crate::label::{ContextValue, LabelRegistry};
use crate::raster::{ImageBuffer, RasterError, Rect};

/// Narrowest selection asset accepted into the database, in pixels.
pub const MIN_SELECTION_WIDTH: u32 = 4;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no context-menu asset for software class {0:?}")]
    NoAssetForClass(String),
    #[error("the selection database is empty")]
    EmptySelectionDb,
    #[error("fraction must lie in [0, 1], got {0}")]
    InvalidFraction(f64),
    #[error("invalid asset {id}: {reason}")]
    InvalidAsset { id: String, reason: String },
    #[error("base image is empty")]
    EmptyBase,
    #[error("asset directory {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MenuAsset {
    pub image: ImageBuffer,
    pub software: String,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionAsset {
    pub image: ImageBuffer,
    pub source_id: String,
}

/// Context-menu crops keyed by software class, plus selected-text crops.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssetDb {
    menus: BTreeMap<String, Vec<MenuAsset>>,
    selections: Vec<SelectionAsset>,
}

impl AssetDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_menu(&mut self, asset: MenuAsset) -> Result<(), SynthError> {
        if asset.image.is_empty() {
            return Err(SynthError::InvalidAsset {
                id: asset.source_id,
                reason: "empty image".into(),
            });
        }
        self.menus.entry(asset.software.clone()).or_default().push(asset);
        Ok(())
    }

    pub fn add_selection(&mut self, asset: SelectionAsset) -> Result<(), SynthError> {
        if asset.image.height() == 0 || asset.image.width() < MIN_SELECTION_WIDTH {
            return Err(SynthError::InvalidAsset {
                id: asset.source_id,
                reason: format!("selections must be at least {MIN_SELECTION_WIDTH} px wide"),
            });
        }
        self.selections.push(asset);
        Ok(())
    }

    pub fn menus_for(&self, software: &str) -> &[MenuAsset] {
        self.menus.get(software).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn selections(&self) -> &[SelectionAsset] {
        &self.selections
    }

    pub fn menu_classes(&self) -> impl Iterator<Item = &str> {
        self.menus.keys().map(String::as_str)
    }

    /// Loads `menus/<software>/<id>.png` and `selections/<id>.png` from `dir`.
    /// Files are read in name order so pools are reproducible.
    pub fn load(dir: impl AsRef<Path>, registry: &LabelRegistry) -> Result<Self, SynthError> {
        let dir = dir.as_ref();
        let mut db = AssetDb::new();
        let menus = dir.join("menus");
        if menus.is_dir() {
            for class_dir in sorted_entries(&menus)? {
                if !class_dir.is_dir() {
                    continue;
                }
                let software = class_dir.file_name().unwrap().to_string_lossy().into_owned();
                if !registry.has_software(&software) {
                    return Err(SynthError::InvalidAsset {
                        id: class_dir.display().to_string(),
                        reason: format!("software class {software:?} is not registered"),
                    });
                }
                for file in sorted_entries(&class_dir)?.into_iter().filter(|p| is_png(p)) {
                    db.add_menu(MenuAsset {
                        image: ImageBuffer::load_png(&file)?,
                        software: software.clone(),
                        source_id: format!("{software}/{}", file.file_stem().unwrap().to_string_lossy()),
                    })?;
                }
            }
        }
        let selections = dir.join("selections");
        if selections.is_dir() {
            for file in sorted_entries(&selections)?.into_iter().filter(|p| is_png(p)) {
                db.add_selection(SelectionAsset {
                    image: ImageBuffer::load_png(&file)?,
                    source_id: file.file_stem().unwrap().to_string_lossy().into_owned(),
                })?;
            }
        }
        Ok(db)
    }

    /// Writes the database in the layout [`AssetDb::load`] reads.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), SynthError> {
        let dir = dir.as_ref();
        for (software, pool) in &self.menus {
            for (i, m) in pool.iter().enumerate() {
                m.image.save_png(dir.join("menus").join(software).join(format!("{i:04}.png")))?;
            }
        }
        for (i, s) in self.selections.iter().enumerate() {
            s.image.save_png(dir.join("selections").join(format!("{i:04}.png")))?;
        }
        Ok(())
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>, SynthError> {
    let io = |source| SynthError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut out = std::fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io)?;
    out.sort();
    Ok(out)
}

fn is_png(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Lower bound of the random selection width, as a fraction of the asset width.
    pub selection_min_width_fraction: f64,
    pub flip_probability: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            selection_min_width_fraction: 0.25,
            flip_probability: 0.5,
        }
    }
}

/// Where and how an asset was composited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub generator: ContextValue,
    pub asset_id: String,
    /// Software pool the menu was drawn from; `None` for selections.
    pub software_pool: Option<String>,
    pub rect: Rect,
    /// Uniform downscale applied to fit the base image (1.0 when none).
    pub scale: f64,
    /// `(x0, width)` of the column crop applied to a selection.
    pub crop: Option<(u32, u32)>,
    pub flipped: bool,
}

/// Largest uniform scale ≤ 1 that fits `(w, h)` inside `(max_w, max_h)`.
fn fit_scale(w: u32, h: u32, max_w: u32, max_h: u32) -> f64 {
    let mut s: f64 = 1.0;
    if h > max_h {
        s = max_h as f64 / h as f64;
    }
    if (w as f64 * s).floor() > max_w as f64 {
        s = max_w as f64 / w as f64;
    }
    s
}

/// Shrinks `asset` (never enlarges) so it fits inside `max_w × max_h`.
fn fit_within(asset: &ImageBuffer, max_w: u32, max_h: u32) -> (ImageBuffer, f64) {
    let s = fit_scale(asset.width(), asset.height(), max_w, max_h);
    if s >= 1.0 {
        return (asset.clone(), 1.0);
    }
    let w = ((asset.width() as f64 * s).floor() as u32).clamp(1, max_w);
    let h = ((asset.height() as f64 * s).floor() as u32).clamp(1, max_h);
    (asset.resize_bilinear(w, h), s)
}

fn paste_random<R: Rng + ?Sized>(base: &ImageBuffer, asset: &ImageBuffer, rng: &mut R) -> (ImageBuffer, Rect) {
    let x = rng.gen_range(0..=base.width() - asset.width());
    let y = rng.gen_range(0..=base.height() - asset.height());
    let mut out = base.clone();
    out.paste(asset, x, y);
    (
        out,
        Rect {
            x,
            y,
            width: asset.width(),
            height: asset.height(),
        },
    )
}

/// Composites a menu from `software`'s pool onto `image`.
pub fn gen_context_menu<R: Rng + ?Sized>(
    image: &ImageBuffer,
    software: &str,
    db: &AssetDb,
    rng: &mut R,
) -> Result<(ImageBuffer, ContextValue, Placement), SynthError> {
    if image.is_empty() {
        return Err(SynthError::EmptyBase);
    }
    let pool = db.menus_for(software);
    if pool.is_empty() {
        return Err(SynthError::NoAssetForClass(software.to_string()));
    }
    let menu = &pool[rng.gen_range(0..pool.len())];
    let (asset, scale) = fit_within(&menu.image, image.width(), image.height());
    let (out, rect) = paste_random(image, &asset, rng);
    Ok((
        out,
        ContextValue::Menu,
        Placement {
            generator: ContextValue::Menu,
            asset_id: menu.source_id.clone(),
            software_pool: Some(software.to_string()),
            rect,
            scale,
            crop: None,
            flipped: false,
        },
    ))
}

/// Composites a randomly cropped, possibly mirrored selection onto `image`.
pub fn gen_selected_text<R: Rng + ?Sized>(
    image: &ImageBuffer,
    db: &AssetDb,
    config: &SynthConfig,
    rng: &mut R,
) -> Result<(ImageBuffer, ContextValue, Placement), SynthError> {
    if image.is_empty() {
        return Err(SynthError::EmptyBase);
    }
    if db.selections.is_empty() {
        return Err(SynthError::EmptySelectionDb);
    }
    let sel = &db.selections[rng.gen_range(0..db.selections.len())];
    let w = sel.image.width();
    let min_w = ((w as f64 * config.selection_min_width_fraction).ceil() as u32).clamp(1, w);
    let crop_w = rng.gen_range(min_w..=w);
    let x0 = rng.gen_range(0..=w - crop_w);
    let mut piece = sel.image.crop_columns(x0, crop_w);
    let flipped = rng.gen_bool(config.flip_probability.clamp(0.0, 1.0));
    if flipped {
        piece = piece.flip_horizontal();
    }
    let (asset, scale) = fit_within(&piece, image.width(), image.height());
    let (out, rect) = paste_random(image, &asset, rng);
    Ok((
        out,
        ContextValue::SelectedText,
        Placement {
            generator: ContextValue::SelectedText,
            asset_id: sel.source_id.clone(),
            software_pool: None,
            rect,
            scale,
            crop: Some((x0, crop_w)),
            flipped,
        },
    ))
}

/// One planned synthetic instance: which base record, which generator and
/// the seed of its private random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthJob {
    pub record: usize,
    pub generator: ContextValue,
    pub seed: u64,
}

/// Stable 64-bit identifier of a record, used to derive its random stream.
pub fn record_hash(record: &FrameRecord) -> u64 {
    let digest = Sha256::digest(record.id().as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn job_stream(seed: u64) -> (ContextValue, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let generator = if rng.gen_bool(0.5) {
        ContextValue::Menu
    } else {
        ContextValue::SelectedText
    };
    (generator, rng)
}

/// Number of synthetic instances for `pool` natural training frames.
pub fn synthetic_count(fraction: f64, pool: usize) -> usize {
    // the epsilon keeps e.g. 0.29 * 100 from flooring to 28
    ((fraction * pool as f64) + 1e-9).floor() as usize
}

/// Chooses `⌊fraction · N⌋` of the N natural training records without
/// replacement and a generator for each. Already-synthetic records are never
/// used as a base.
pub fn plan_augmentation(records: &[FrameRecord], fraction: f64, seed: u64) -> Result<Vec<SynthJob>, SynthError> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(SynthError::InvalidFraction(fraction));
    }
    let pool: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].split == Split::Train && !records[i].synthetic)
        .collect();
    let n = synthetic_count(fraction, pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = index::sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
    chosen.sort_unstable();
    Ok(chosen
        .into_iter()
        .map(|record| {
            let job_seed = seed ^ record_hash(&records[record]);
            SynthJob {
                record,
                generator: job_stream(job_seed).0,
                seed: job_seed,
            }
        })
        .collect())
}

/// Renders one job onto its base frame and returns the synthetic record.
pub fn synthesize(
    job: &SynthJob,
    base: &FrameRecord,
    base_image: &ImageBuffer,
    db: &AssetDb,
    config: &SynthConfig,
) -> Result<(FrameRecord, ImageBuffer, Placement), SynthError> {
    let (generator, mut rng) = job_stream(job.seed);
    let (image, context, placement) = match generator {
        ContextValue::Menu => gen_context_menu(base_image, &base.label.software, db, &mut rng)?,
        _ => gen_selected_text(base_image, db, config, &mut rng)?,
    };
    let record = FrameRecord {
        video_id: base.video_id.clone(),
        frame_index: base.frame_index,
        image_path: synthetic_image_path(base),
        label: base.label.with_context(context),
        context_observed: true,
        synthetic: true,
        split: base.split,
    };
    Ok((record, image, placement))
}

pub fn synthetic_image_path(base: &FrameRecord) -> String {
    format!("{}/{}_synth.png", base.video_id, base.frame_index)
}

/// Result of [`augment_in_memory`]: the original records followed by the
/// synthetic ones, with images aligned.
#[derive(Debug, Clone)]
pub struct Augmented {
    pub records: Vec<FrameRecord>,
    pub images: Vec<ImageBuffer>,
    pub placements: Vec<Placement>,
}

pub fn augment_in_memory(
    records: &[FrameRecord],
    images: &[ImageBuffer],
    db: &AssetDb,
    config: &SynthConfig,
    fraction: f64,
    seed: u64,
) -> Result<Augmented, SynthError> {
    assert_eq!(records.len(), images.len(), "records and images must align");
    let jobs = plan_augmentation(records, fraction, seed)?;
    let mut out = Augmented {
        records: records.to_vec(),
        images: images.to_vec(),
        placements: Vec::with_capacity(jobs.len()),
    };
    for job in &jobs {
        let (r, img, p) = synthesize(job, &records[job.record], &images[job.record], db, config)?;
        out.records.push(r);
        out.images.push(img);
        out.placements.push(p);
    }
    Ok(out)
}

/// File-backed augmentation: synthetic PNGs are written under `out_root`
/// and the returned manifest (rooted at `out_root`) holds originals plus
/// synthetic records. Original frames are copied when `out_root` differs
/// from the input root.
pub fn augment_dataset(
    manifest: &DatasetManifest,
    registry: &LabelRegistry,
    db: &AssetDb,
    config: &SynthConfig,
    fraction: f64,
    seed: u64,
    out_root: impl AsRef<Path>,
) -> Result<(DatasetManifest, Vec<Placement>), SynthError> {
    let out_root = out_root.as_ref();
    let jobs = plan_augmentation(&manifest.records, fraction, seed)?;
    let same_root = same_dir(&manifest.root, out_root);
    if !same_root {
        for r in &manifest.records {
            let dst = out_root.join(&r.image_path);
            if let Some(parent) = dst.parent() {
                std::fs::create_dir_all(parent).map_err(|source| SynthError::Io {
                    path: parent.display().to_string(),
                    source,
                })?;
            }
            std::fs::copy(manifest.image_path(r), &dst).map_err(|source| SynthError::Io {
                path: dst.display().to_string(),
                source,
            })?;
        }
    }
    let mut records = manifest.records.clone();
    let mut placements = Vec::with_capacity(jobs.len());
    for job in &jobs {
        let base = &manifest.records[job.record];
        let base_image = manifest.load_image(base)?;
        let (r, img, p) = synthesize(job, base, &base_image, db, config)?;
        img.save_png(out_root.join(&r.image_path))?;
        records.push(r);
        placements.push(p);
    }
    Ok((DatasetManifest::new(out_root, records, registry)?, placements))
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}
