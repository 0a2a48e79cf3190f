//! Generated toy dataset: software classes differ by background colour,
//! views by a glyph drawn in two opposite corners, and contexts are added
//! with the synthetic generators.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{save_manifest, DatasetError, DatasetManifest, FrameRecord, Split};
use crate::label::{ChainLabel, ContextValue, LabelRegistry};
use crate::raster::{ImageBuffer, Rect};
use crate::synth::{gen_context_menu, gen_selected_text, AssetDb, MenuAsset, SelectionAsset, SynthConfig, SynthError};

/// Software, view pairs of the fixture, all present in the default registry.
pub const FIXTURE_CLASSES: [(&str, [&str; 2]); 3] = [
    ("Mail", ["Gmail", "Save"]),
    ("Web Browser", ["Maps", "Google"]),
    ("Spread Sheet", ["Main View", "Options"]),
];

const BACKGROUNDS: [[u8; 3]; 3] = [[190, 70, 60], [70, 150, 80], [70, 90, 190]];
const GLYPHS: [[u8; 3]; 2] = [[20, 20, 20], [250, 230, 40]];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureConfig {
    pub width: u32,
    pub height: u32,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub videos_per_split: usize,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            width: 96,
            height: 64,
            train_per_class: 40,
            test_per_class: 20,
            videos_per_split: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub records: Vec<FrameRecord>,
    pub images: Vec<ImageBuffer>,
    pub assets: AssetDb,
}

/// Menu and selection assets in the fixture's visual style.
pub fn fixture_assets() -> AssetDb {
    let mut db = AssetDb::new();
    for (si, (software, _)) in FIXTURE_CLASSES.iter().enumerate() {
        for variant in 0..2u32 {
            let (w, h) = (22 + 4 * variant, 26 + 6 * variant);
            let mut img = ImageBuffer::filled(w, h, [235, 235, 235 - 10 * si as u8]);
            for line in 0..(h - 4) / 6 {
                img.fill_rect(
                    Rect {
                        x: 3,
                        y: 3 + line * 6,
                        width: w - 8 - (line % 3) * 3,
                        height: 2,
                    },
                    [90, 90, 90],
                );
            }
            db.add_menu(MenuAsset {
                image: img,
                software: software.to_string(),
                source_id: format!("{software}/{variant}"),
            })
            .expect("non-empty asset");
        }
    }
    for variant in 0..2u32 {
        let w = 48 + 16 * variant;
        let mut img = ImageBuffer::filled(w, 14, [40, 210, 240]);
        for x in (2..w - 2).step_by(5) {
            img.fill_rect(
                Rect {
                    x,
                    y: 3,
                    width: 3,
                    height: 8,
                },
                [250, 250, 250],
            );
        }
        db.add_selection(SelectionAsset {
            image: img,
            source_id: format!("sel{variant}"),
        })
        .expect("wide enough");
    }
    db
}

fn base_frame(rng: &mut ChaCha8Rng, cfg: &FixtureConfig, software: usize, view: usize) -> ImageBuffer {
    let jitter = |rng: &mut ChaCha8Rng, c: u8| (c as i32 + rng.gen_range(-12..=12)).clamp(0, 255) as u8;
    let bg = BACKGROUNDS[software].map(|c| jitter(rng, c));
    let mut img = ImageBuffer::filled(cfg.width, cfg.height, bg);
    // window content: a few darker blocks of the background hue
    for _ in 0..rng.gen_range(2..5) {
        let w = rng.gen_range(8..cfg.width / 3);
        let h = rng.gen_range(3..cfg.height / 4);
        let x = rng.gen_range(20..cfg.width - w - 20);
        let y = rng.gen_range(0..cfg.height - h);
        img.fill_rect(Rect { x, y, width: w, height: h }, bg.map(|c| c / 2 + 20));
    }
    let g = 12;
    let glyph = GLYPHS[view];
    for (x, y) in [(3, 3), (cfg.width - g - 3, cfg.height - g - 3)] {
        img.fill_rect(Rect { x, y, width: g, height: g }, glyph);
        if view == 1 {
            img.fill_rect(
                Rect {
                    x: x + 4,
                    y: y + 4,
                    width: g - 8,
                    height: g - 8,
                },
                bg,
            );
        }
    }
    img
}

/// Builds the toy dataset. Every video of either split holds every class,
/// so database/query splitting leaves each class on both sides.
pub fn toy_fixture(cfg: &FixtureConfig) -> Result<Fixture, SynthError> {
    let assets = fixture_assets();
    let synth_cfg = SynthConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    let mut images = Vec::new();
    let mut next_index = vec![0u64; 2 * cfg.videos_per_split];
    for (split, per_class) in [(Split::Train, cfg.train_per_class), (Split::Test, cfg.test_per_class)] {
        let tag = if split == Split::Train { "train" } else { "test" };
        let offset = if split == Split::Train { 0 } else { cfg.videos_per_split };
        for (si, (software, views)) in FIXTURE_CLASSES.iter().enumerate() {
            for (vi, view) in views.iter().enumerate() {
                for context in ContextValue::ALL {
                    for i in 0..per_class {
                        let video = i % cfg.videos_per_split;
                        let base = base_frame(&mut rng, cfg, si, vi);
                        let image = match context {
                            ContextValue::None => base,
                            ContextValue::Menu => gen_context_menu(&base, software, &assets, &mut rng)?.0,
                            ContextValue::SelectedText => gen_selected_text(&base, &assets, &synth_cfg, &mut rng)?.0,
                        };
                        let video_id = format!("{tag}_{video}");
                        let frame_index = next_index[offset + video];
                        next_index[offset + video] += 1;
                        let synthetic = context != ContextValue::None;
                        records.push(FrameRecord {
                            image_path: if synthetic {
                                format!("{video_id}/{frame_index}_synth.png")
                            } else {
                                FrameRecord::default_image_path(&video_id, frame_index)
                            },
                            video_id,
                            frame_index,
                            label: ChainLabel::new(*software, *view, context),
                            context_observed: true,
                            synthetic,
                            split,
                        });
                        images.push(image);
                    }
                }
            }
        }
    }
    Ok(Fixture { records, images, assets })
}

/// Writes the images and `manifest.jsonl` under `dir`; returns the
/// manifest path.
pub fn write_fixture(fixture: &Fixture, dir: impl AsRef<Path>) -> Result<PathBuf, DatasetError> {
    let dir = dir.as_ref();
    for (r, img) in fixture.records.iter().zip(&fixture.images) {
        img.save_png(dir.join(&r.image_path))?;
    }
    let manifest = DatasetManifest::new(dir, fixture.records.clone(), &LabelRegistry::default())?;
    let path = dir.join("manifest.jsonl");
    save_manifest(&manifest, &path)?;
    Ok(path)
}
