//! Acceptance criteria A1–A7. Runs without the libtest harness so that each
//! criterion prints exactly one PASS/FAIL line; the process exits non-zero
//! if any criterion fails.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uiwf_core::dataset::{FrameRecord, Split};
use uiwf_core::eval::{ami, evaluate_in_memory, retrieval_scores, score_ranking, EvalOptions, RetrievalIndex};
use uiwf_core::fixture::{toy_fixture, FixtureConfig};
use uiwf_core::label::{ChainLabel, ContextValue, LabelRegistry, Level};
use uiwf_core::loss::{shl_loss, supcon_loss, ContrastiveBatch, ShlConfig, SupCon};
use uiwf_core::model::{write_checkpoint, Model, ModelConfig, PreprocessConfig};
use uiwf_core::motion::{motion_det, MotionConfig};
use uiwf_core::raster::{ImageBuffer, Rect};
use uiwf_core::synth::{augment_in_memory, plan_augmentation, SynthConfig};
use uiwf_core::train::{epoch_losses, train_in_memory, train_step, AdamConfig, AdamState, TrainConfig};
use uiwf_core::Matrix;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !bool::from($cond) {
            return Err(format!($($fmt)+));
        }
    };
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

// ---------------------------------------------------------------- A1

/// Direct transcription of the per-anchor loss, no stabilization.
fn supcon_oracle(f: &[Vec<f64>], classes: &[usize], tau: f64) -> f64 {
    let n = f.len();
    let sim = |i: usize, j: usize| f[i].iter().zip(&f[j]).map(|(a, b)| a * b).sum::<f64>() / tau;
    let mut total = 0.0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&p| p != i && classes[p] == classes[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let denom: f64 = (0..n).filter(|&a| a != i).map(|a| sim(i, a).exp()).sum();
        total += pos.iter().map(|&p| -(sim(i, p).exp() / denom).ln()).sum::<f64>() / pos.len() as f64;
    }
    total
}

fn a1() -> Outcome {
    let pair = ContrastiveBatch::new(Matrix::from_rows(&[vec![0.6, 0.8], vec![1.0, 0.0]]), vec![0, 0], 0.1).unwrap();
    let two = supcon_loss(&pair).loss;
    ensure!(two.abs() < 1e-12, "N=2 same-class loss {two}");
    let same = ContrastiveBatch::new(Matrix::from_rows(&vec![vec![0.0, 1.0]; 4]), vec![0; 4], 0.1).unwrap();
    let four = supcon_loss(&same).loss;
    ensure!((four - 4.0 * 3f64.ln()).abs() <= 1e-9, "N=4 identical loss {four}");

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for _ in 0..20 {
        let n = rng.gen_range(2..=8);
        let d = rng.gen_range(1..=4);
        let rows = unit_rows(&mut rng, n, d);
        let classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let tau = rng.gen_range(0.2..1.0);
        let analytic = supcon_loss(&ContrastiveBatch::new(Matrix::from_rows(&rows), classes.clone(), tau).unwrap()).grad;
        let mut diff = 0.0;
        let mut scale = 0.0;
        for i in 0..n {
            for c in 0..d {
                let mut plus = rows.clone();
                plus[i][c] += h;
                let mut minus = rows.clone();
                minus[i][c] -= h;
                let num = (supcon_oracle(&plus, &classes, tau) - supcon_oracle(&minus, &classes, tau)) / (2.0 * h);
                diff += (num - analytic.get(i, c)).powi(2);
                scale += num * num;
            }
        }
        let rel = if scale > 1e-24 { (diff / scale).sqrt() } else { diff.sqrt() };
        worst = worst.max(rel);
    }
    ensure!(worst <= 1e-6, "worst gradient relative error {worst:.3e}");
    Ok(format!(
        "N=2 loss {two:.1e}, N=4 loss {four:.10}, worst FD rel. error {worst:.2e} over 20 batches"
    ))
}

// ---------------------------------------------------------------- A2

fn a2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.gen_range(2..=16);
        let levels: Vec<Level> = Level::ALL.iter().copied().filter(|_| rng.gen_bool(0.7)).collect();
        let levels = if levels.is_empty() { vec![Level::Svc] } else { levels };
        let weights: Vec<f64> = levels.iter().map(|_| rng.gen_range(0.0..2.0)).collect();
        let tau = rng.gen_range(0.05..1.0);
        let batches: Vec<ContrastiveBatch> = levels
            .iter()
            .map(|_| {
                let classes = (0..n).map(|_| rng.gen_range(0..4)).collect();
                ContrastiveBatch::new(Matrix::from_rows(&unit_rows(&mut rng, n, 5)), classes, tau).unwrap()
            })
            .collect();
        let cfg = ShlConfig::new(levels.clone(), weights.clone(), tau).unwrap();
        let pairs: Vec<(Level, &ContrastiveBatch)> = levels.iter().copied().zip(batches.iter()).collect();
        let got = shl_loss(&pairs, &cfg).unwrap().loss;
        let expected: f64 = weights.iter().zip(&batches).map(|(w, b)| w * supcon_loss(b).loss).sum();
        worst = worst.max((got - expected).abs());
    }
    ensure!(worst <= 1e-12, "linearity deviation {worst:.3e}");

    let pc = PreprocessConfig {
        width: 16,
        height: 16,
        ..Default::default()
    };
    let seed = 99;
    let mut single = Model::new(ModelConfig::single_task(pc, 32), seed).unwrap();
    let mut multi = Model::new(ModelConfig::multi_task(pc, &Level::ALL, 32), seed).unwrap();
    let single_shl = ShlConfig::svc_only(0.1);
    let multi_shl = ShlConfig::new(Level::ALL.to_vec(), vec![0.0, 0.0, 1.0], 0.1).unwrap();
    let adam = AdamConfig {
        learning_rate: 1e-3,
        ..Default::default()
    };
    let mut s_state = AdamState::new(single.params());
    let mut m_state = AdamState::new(multi.params());
    let labels_pool = LabelRegistry::default().svc_triples();
    for step in 0..10 {
        let n = 12;
        let x = Matrix::from_vec(
            n,
            pc.input_len(),
            (0..n * pc.input_len()).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let labels: Vec<ChainLabel> = (0..n).map(|i| labels_pool[(i * 7 + step) % 6].clone()).collect();
        let rs = train_step(&mut single, &mut s_state, &x, &labels, &single_shl, &adam, &SupCon).unwrap();
        let rm = train_step(&mut multi, &mut m_state, &x, &labels, &multi_shl, &adam, &SupCon).unwrap();
        ensure!(
            rs.loss.to_bits() == rm.loss.to_bits(),
            "step {step}: loss {} vs {}",
            rs.loss,
            rm.loss
        );
        for t in &single.params().tensors {
            let other = multi
                .params()
                .get(&t.name)
                .ok_or(format!("{} missing in multi-task model", t.name))?;
            let same = t.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits());
            ensure!(same, "step {step}: tensor {} diverged", t.name);
        }
    }
    Ok(format!("max |SHL − Σλ·L| = {worst:.1e} over 50 configs; 10 steps bit-identical"))
}

// ---------------------------------------------------------------- A3

fn retrieval_oracle(db: &[Vec<f64>], dk: &[usize], q: &[Vec<f64>], qk: &[usize]) -> (f64, f64, f64) {
    let mut per: BTreeMap<usize, Vec<[f64; 3]>> = BTreeMap::new();
    for (qi, qv) in q.iter().enumerate() {
        let mut sims: Vec<(f64, usize)> = db
            .iter()
            .enumerate()
            .map(|(d, v)| (v.iter().zip(qv).map(|(a, b)| a * b).sum(), d))
            .collect();
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let r = dk.iter().filter(|&&k| k == qk[qi]).count();
        if r == 0 {
            continue;
        }
        let hit: Vec<bool> = sims.iter().map(|&(_, d)| dk[d] == qk[qi]).collect();
        let rp = hit[..r].iter().filter(|&&h| h).count() as f64 / r as f64;
        let map = (0..r)
            .filter(|&i| hit[i])
            .map(|i| hit[..=i].iter().filter(|&&h| h).count() as f64 / (i + 1) as f64)
            .sum::<f64>()
            / r as f64;
        per.entry(qk[qi]).or_default().push([if hit[0] { 1.0 } else { 0.0 }, rp, map]);
    }
    let m = |j: usize| {
        per.values()
            .map(|v| v.iter().map(|s| s[j]).sum::<f64>() / v.len() as f64)
            .sum::<f64>()
            / per.len() as f64
    };
    (m(0), m(1), m(2))
}

fn a3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..200 {
        let nd = rng.gen_range(2..=16);
        let nq = rng.gen_range(1..=16);
        let classes = rng.gen_range(1..=4);
        let db = unit_rows(&mut rng, nd, 3);
        let q = unit_rows(&mut rng, nq, 3);
        let dk: Vec<usize> = (0..nd).map(|_| rng.gen_range(0..classes)).collect();
        let qk: Vec<usize> = (0..nq).map(|_| dk[rng.gen_range(0..nd)]).collect();
        let s = retrieval_scores(&RetrievalIndex::new(Matrix::from_rows(&db), dk.clone(), Matrix::from_rows(&q), qk.clone()).unwrap());
        let o = retrieval_oracle(&db, &dk, &q, &qk);
        ensure!(
            (s.precision_at_1, s.r_precision, s.map_at_r) == o,
            "trial {trial}: {:?} vs oracle {o:?}",
            (s.precision_at_1, s.r_precision, s.map_at_r)
        );
    }
    let keys = ["a", "a", "b", "a", "b"];
    let s = score_ranking(&[0, 1, 2, 3, 4], &keys, &"a").unwrap();
    ensure!(s.r_precision == 2.0 / 3.0 && s.map_at_r == 2.0 / 3.0, "hits {{1,2}}: {s:?}");
    let s = score_ranking(&[0, 2, 1, 3, 4], &keys, &"a").unwrap();
    ensure!(s.map_at_r == (1.0 + 0.0 + 2.0 / 3.0) / 3.0, "hits {{1,3}}: {s:?}");

    let u = [0, 0, 1, 1, 2, 2];
    ensure!(ami(&u, &u).unwrap() == 1.0, "identical partitions");
    ensure!((ami(&u, &[1, 1, 2, 2, 0, 0]).unwrap() - 1.0).abs() < 1e-12, "permuted partitions");
    // brute-force mean MI over all 720 permutations, frozen before the build
    const SIX_ITEM_ORACLE: f64 = 0.5023607027202676;
    let six = ami(&u, &[0, 0, 1, 1, 1, 2]).unwrap();
    ensure!((six - SIX_ITEM_ORACLE).abs() <= 1e-9, "6-item AMI {six}");

    let truth: Vec<usize> = (0..200).map(|i| i % 4).collect();
    let mean = (0..200)
        .map(|_| {
            let p: Vec<usize> = (0..200).map(|_| rng.gen_range(0..4)).collect();
            ami(&truth, &p).unwrap()
        })
        .sum::<f64>()
        / 200.0;
    ensure!(mean.abs() <= 0.05, "random-partition mean AMI {mean}");
    Ok(format!(
        "200 oracle fixtures exact, 2/3 and 5/9 exact, 6-item AMI {six:.12}, random mean AMI {mean:+.4}"
    ))
}

// ---------------------------------------------------------------- A4

/// Pixel-level oracle: direct 2-D Gaussian convolution with replicated
/// borders, max filter, threshold, flood-fill components, largest bbox.
fn motion_area_oracle(a: &ImageBuffer, b: &ImageBuffer) -> u64 {
    let (w, h) = (a.width() as i64, a.height() as i64);
    let luma = |img: &ImageBuffer, x: i64, y: i64| {
        let p = img.pixel(x.clamp(0, w - 1) as u32, y.clamp(0, h - 1) as u32);
        0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64
    };
    let sigma = 0.3 * ((5.0 - 1.0) / 2.0 - 1.0) + 0.8;
    let g: Vec<f64> = (-2..=2).map(|i: i64| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let gs: f64 = g.iter().sum();
    let blur = |img: &ImageBuffer, x: i64, y: i64| {
        let mut s = 0.0;
        for dy in -2..=2i64 {
            for dx in -2..=2i64 {
                s += g[(dy + 2) as usize] * g[(dx + 2) as usize] / (gs * gs) * luma(img, x + dx, y + dy);
            }
        }
        s
    };
    let diff: Vec<f64> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (x, y)))
        .map(|(x, y)| (blur(a, x, y) - blur(b, x, y)).abs())
        .collect();
    let at = |x: i64, y: i64| diff[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
    let mut fg = vec![false; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut m: f64 = 0.0;
            for dy in -2..=2 {
                for dx in -2..=2 {
                    m = m.max(at(x + dx, y + dy));
                }
            }
            fg[(y * w + x) as usize] = m > 40.0;
        }
    }
    let mut seen = vec![false; fg.len()];
    let mut best = 0;
    for start in 0..fg.len() {
        if !fg[start] || seen[start] {
            continue;
        }
        let (mut x0, mut y0, mut x1, mut y1) = (i64::MAX, i64::MAX, 0, 0);
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i as i64 % w, i as i64 / w);
            (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x), y1.max(y));
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && nx < w && ny < h {
                        let j = (ny * w + nx) as usize;
                        if fg[j] && !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        best = best.max(((x1 - x0 + 1) * (y1 - y0 + 1)) as u64);
    }
    best
}

fn a4() -> Outcome {
    let cfg = MotionConfig::default();
    let still = vec![ImageBuffer::filled(80, 60, [30, 90, 140]); 50];
    let t = motion_det(&still, &cfg).unwrap();
    ensure!(t.is_empty(), "constant video saved {} transitions", t.len());

    let black = ImageBuffer::filled(160, 120, [0, 0, 0]);
    let mut square = black.clone();
    square.fill_rect(
        Rect {
            x: 48,
            y: 28,
            width: 64,
            height: 64,
        },
        [255, 255, 255],
    );
    let frames: Vec<ImageBuffer> = (0..10).map(|i| if i < 5 { black.clone() } else { square.clone() }).collect();
    let sq_cfg = MotionConfig {
        contour_area_threshold: 2000,
        ..cfg
    };
    let t = motion_det(&frames, &sq_cfg).unwrap();
    let pairs: Vec<(usize, usize)> = t.iter().map(|t| t.pair()).collect();
    ensure!(pairs == vec![(4, 5)], "white square transitions {pairs:?}");
    let oracle = motion_area_oracle(&black, &square);
    ensure!(t[0].max_area == oracle, "area {} vs oracle {oracle}", t[0].max_area);

    // abrupt persistent events in disjoint cells, far enough apart that
    // blur and dilation never merge two of them
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut cells: Vec<(u32, u32)> = (0..5).flat_map(|r| (0..5).map(move |c| (c * 48 + 6, r * 36 + 6))).collect();
    let mut video = vec![ImageBuffer::filled(240, 180, [10, 10, 10])];
    for i in 1..40 {
        let mut next = video[i - 1].clone();
        if rng.gen_bool(0.4) && !cells.is_empty() {
            let (x, y) = cells.swap_remove(rng.gen_range(0..cells.len()));
            let (w, h) = (rng.gen_range(2..=30), rng.gen_range(2..=20));
            next.fill_rect(Rect { x, y, width: w, height: h }, [rng.gen_range(60..=255); 3]);
        }
        video.push(next);
    }
    let mut previous: Option<BTreeSet<(usize, usize)>> = None;
    for tc in (0..10).rev().map(|k| k * 100) {
        let saved: BTreeSet<(usize, usize)> = motion_det(
            &video,
            &MotionConfig {
                contour_area_threshold: tc,
                ..cfg
            },
        )
        .unwrap()
        .iter()
        .map(|t| t.pair())
        .collect();
        if let Some(p) = &previous {
            ensure!(saved.is_superset(p), "T_C = {tc} dropped transitions");
        }
        previous = Some(saved);
    }
    Ok(format!(
        "constant video: 0 transitions; square: (4,5) with bbox area {oracle} = pixel oracle; 10-threshold sweep monotone"
    ))
}

// ---------------------------------------------------------------- A5 / A7

struct ToyRun {
    checkpoint: Vec<u8>,
    report: String,
    summary: String,
}

fn toy_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 50,
        batch_size: 64,
        learning_rate: 1e-4,
        temperature: 0.1,
        levels: Level::ALL.to_vec(),
        weights: vec![0.2, 0.4, 0.4],
        seed: 17,
        head_dim: 128,
        conv_channels: [32, 64],
        preprocess: PreprocessConfig {
            width: 48,
            height: 32,
            brightness: 0.1,
            hflip_probability: 0.5,
        },
        ..Default::default()
    }
}

fn toy_run() -> Result<ToyRun, String> {
    let fixture = toy_fixture(&FixtureConfig::default()).map_err(|e| e.to_string())?;
    let cfg = toy_train_config();
    let outcome = train_in_memory(&fixture.records, &fixture.images, &cfg, None).map_err(|e| e.to_string())?;
    let losses = epoch_losses(&outcome.log);
    ensure!(
        losses[19] < losses[0],
        "epoch-20 loss {} not below epoch-1 loss {}",
        losses[19],
        losses[0]
    );
    let eval = evaluate_in_memory(
        &outcome.model,
        &fixture.records,
        &fixture.images,
        &EvalOptions {
            seed: 5,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let svc = eval.report.level(Level::Svc).unwrap();
    ensure!(svc.precision_at_1 >= 0.90, "svc Precision@1 {:.4} < 0.90", svc.precision_at_1);
    ensure!(svc.r_precision >= 0.80, "svc R-Precision {:.4} < 0.80", svc.r_precision);

    let reg = LabelRegistry::default();
    for p in &eval.predictions {
        reg.check(&p.predicted).map_err(|e| e.to_string())?;
    }
    for a in &eval.predictions {
        for b in &eval.predictions {
            for (fine, coarse) in [(Level::Svc, Level::Sv), (Level::Sv, Level::S), (Level::Svc, Level::S)] {
                if a.predicted.key(fine) == b.predicted.key(fine) {
                    ensure!(
                        a.predicted.key(coarse) == b.predicted.key(coarse),
                        "prediction hierarchy inconsistent"
                    );
                }
            }
        }
    }
    let mut checkpoint = Vec::new();
    write_checkpoint(&outcome.model, &mut checkpoint).map_err(|e| e.to_string())?;
    Ok(ToyRun {
        checkpoint,
        report: eval.report.to_json(),
        summary: format!(
            "svc P@1 {:.4}, R-Prec {:.4}, mAP@R {:.4}, AMI {:.4}; loss {:.3} → {:.3}; {} predictions hierarchy-consistent",
            svc.precision_at_1,
            svc.r_precision,
            svc.map_at_r,
            svc.ami,
            losses[0],
            losses[losses.len() - 1],
            eval.predictions.len()
        ),
    })
}

// ---------------------------------------------------------------- A6

fn a6() -> Outcome {
    let fixture = toy_fixture(&FixtureConfig {
        train_per_class: 56,
        test_per_class: 0,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    // natural frames only, relabelled as unobserved raw training frames
    let (records, images): (Vec<FrameRecord>, Vec<ImageBuffer>) = fixture
        .records
        .iter()
        .zip(&fixture.images)
        .filter(|(r, _)| !r.synthetic)
        .map(|(r, i)| {
            let mut r = r.clone();
            r.context_observed = false;
            (r, i.clone())
        })
        .take(1000)
        .unzip();
    ensure!(records.len() >= 300, "only {} natural frames", records.len());
    let n = records.len();
    let cfg = SynthConfig::default();
    let mut menus = 0usize;
    let mut generated = 0usize;
    // several seeds over the pool give the 1 000 generations
    for seed in 0..(1000usize.div_ceil(n)) as u64 {
        let out = augment_in_memory(&records, &images, &fixture.assets, &cfg, 1.0, seed).map_err(|e| e.to_string())?;
        for ((r, img), p) in out.records[n..].iter().zip(&out.images[n..]).zip(&out.placements) {
            if generated == 1000 {
                break;
            }
            generated += 1;
            ensure!(
                p.rect.fits_within(img.width(), img.height()),
                "placement {:?} out of bounds",
                p.rect
            );
            ensure!(
                r.label.context == p.generator && r.synthetic && r.context_observed,
                "label not rewritten for {}",
                r.id()
            );
            let base = images
                .iter()
                .zip(&records)
                .find(|(_, b)| b.video_id == r.video_id && b.frame_index == r.frame_index)
                .unwrap()
                .0;
            for y in 0..img.height() {
                for x in 0..img.width() {
                    let inside = x >= p.rect.x && x < p.rect.x + p.rect.width && y >= p.rect.y && y < p.rect.y + p.rect.height;
                    ensure!(
                        inside || img.pixel(x, y) == base.pixel(x, y),
                        "pixel outside placement changed in {}",
                        r.id()
                    );
                }
            }
            if p.generator == ContextValue::Menu {
                menus += 1;
                let pool = fixture.assets.menus_for(&r.label.software);
                ensure!(p.software_pool.as_deref() == Some(r.label.software.as_str()), "menu pool mismatch");
                ensure!(
                    pool.iter().any(|m| m.source_id == p.asset_id),
                    "menu {} not in {} pool",
                    p.asset_id,
                    r.label.software
                );
            }
        }
    }
    ensure!(generated == 1000, "only {generated} generations");
    let sigma = (1000.0f64 * 0.25).sqrt();
    ensure!(
        (menus as f64 - 500.0).abs() <= 3.0 * sigma,
        "{menus} menus of 1000 (3σ = {:.1})",
        3.0 * sigma
    );

    let count = |n: usize| {
        let recs: Vec<FrameRecord> = (0..n)
            .map(|i| FrameRecord {
                video_id: format!("v{}", i / 100),
                frame_index: i as u64,
                image_path: format!("v/{i}.png"),
                label: ChainLabel::new("Terminal", "Main View", ContextValue::None),
                context_observed: false,
                synthetic: false,
                split: Split::Train,
            })
            .collect();
        plan_augmentation(&recs, 0.6666, 1).unwrap().len()
    };
    for n in [1000, 9597] {
        let got = count(n);
        let expected = (0.6666 * n as f64).floor() as usize;
        ensure!(got == expected, "fraction 0.6666 of {n}: {got} synthetic, expected {expected}");
    }
    Ok(format!(
        "1000 generations in-bounds and relabelled, {menus} menus (|Δ| ≤ 3σ = {:.1}), ⌊0.6666·9597⌋ = 6397",
        3.0 * sigma
    ))
}

// ---------------------------------------------------------------- runner

fn run(id: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let elapsed = start.elapsed();
    let (ok, detail) = match result {
        Ok(d) if elapsed <= limit => (true, d),
        Ok(d) => (
            false,
            format!("{d}; runtime {:.1}s exceeds {}s", elapsed.as_secs_f64(), limit.as_secs()),
        ),
        Err(e) => (false, e),
    };
    println!(
        "{id} {} ({:.1}s): {detail}",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    ok
}

fn main() {
    // `cargo test -- --list` and filters from the libtest CLI are not supported
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let secs = Duration::from_secs;
    let mut ok = true;
    ok &= run("A1", secs(5), a1);
    ok &= run("A2", secs(30), a2);
    ok &= run("A3", secs(60), a3);
    ok &= run("A4", secs(30), a4);
    let mut first: Option<ToyRun> = None;
    ok &= run("A5", secs(300), || {
        let r = toy_run()?;
        let s = r.summary.clone();
        first = Some(r);
        Ok(s)
    });
    ok &= run("A6", secs(60), a6);
    ok &= run("A7", secs(300), || {
        let a = first.as_ref().ok_or("A5 did not produce a run")?;
        let b = toy_run()?;
        ensure!(a.checkpoint == b.checkpoint, "checkpoints differ");
        ensure!(a.report == b.report, "reports differ");
        Ok(format!(
            "checkpoint ({} bytes) and report byte-identical across runs",
            a.checkpoint.len()
        ))
    });
    if !ok {
        std::process::exit(1);
    }
}
