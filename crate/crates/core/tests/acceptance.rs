//! Acceptance suite. Prints one `criterion N: PASS|FAIL|SKIP` line per
//! criterion and exits nonzero when any criterion fails.
//!
//! `EDGEBIAS_ACCEPTANCE_ONLY=1,2,6` restricts the run to the listed
//! criteria. `EDGEBIAS_COCO_ANNOTATIONS` points criterion 7 at a COCO
//! instances file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use edgebias::augment::{shift_object_to_boundary, Augmentation};
use edgebias::coco::{centroid_heatmap, parse_annotations, read_annotations};
use edgebias::dataset::{encode_idx, parse_idx, BBox, BackgroundSource, BackgroundSpec, Dataset, IdxData, PlacementPolicy};
use edgebias::harness::{
    checkpoint_path, run_with_dataset, summarize_asymmetry, ExperimentConfig, RunRecord, CENTRAL_BAND, EDGE_BAND,
};
use edgebias::rng::stream;
use edgebias::saliency::{dispersion_normalize, saliency_shift_map, CanvasScene, ShiftGrid};
use edgebias::unet::{build_unet, load_checkpoint, Model, UNetConfig};
use edgebias::verify::{equivariance_errors, gradcheck_suite, MODEL_TOLERANCE, OP_TOLERANCE};
use edgebias::PaddingMode;
use rand::Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const DEFAULT_COCO: &str = "data/coco/annotations/instances_val2017.json";
const SALIENCY_SCENES: usize = 4;

enum Status {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    status: Status,
    detail: String,
}

impl Outcome {
    fn check(ok: bool, detail: String) -> Outcome {
        Outcome {
            status: if ok { Status::Pass } else { Status::Fail },
            detail,
        }
    }

    fn error(e: impl std::fmt::Display) -> Outcome {
        Outcome {
            status: Status::Fail,
            detail: format!("error: {e}"),
        }
    }
}

type Check = Result<Outcome, Box<dyn std::error::Error>>;

/// Center-trained and edge-trained runs shared by criteria 3 to 5.
struct Regional {
    center: RunRecord,
    edge: RunRecord,
    base: Dataset,
    dir: tempfile::TempDir,
    seconds: f64,
}

fn regional_config(policy: PlacementPolicy, dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        train_policy: policy,
        output_dir: Some(dir.to_path_buf()),
        ..ExperimentConfig::default()
    }
}

fn run_regional() -> Result<Regional, Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let start = Instant::now();
    let probe = ExperimentConfig::default();
    let base = Dataset::new(probe.dataset.clone())?;
    let center = run_with_dataset(
        &regional_config(PlacementPolicy::AllowedCentral { allowed: 0.3 }, &dir.path().join("center")),
        &base,
    )?;
    let edge = run_with_dataset(
        &regional_config(PlacementPolicy::ForbiddenCentral { forbidden: 0.7 }, &dir.path().join("edge")),
        &base,
    )?;
    Ok(Regional {
        center,
        edge,
        base,
        dir,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn criterion1() -> Check {
    let start = Instant::now();
    let reports = gradcheck_suite(0)?;
    let secs = start.elapsed().as_secs_f64();
    let worst = |model: bool| {
        reports
            .iter()
            .filter(|r| r.name.starts_with("unet") == model)
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    };
    let (ops, model) = (worst(false), worst(true));
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    Ok(Outcome::check(
        failed.is_empty() && ops < OP_TOLERANCE && model < MODEL_TOLERANCE && secs < 60.0,
        format!(
            "{} checks, worst op {ops:.2e} (< {OP_TOLERANCE:.0e}), worst model {model:.2e} (< {MODEL_TOLERANCE:.0e}), failed {failed:?}, {secs:.1}s",
            reports.len()
        ),
    ))
}

fn criterion2() -> Check {
    let start = Instant::now();
    let circular = equivariance_errors(PaddingMode::Circular, (64, 96), 10, 11)?;
    let zero = equivariance_errors(PaddingMode::Zero, (64, 96), 10, 11)?;
    let secs = start.elapsed().as_secs_f64();
    let worst_circular = circular.iter().copied().fold(0.0, f64::max);
    let violations = zero.iter().filter(|&&e| e > 1e-3).count();
    let least_zero = zero.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(Outcome::check(
        worst_circular < 1e-4 && violations >= 9 && secs < 60.0,
        format!(
            "circular max error {worst_circular:.2e} (< 1e-4), zero padding > 1e-3 on {violations}/10 (min {least_zero:.2e}), {secs:.1}s"
        ),
    ))
}

fn criterion3(r: &Regional) -> Check {
    let a = summarize_asymmetry(&r.center, &r.edge)?;
    let center_ok = a.center_to_edge_ratio_of_means >= 10.0;
    let edge_ok = a.edge_to_center_ratio_of_means <= 3.0;
    let c = &r.center.matrix.cells[0];
    let col = |p| r.center.matrix.column(p).expect("default eval bands");
    Ok(Outcome::check(
        center_ok && edge_ok && r.seconds < 1800.0,
        format!(
            "center-trained edge/center {:.3} (>= 10; per-repeat mean {:.3}; losses {:.5} / {:.5}), edge-trained center/edge {:.3} (<= 3; per-repeat mean {:.3}), {:.0}s",
            a.center_to_edge_ratio_of_means,
            a.center_to_edge_ratio,
            c[col(&EDGE_BAND)],
            c[col(&CENTRAL_BAND)],
            a.edge_to_center_ratio_of_means,
            a.edge_to_center_ratio,
            r.seconds
        ),
    ))
}

fn edge_over_center(record: &RunRecord) -> (f64, f64) {
    let m = &record.matrix;
    let (cc, ce) = (m.column(&CENTRAL_BAND).unwrap(), m.column(&EDGE_BAND).unwrap());
    (m.cells[0][ce] / m.cells[0][cc], m.cells[0][cc])
}

fn criterion4(r: &Regional) -> Check {
    let start = Instant::now();
    let config = ExperimentConfig {
        augmentations: vec![Augmentation::RandomPeriodicShift { max_frac: 0.25 }],
        ..regional_config(PlacementPolicy::AllowedCentral { allowed: 0.3 }, &r.dir.path().join("shifted"))
    };
    let shifted = run_with_dataset(&config, &r.base)?;
    let (plain_ratio, plain_center) = edge_over_center(&r.center);
    let (shift_ratio, shift_center) = edge_over_center(&shifted);
    let reduction = plain_ratio / shift_ratio;
    let rise = shift_center / plain_center;
    Ok(Outcome::check(
        reduction >= 3.0 && rise <= 2.0,
        format!(
            "edge/center {plain_ratio:.3} -> {shift_ratio:.3} (reduction {reduction:.2}x >= 3), central loss {plain_center:.5} -> {shift_center:.5} (rise {rise:.2}x <= 2), {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    ))
}

/// Mean ring ratio over every repeat checkpoint and a few scenes.
fn mean_ring_ratio(record: &RunRecord, base: &Dataset, dir: &Path) -> Result<f64, Box<dyn std::error::Error>> {
    let config = &record.config;
    let background = BackgroundSource::load(&config.dataset.background)?;
    // Shifts aligned to the pooling factor leave every r < 0.2 entry at exactly 0.
    let grid = ShiftGrid {
        extent_x: 32,
        extent_y: 16,
        stride: 2,
    };
    let glyphs = base.glyphs();
    let mut ratios = Vec::new();
    for k in 0..record.repeats.len() {
        let (model, _): (Model<f32>, _) = load_checkpoint(&checkpoint_path(dir, k), Some(&config.model))?;
        for s in 0..SALIENCY_SCENES {
            let g = (s * 997 + k * 13) % glyphs.len();
            let scene = CanvasScene::new(
                glyphs.image(g),
                glyphs.labels()[g],
                &background,
                (config.dataset.height, config.dataset.width),
                grid,
                &mut stream(s as u64),
            )?;
            let map = saliency_shift_map(&model, &scene)?;
            if map.raw_at(0, 0) != Some(0.0) {
                return Err("raw (0,0) entry is not 0".into());
            }
            ratios.push(map.ring_ratio().ok_or("empty ring")?);
        }
    }
    Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
}

fn criterion5(r: &Regional) -> Check {
    let start = Instant::now();
    let model = build_unet::<f32>(&UNetConfig {
        padding: PaddingMode::Circular,
        seed: 5,
        ..UNetConfig::default()
    })?;
    let stride = model.config().size_multiple() as usize;
    let black = BackgroundSource::load(&BackgroundSpec::Constant { value: 0.0 })?;
    let glyphs = r.base.glyphs();
    let scene = CanvasScene::new(
        glyphs.image(0),
        glyphs.labels()[0],
        &black,
        (64, 96),
        ShiftGrid {
            extent_x: 32,
            extent_y: 16,
            stride,
        },
        &mut stream(0),
    )?;
    let circ = saliency_shift_map(&model, &scene)?;
    let circ_worst = circ.raw.iter().copied().fold(0.0, f64::max);
    let circ_zero = circ.raw_at(0, 0) == Some(0.0);

    let center_dir = r.dir.path().join("center");
    let edge_dir = r.dir.path().join("edge");
    let center = mean_ring_ratio(&r.center, &r.base, &center_dir)?;
    let edge = mean_ring_ratio(&r.edge, &r.base, &edge_dir)?;
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome::check(
        circ_zero && circ_worst < 1e-4 && center > edge && secs < 600.0,
        format!(
            "raw (0,0) = 0: {circ_zero}, circular max entry {circ_worst:.2e} (< 1e-4), ring ratio center-trained {center:.4} > edge-trained {edge:.4}, {secs:.0}s"
        ),
    ))
}

fn idx_fixture() -> Result<bool, Box<dyn std::error::Error>> {
    let payload = [0u8, 255, 128, 7, 1, 2, 254, 100];
    let bytes = encode_idx(&[2, 2, 2], &payload);
    if bytes[..4] != [0, 0, 8, 3] {
        return Ok(false);
    }
    let IdxData::Images { count, rows, cols, pixels } = parse_idx(&bytes)? else {
        return Ok(false);
    };
    let want: Vec<u32> = payload.iter().map(|&b| (b as f32 / 255.0).to_bits()).collect();
    let got: Vec<u32> = pixels.iter().map(|v| v.to_bits()).collect();
    Ok((count, rows, cols) == (2, 2, 2) && got == want)
}

const COCO_FIXTURE: &str = r#"{
  "images": [{"id": 1, "width": 640, "height": 480}, {"id": 2, "width": 100, "height": 200}],
  "annotations": [
    {"id": 10, "image_id": 1, "category_id": 1, "bbox": [300, 220, 40, 40]},
    {"id": 11, "image_id": 1, "category_id": 1, "bbox": [0, 0, 30, 20]},
    {"id": 12, "image_id": 2, "category_id": 1, "bbox": [70, 150, 30, 50]}
  ],
  "categories": [{"id": 1, "name": "person"}]
}"#;

fn centroid_fixture() -> Result<bool, Box<dyn std::error::Error>> {
    let set = parse_annotations(COCO_FIXTURE.as_bytes())?;
    let g = 8;
    let heatmap = centroid_heatmap(&set, "person", g)?;
    // (x, y, w, h, image width, image height)
    let records = [
        (300.0, 220.0, 40.0, 40.0, 640.0, 480.0),
        (0.0, 0.0, 30.0, 20.0, 640.0, 480.0),
        (70.0, 150.0, 30.0, 50.0, 100.0, 200.0),
    ];
    let mut brute = vec![0u64; g * g];
    for (x, y, w, h, iw, ih) in records {
        let (u, v): (f64, f64) = ((x + w / 2.0) / iw, (y + h / 2.0) / ih);
        for row in 0..g {
            for col in 0..g {
                let inside = |t: f64, c: usize| {
                    let (lo, hi) = (c as f64 / g as f64, (c + 1) as f64 / g as f64);
                    lo <= t && (t < hi || (c == g - 1 && t <= 1.0))
                };
                if inside(u, col) && inside(v, row) {
                    brute[row * g + col] += 1;
                }
            }
        }
    }
    Ok(heatmap.sum() == 3 && heatmap.total_count == 3 && heatmap.counts == brute)
}

fn boundary_fixture() -> Result<bool, Box<dyn std::error::Error>> {
    let mut rng = stream(17);
    for _ in 0..200 {
        let (w, h) = (rng.gen_range(8..64usize), rng.gen_range(8..64usize));
        let boxes: Vec<BBox> = (0..rng.gen_range(1..4))
            .map(|_| {
                let (bw, bh) = (rng.gen_range(1..=w), rng.gen_range(1..=h));
                BBox {
                    x: rng.gen_range(0..=w - bw),
                    y: rng.gen_range(0..=h - bh),
                    w: bw,
                    h: bh,
                }
            })
            .collect();
        let image: Vec<u32> = (0..(w * h) as u32).collect();
        let labels = vec![0u8; w * h];
        let out = shift_object_to_boundary(&image, h, w, &boxes, &labels, &mut rng)?;
        let b = out.boxes[out.chosen];
        let d = b.x.min(b.y).min(w - (b.x + b.w)).min(h - (b.y + b.h));
        if d != 0 || (b.w, b.h) != (boxes[out.chosen].w, boxes[out.chosen].h) {
            return Ok(false);
        }
    }
    Ok(true)
}

fn dispersion_fixture() -> bool {
    let n = dispersion_normalize(&[0.0, 2.0, 4.0, 6.0]);
    let s5 = 5f64.sqrt();
    let want = [0.0, 2.0 / s5, 4.0 / s5, 6.0 / s5];
    let rounded = [0.0, 0.894, 1.789, 2.683];
    n.normalized
        && n.values.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-9)
        && n.values.iter().zip(rounded).all(|(a, b)| (a - b).abs() < 5e-4)
}

fn stream_digest(data: &Dataset, threads: Option<usize>) -> Result<Vec<u8>, Box<dyn std::error::Error + Send + Sync>> {
    let generate = || -> edgebias::Result<Vec<Vec<u8>>> {
        match threads {
            None => (0..1000).map(|i| data.sample(i).map(|s| s.to_bytes())).collect(),
            Some(_) => (0..1000).into_par_iter().map(|i| data.sample(i).map(|s| s.to_bytes())).collect(),
        }
    };
    let samples = match threads {
        None => generate()?,
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(generate)?,
    };
    let mut h = Sha256::new();
    for s in samples {
        h.update(s);
    }
    Ok(h.finalize().to_vec())
}

fn criterion6() -> Check {
    let start = Instant::now();
    let idx = idx_fixture()?;
    let centroid = centroid_fixture()?;
    let boundary = boundary_fixture()?;
    let dispersion = dispersion_fixture();
    let data = Dataset::new(ExperimentConfig::default().dataset)?.with_policy(PlacementPolicy::Unrestricted)?;
    let serial = stream_digest(&data, None).map_err(|e| e.to_string())?;
    let mut determinism = true;
    for n in [1, 2, 4] {
        determinism &= stream_digest(&data, Some(n)).map_err(|e| e.to_string())? == serial;
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome::check(
        idx && centroid && boundary && dispersion && determinism && secs < 60.0,
        format!(
            "idx {idx}, centroid grid {centroid}, boundary distance {boundary}, dispersion {dispersion}, 1000-sample determinism over 1/2/4 threads {determinism}, {secs:.1}s"
        ),
    ))
}

fn coco_path() -> Option<PathBuf> {
    let path = std::env::var_os("EDGEBIAS_COCO_ANNOTATIONS")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_COCO));
    path.exists().then_some(path)
}

fn criterion7() -> Check {
    let Some(path) = coco_path() else {
        return Ok(Outcome {
            status: Status::Skip,
            detail: "no COCO annotations (set EDGEBIAS_COCO_ANNOTATIONS)".into(),
        });
    };
    let set = read_annotations(&path)?;
    let mut checked = 0;
    let mut worst: (f64, String) = (0.0, String::new());
    for cat in &set.categories {
        if set.count(cat.id) < 1000 {
            continue;
        }
        let heatmap = centroid_heatmap(&set, &cat.id.to_string(), 32)?;
        let ratio = heatmap.outer_ring_ratio().unwrap_or(f64::INFINITY);
        checked += 1;
        if ratio > worst.0 {
            worst = (ratio, cat.name.clone());
        }
    }
    if checked == 0 {
        return Ok(Outcome {
            status: Status::Skip,
            detail: format!("no category in {} has 1000 instances", path.display()),
        });
    }
    Ok(Outcome::check(
        worst.0 < 0.25,
        format!(
            "{checked} categories with >= 1000 instances, worst outer-ring ratio {:.4} ({}) (< 0.25)",
            worst.0, worst.1
        ),
    ))
}

fn selected() -> Vec<u8> {
    match std::env::var("EDGEBIAS_ACCEPTANCE_ONLY") {
        Ok(list) => list.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        Err(_) => (1..=7).collect(),
    }
}

fn main() -> ExitCode {
    let wanted = selected();
    let mut regional: Option<Result<Regional, String>> = None;
    let mut failures = 0;
    for id in 1..=7u8 {
        if !wanted.contains(&id) {
            continue;
        }
        let outcome = match id {
            1 => criterion1(),
            2 => criterion2(),
            3..=5 => {
                let shared = regional.get_or_insert_with(|| run_regional().map_err(|e| e.to_string()));
                match shared {
                    Ok(r) => match id {
                        3 => criterion3(r),
                        4 => criterion4(r),
                        _ => criterion5(r),
                    },
                    Err(e) => Ok(Outcome::error(e)),
                }
            }
            6 => criterion6(),
            _ => criterion7(),
        }
        .unwrap_or_else(Outcome::error);
        let tag = match outcome.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failures += 1;
                "FAIL"
            }
            Status::Skip => "SKIP",
        };
        println!("criterion {id}: {tag} {}", outcome.detail);
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
