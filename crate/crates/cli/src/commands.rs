//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::{Args, ValueEnum};
use edgebias::augment::{
    draw_random_shift, edge_block_drop, max_shift, periodic_shift, shift_object_to_boundary, BandWidth, EdgeDropSpec,
    ShiftSpec, Side,
};
use edgebias::coco::{bbox_heatmap, centroid_heatmap, read_annotations, write_heatmap_pgm, Heatmap};
use edgebias::dataset::{BBox, BackgroundSource, BackgroundSpec, Dataset, DatasetConfig};
use edgebias::harness::{
    evaluate_bands, export_results, normalize_matrix, read_results, run_regional_training, summarize_asymmetry,
    ExperimentConfig, LossMatrix, Normalization,
};
use edgebias::pnm::{read_pnm, scale_to_u8, to_u8, write_pgm};
use edgebias::rng::stream;
use edgebias::saliency::{saliency_shift_map, CanvasScene, SaliencyShiftMap, ShiftGrid};
use edgebias::tensor::{Shape, Tensor};
use edgebias::unet::{load_checkpoint, Model};
use edgebias::verify::{equivariance_errors, gradcheck_suite};
use edgebias::{Error, PaddingMode, Scalar};

use crate::overrides::load_config;
use crate::ValidationFailed;

/// Gray level per class step in label visualizations.
const LABEL_STEP: u8 = 25;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Prints one line per check and fails when any check failed.
fn report_checks(checks: &[(String, bool)]) -> Result<()> {
    for (name, ok) in checks {
        println!("{} {name}", if *ok { "PASS" } else { "FAIL" });
    }
    let failed = checks.iter().filter(|(_, ok)| !ok).count();
    if failed > 0 {
        return Err(ValidationFailed(format!("{failed} of {} checks failed", checks.len())).into());
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum HeatmapKind {
    Centroid,
    Bbox,
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    /// COCO-style instances JSON.
    #[arg(long)]
    annotations: PathBuf,
    /// Category name or id; repeatable. Defaults to every category.
    #[arg(long)]
    category: Vec<String>,
    #[arg(long, default_value_t = 32)]
    grid: usize,
    #[arg(long, value_enum, default_value = "centroid")]
    mode: HeatmapKind,
    #[arg(long)]
    out: PathBuf,
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

pub fn audit(a: AuditArgs) -> Result<()> {
    let set = read_annotations(&a.annotations)?;
    let keys: Vec<String> = if a.category.is_empty() {
        set.categories.iter().map(|c| c.id.to_string()).collect()
    } else {
        a.category.clone()
    };
    create_dir(&a.out)?;
    println!("category,instances,outer_ring_ratio,heatmap");
    for key in keys {
        let heatmap: Heatmap = match a.mode {
            HeatmapKind::Centroid => centroid_heatmap(&set, &key, a.grid)?,
            HeatmapKind::Bbox => bbox_heatmap(&set, &key, a.grid)?,
        };
        let name = set.category(&key)?.name.clone();
        let pgm = a.out.join(format!("heatmap_{}.pgm", file_stem(&name)));
        write_heatmap_pgm(&heatmap, &pgm)?;
        let ratio = heatmap
            .outer_ring_ratio()
            .map(|r| format!("{r:.4}"))
            .unwrap_or_else(|| "nan".into());
        println!("{name},{},{ratio},{}", heatmap.total_count, pgm.display());
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Dataset config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `dotted.key=value` override; repeatable.
    #[arg(long = "set")]
    sets: Vec<String>,
    #[arg(long, default_value_t = 3)]
    count: usize,
    /// First sample index.
    #[arg(long, default_value_t = 0)]
    start: usize,
    #[arg(long)]
    out: PathBuf,
}

fn label_pixels(target: &[u8]) -> Vec<u8> {
    target.iter().map(|&c| c.saturating_mul(LABEL_STEP)).collect()
}

pub fn gen(a: GenArgs) -> Result<()> {
    let config: DatasetConfig = load_config(a.config.as_deref(), &a.sets)?;
    let data = Dataset::new(config)?;
    create_dir(&a.out)?;
    let samples = data.samples(a.start..a.start + a.count)?;
    let mut meta = String::new();
    for (k, s) in samples.iter().enumerate() {
        let i = a.start + k;
        let (h, w) = (s.height(), s.width());
        let pixels: Vec<u8> = s.input.data().iter().map(|&v| to_u8(v)).collect();
        write_pgm(&a.out.join(format!("sample_{i:05}.pgm")), w, h, &pixels)?;
        write_pgm(&a.out.join(format!("label_{i:05}.pgm")), w, h, &label_pixels(&s.target))?;
        meta.push_str(&serde_json::to_string(&serde_json::json!({ "index": i, "meta": s.meta }))?);
        meta.push('\n');
    }
    write_text(&a.out.join("samples.jsonl"), &meta)?;
    println!("wrote {} sample/label pairs to {}", samples.len(), a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Experiment config JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `dotted.key=value` override; repeatable.
    #[arg(long = "set")]
    sets: Vec<String>,
    /// Output directory; overrides `output_dir` of the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn print_matrix(m: &LossMatrix) {
    print!("{}", m.to_csv());
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut config: ExperimentConfig = load_config(a.config.as_deref(), &a.sets)?;
    if let Some(out) = a.out {
        config.output_dir = Some(out);
    }
    let out = config
        .output_dir
        .clone()
        .ok_or_else(|| Error::Config("an output directory is required (--out or output_dir)".into()))?;
    let record = run_regional_training(&config)?;
    export_results(&record, &out)?;
    println!("config {}", record.config_hash);
    print_matrix(&record.matrix);
    for m in &record.normalized {
        println!("# {:?}", m.normalization);
        print_matrix(m);
    }
    Ok(())
}

enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

fn load_any(path: &Path) -> Result<AnyModel> {
    match load_checkpoint::<f32>(path, None) {
        Ok((m, _)) => Ok(AnyModel::F32(m)),
        Err(Error::Precision { .. }) => Ok(AnyModel::F64(load_checkpoint::<f64>(path, None)?.0)),
        Err(e) => Err(e.into()),
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Experiment config JSON supplying the dataset, bands and eval_count.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `dotted.key=value` override; repeatable.
    #[arg(long = "set")]
    sets: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let config: ExperimentConfig = load_config(a.config.as_deref(), &a.sets)?;
    config.validate()?;
    let base = Dataset::new(config.dataset.clone())?;
    let row = match load_any(&a.checkpoint)? {
        AnyModel::F32(m) => evaluate_bands(&m, &base, &config.eval_bands, config.eval_count, a.seed)?,
        AnyModel::F64(m) => evaluate_bands(&m, &base, &config.eval_bands, config.eval_count, a.seed)?,
    };
    let label = a
        .checkpoint
        .file_stem()
        .map(|s| file_stem(&s.to_string_lossy()))
        .unwrap_or_else(|| "checkpoint".into());
    let raw = LossMatrix::new(vec![label], config.eval_bands.clone(), vec![row], Normalization::Raw)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("eval_raw.csv"), &raw.to_csv())?;
    print_matrix(&raw);
    for mode in [Normalization::ByCentralBand, Normalization::ByUnrestricted] {
        if let Ok(n) = normalize_matrix(&raw, mode) {
            println!("# {mode:?}");
            print_matrix(&n);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SceneBackground {
    /// The background of the dataset config.
    Config,
    /// All-zero background.
    Black,
}

#[derive(Args, Debug)]
pub struct SaliencyArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset config JSON supplying glyphs, crop size and backgrounds.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `dotted.key=value` override; repeatable.
    #[arg(long = "set")]
    sets: Vec<String>,
    #[arg(long, default_value_t = 32)]
    extent_x: usize,
    #[arg(long, default_value_t = 16)]
    extent_y: usize,
    #[arg(long, default_value_t = 4)]
    stride: usize,
    #[arg(long, value_enum, default_value = "config")]
    background: SceneBackground,
    /// Glyph index within the glyph set.
    #[arg(long, default_value_t = 0)]
    glyph: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn shift_map<T: Scalar>(model: &Model<T>, scene: &CanvasScene) -> Result<SaliencyShiftMap> {
    Ok(saliency_shift_map(model, scene)?)
}

pub fn saliency(a: SaliencyArgs) -> Result<()> {
    let config: DatasetConfig = load_config(a.config.as_deref(), &a.sets)?;
    let glyphs = config.glyph_source.load()?;
    if a.glyph >= glyphs.len() {
        return Err(Error::InvalidArgument(format!("glyph {} out of range ({} glyphs)", a.glyph, glyphs.len())).into());
    }
    let background = match a.background {
        SceneBackground::Config => BackgroundSource::load(&config.background)?,
        SceneBackground::Black => BackgroundSource::load(&BackgroundSpec::Constant { value: 0.0 })?,
    };
    let grid = ShiftGrid {
        extent_x: a.extent_x,
        extent_y: a.extent_y,
        stride: a.stride,
    };
    let scene = CanvasScene::new(
        glyphs.image(a.glyph),
        glyphs.labels()[a.glyph],
        &background,
        (config.height, config.width),
        grid,
        &mut stream(a.seed),
    )?;
    let map = match load_any(&a.checkpoint)? {
        AnyModel::F32(m) => shift_map(&m, &scene)?,
        AnyModel::F64(m) => shift_map(&m, &scene)?,
    };
    create_dir(&a.out)?;
    let (csv, pgm) = (a.out.join("saliency_shift.csv"), a.out.join("saliency_shift.pgm"));
    map.write(&csv, &pgm)?;
    println!(
        "{}x{} shifts, ring ratio {}, wrote {}",
        map.rows(),
        map.cols(),
        map.ring_ratio().map(|r| format!("{r:.4}")).unwrap_or_else(|| "n/a".into()),
        csv.display()
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AugmentOp {
    /// Periodic shift by `--dx`, `--dy`.
    Shift,
    /// Random periodic shift up to `--max-frac` of each dimension.
    RandomShift,
    /// Shift the labelled object onto its closest boundary.
    Boundary,
    /// Edge block drop on one side.
    EdgeDrop,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// Input image (PGM/PPM).
    #[arg(long)]
    input: PathBuf,
    /// Label visualization written by `gen`; required by `boundary`.
    #[arg(long)]
    label: Option<PathBuf>,
    #[arg(long, value_enum)]
    op: AugmentOp,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    dx: i64,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    dy: i64,
    #[arg(long, default_value_t = 0.25)]
    max_frac: f64,
    /// Band width in pixels for `edge-drop`.
    #[arg(long, default_value_t = 8)]
    band: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn read_label(path: &Path, h: usize, w: usize) -> Result<Vec<u8>> {
    let img = read_pnm(path)?;
    if (img.height, img.width) != (h, w) {
        return Err(Error::InvalidArgument(format!(
            "label is {}x{}, image is {h}x{w}",
            img.height, img.width
        ))
        .into());
    }
    Ok(img
        .pixels
        .iter()
        .map(|&v| ((v * 255.0) / LABEL_STEP as f32).round() as u8)
        .collect())
}

/// Tight box of the nonzero labels.
fn label_box(labels: &[u8], h: usize, w: usize) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for (i, _) in labels.iter().enumerate().filter(|(_, &c)| c != 0) {
        let (y, x) = (i / w, i % w);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    (x1 > x0).then(|| BBox {
        x: x0,
        y: y0,
        w: x1 - x0,
        h: y1 - y0,
    })
}

fn sorted(v: &[f32]) -> Vec<u32> {
    let mut bits: Vec<u32> = v.iter().map(|f| f.to_bits()).collect();
    bits.sort_unstable();
    bits
}

pub fn augment(a: AugmentArgs) -> Result<()> {
    let img = read_pnm(&a.input)?;
    let (h, w) = (img.height, img.width);
    let labels = a.label.as_deref().map(|p| read_label(p, h, w)).transpose()?;
    let mut rng = stream(a.seed);
    let mut checks: Vec<(String, bool)> = Vec::new();
    let (out_pixels, out_labels): (Vec<f32>, Option<Vec<u8>>) = match a.op {
        AugmentOp::Shift | AugmentOp::RandomShift => {
            let spec = match a.op {
                AugmentOp::Shift => ShiftSpec::new(a.dx, a.dy),
                _ => draw_random_shift(h, w, a.max_frac, &mut rng)?,
            };
            let shifted = periodic_shift(&img.pixels, h, w, spec);
            println!("shift dx={} dy={}", spec.dx, spec.dy);
            checks.push(("pixel multiset preserved".into(), sorted(&shifted) == sorted(&img.pixels)));
            checks.push((
                "inverse shift restores the input".into(),
                periodic_shift(&shifted, h, w, spec.inverse()) == img.pixels,
            ));
            if a.op == AugmentOp::RandomShift {
                let (mx, my) = (
                    max_shift(a.max_frac, w),
                    max_shift(a.max_frac, h),
                );
                checks.push((
                    format!("|dx| <= {mx} and |dy| <= {my}"),
                    spec.dx.abs() <= mx && spec.dy.abs() <= my,
                ));
            }
            let l = labels.map(|l| periodic_shift(&l, h, w, spec));
            (shifted, l)
        }
        AugmentOp::Boundary => {
            let labels = labels.ok_or_else(|| Error::InvalidArgument("boundary needs --label".into()))?;
            let b = label_box(&labels, h, w)
                .ok_or_else(|| Error::InvalidArgument("label has no object pixels".into()))?;
            let r = shift_object_to_boundary(&img.pixels, h, w, &[b], &labels, &mut rng)?;
            let nb = label_box(&r.labels, h, w).expect("object survives a periodic shift");
            let distance = nb.x.min(nb.y).min(w - (nb.x + nb.w)).min(h - (nb.y + nb.h));
            println!(
                "object {:?} moved {:?} by dx={} dy={} to {:?}",
                b, r.side, r.shift.dx, r.shift.dy, nb
            );
            checks.push(("edge distance is exactly 0".into(), distance == 0));
            checks.push(("object size unchanged".into(), (nb.w, nb.h) == (b.w, b.h)));
            checks.push(("pixel multiset preserved".into(), sorted(&r.image) == sorted(&img.pixels)));
            (r.image, Some(r.labels))
        }
        AugmentOp::EdgeDrop => {
            let spec = EdgeDropSpec {
                probability: 1.0,
                side: None,
                band: BandWidth::Pixels(a.band),
            };
            let x = Tensor::from_vec(Shape::new(1, 1, h, w), img.pixels.iter().map(|&v| v as f64).collect())?;
            let (y, mask) = edge_block_drop(&x, &spec, &mut rng, true)?;
            let (side, band) = mask.dropped(0).expect("probability 1 always drops");
            println!("dropped {band} px on the {side:?} side");
            let inside = |i: usize| {
                let (yy, xx) = (i / w, i % w);
                match side {
                    Side::Left => xx < band,
                    Side::Right => xx >= w - band,
                    Side::Top => yy < band,
                    Side::Bottom => yy >= h - band,
                }
            };
            let kept = (0..h * w).filter(|&i| !inside(i)).count() as f64;
            let factor = (h * w) as f64 / kept;
            checks.push((
                "band is zero".into(),
                (0..h * w).filter(|&i| inside(i)).all(|i| y.data()[i] == 0.0),
            ));
            checks.push((
                format!("kept pixels scaled by {factor:.6}"),
                (0..h * w)
                    .filter(|&i| !inside(i))
                    .all(|i| (y.data()[i] - x.data()[i] * factor).abs() <= 1e-12 * factor),
            ));
            (y.data().iter().map(|&v| v as f32).collect(), labels)
        }
    };
    create_dir(&a.out)?;
    let scaled: Vec<f64> = out_pixels.iter().map(|&v| v as f64).collect();
    let pixels: Vec<u8> = if a.op == AugmentOp::EdgeDrop {
        scale_to_u8(&scaled)
    } else {
        out_pixels.iter().map(|&v| to_u8(v)).collect()
    };
    write_pgm(&a.out.join("augmented.pgm"), w, h, &pixels)?;
    if let Some(l) = out_labels {
        write_pgm(&a.out.join("augmented_label.pgm"), w, h, &label_pixels(&l))?;
    }
    report_checks(&checks)
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shift-equivariance trials per padding mode.
    #[arg(long, default_value_t = 10)]
    trials: usize,
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut checks = Vec::new();
    for r in gradcheck_suite(a.seed)? {
        checks.push((format!("{:<48} max_rel_error={:.3e} (tol {:.0e})", r.name, r.max_rel_error, r.tolerance), r.pass));
    }
    let circular = equivariance_errors(PaddingMode::Circular, (32, 48), a.trials, a.seed)?;
    let worst = circular.iter().cloned().fold(0.0, f64::max);
    checks.push((format!("circular padding shift equivariance: max error {worst:.3e} < 1e-4"), worst < 1e-4));
    let zero = equivariance_errors(PaddingMode::Zero, (32, 48), a.trials, a.seed)?;
    let broken = zero.iter().filter(|&&e| e > 1e-3).count();
    let needed = (9 * a.trials).div_ceil(10);
    checks.push((
        format!("zero padding breaks equivariance (> 1e-3) on {broken}/{} inputs, need {needed}", a.trials),
        broken >= needed,
    ));
    report_checks(&checks)
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// `results.json` files or run directories; repeatable.
    #[arg(long = "results", required = true)]
    results: Vec<PathBuf>,
    /// Also print the cross-test asymmetry, reading the first run as
    /// center-trained and the second as edge-trained.
    #[arg(long)]
    asymmetry: bool,
    /// Directory for the combined CSV files.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn report(a: ReportArgs) -> Result<()> {
    let records = a.results.iter().map(|p| read_results(p)).collect::<edgebias::Result<Vec<_>>>()?;
    let raw = LossMatrix::stack(&records.iter().map(|r| r.matrix.clone()).collect::<Vec<_>>())?;
    println!("# Raw");
    print_matrix(&raw);
    let mut normalized = Vec::new();
    for mode in [Normalization::ByCentralBand, Normalization::ByUnrestricted] {
        if let Ok(n) = normalize_matrix(&raw, mode) {
            println!("# {mode:?}");
            print_matrix(&n);
            normalized.push(n);
        }
    }
    if a.asymmetry {
        if records.len() < 2 {
            bail!(Error::InvalidArgument("--asymmetry needs two runs".into()));
        }
        let s = summarize_asymmetry(&records[0], &records[1])?;
        println!(
            "center_to_edge_ratio {:.4} (of means {:.4})\nedge_to_center_ratio {:.4} (of means {:.4})",
            s.center_to_edge_ratio, s.center_to_edge_ratio_of_means, s.edge_to_center_ratio, s.edge_to_center_ratio_of_means
        );
    }
    if let Some(out) = a.out {
        create_dir(&out)?;
        write_text(&out.join("report_raw.csv"), &raw.to_csv())?;
        if let Some(n) = normalized.first() {
            write_text(&out.join("report_norm.csv"), &n.to_csv())?;
        }
    }
    Ok(())
}
