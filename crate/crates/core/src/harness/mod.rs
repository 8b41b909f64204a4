//! Seeded regional training runs, band-wise evaluation and result files.

mod export;
mod matrix;

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use export::{export_results, read_results, CURVES_CSV, MATRIX_NORM_CSV, MATRIX_RAW_CSV, RESULTS_JSON};
pub use matrix::{mean_matrix, normalize_matrix, LossMatrix, Normalization, CENTRAL_BAND, CORNER};

use crate::augment::Augmentation;
use crate::dataset::{sample_placement, stack_batch, Dataset, DatasetConfig, PlacementPolicy, Sample};
use crate::rng::{splitmix64, stream};
use crate::tensor::AdamConfig;
use crate::unet::{build_unet, save_checkpoint, ForwardOptions, Model, UNetConfig};
use crate::{Error, Precision, Result, Scalar};

pub const SCHEMA_VERSION: u32 = 1;

/// Samples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 32;

/// Outer evaluation band used for the asymmetry summary.
pub const EDGE_BAND: PlacementPolicy = PlacementPolicy::Band { lo: 0.8, hi: 1.0 };

/// One regional training experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Geometry, glyphs and backgrounds; its policy, count and seed are
    /// replaced per repeat.
    pub dataset: DatasetConfig,
    pub model: UNetConfig,
    pub train_policy: PlacementPolicy,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_count: usize,
    pub eval_count: usize,
    pub eval_bands: Vec<PlacementPolicy>,
    pub repeats: usize,
    pub master_seed: u64,
    pub augmentations: Vec<Augmentation>,
    pub optimizer: AdamConfig,
    /// Where checkpoints and result files go; nothing is written when unset.
    pub output_dir: Option<PathBuf>,
}

/// The ten tenth bands, the `[0.8, 1.0]` edge band and the unrestricted policy.
pub fn default_eval_bands() -> Vec<PlacementPolicy> {
    let mut v = PlacementPolicy::tenth_bands();
    v.push(EDGE_BAND);
    v.push(PlacementPolicy::Unrestricted);
    v
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetConfig::default(),
            model: UNetConfig::default(),
            train_policy: PlacementPolicy::AllowedCentral { allowed: 0.3 },
            epochs: 4,
            batch_size: 16,
            train_count: 6000,
            eval_count: 256,
            eval_bands: default_eval_bands(),
            repeats: 3,
            master_seed: 0,
            augmentations: Vec::new(),
            optimizer: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.repeats == 0 {
            return fail("repeats must be at least 1".into());
        }
        if self.batch_size == 0 || self.batch_size > self.train_count {
            return fail(format!(
                "batch_size {} must be in 1..={}",
                self.batch_size, self.train_count
            ));
        }
        if self.eval_count == 0 {
            return fail("eval_count must be at least 1".into());
        }
        if self.eval_bands.is_empty() {
            return fail("eval_bands must not be empty".into());
        }
        if self.augmentations.iter().filter(|a| matches!(a, Augmentation::EdgeBlockDrop(_))).count() > 1 {
            return fail("at most one edge_block_drop augmentation".into());
        }
        for a in &self.augmentations {
            if let Augmentation::EdgeBlockDrop(spec) = a {
                spec.validate()?;
            }
            if let Augmentation::RandomPeriodicShift { max_frac } = a {
                if !(0.0..=0.5).contains(max_frac) {
                    return fail(format!("max_frac {max_frac} outside [0, 0.5]"));
                }
            }
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return fail(format!("invalid optimizer settings {o:?}"));
        }
        self.train_policy.validate()?;
        for p in &self.eval_bands {
            p.validate()?;
        }
        self.dataset.validate()?;
        self.model.validate()?;
        if self.model.in_channels != 1 {
            return fail("samples have one input channel".into());
        }
        let m = self.model.size_multiple();
        if self.dataset.height % m != 0 || self.dataset.width % m != 0 {
            return fail(format!(
                "image {}x{} is not a multiple of {m} required by depth {}",
                self.dataset.height, self.dataset.width, self.model.depth
            ));
        }
        Ok(())
    }

    /// Row label: the training policy followed by any augmentations.
    pub fn train_label(&self) -> String {
        let mut s = self.train_policy.to_string();
        for a in &self.augmentations {
            s.push('+');
            s.push_str(a.name());
            if let Augmentation::RandomPeriodicShift { max_frac } = a {
                s.push_str(&format!(":{max_frac:?}"));
            }
        }
        s
    }

    /// SHA-256 of the canonical JSON of everything that affects results.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            output_dir: None,
            ..self.clone()
        };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }

    fn steps_per_epoch(&self) -> usize {
        self.train_count / self.batch_size
    }
}

/// Seeds of one repeat, all derived from the master seed and repeat index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepeatSeeds {
    pub repeat: u64,
    pub model: u64,
    pub data: u64,
    pub augment: u64,
    pub forward: u64,
    pub eval: u64,
}

impl RepeatSeeds {
    pub fn derive(master_seed: u64, repeat: usize) -> RepeatSeeds {
        let repeat = splitmix64(master_seed, repeat as u64);
        let child = |k| splitmix64(repeat, k);
        RepeatSeeds {
            repeat,
            model: child(1),
            data: child(2),
            augment: child(3),
            forward: child(4),
            eval: child(5),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatRecord {
    pub index: usize,
    pub seeds: RepeatSeeds,
    pub steps: u64,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean evaluation loss per column of the matrix.
    pub eval_losses: Vec<f64>,
    pub checkpoint: Option<PathBuf>,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub repeats: Vec<RepeatRecord>,
    /// Arithmetic mean over repeats.
    pub matrix: LossMatrix,
    /// Every normalization whose reference column is present.
    pub normalized: Vec<LossMatrix>,
    pub started_unix: u64,
    pub wall_seconds: f64,
}

impl RunRecord {
    /// The raw single-row matrix of one repeat.
    pub fn repeat_matrix(&self, k: usize) -> Result<LossMatrix> {
        let r = self
            .repeats
            .get(k)
            .ok_or_else(|| Error::invalid(format!("no repeat {k}")))?;
        LossMatrix::new(
            self.matrix.rows.clone(),
            self.matrix.cols.clone(),
            vec![r.eval_losses.clone()],
            Normalization::Raw,
        )
    }

    pub fn normalized(&self, mode: Normalization) -> Option<&LossMatrix> {
        self.normalized.iter().find(|m| m.normalization == mode)
    }
}

/// Runs every repeat of `config`: train, checkpoint, evaluate, aggregate.
pub fn run_regional_training(config: &ExperimentConfig) -> Result<RunRecord> {
    config.validate()?;
    let base = Dataset::new(config.dataset.clone())?;
    run_with_dataset(config, &base)
}

/// As [`run_regional_training`], reusing the glyphs and backgrounds of `base`.
pub fn run_with_dataset(config: &ExperimentConfig, base: &Dataset) -> Result<RunRecord> {
    config.validate()?;
    let g = base.glyphs().size();
    let image = (config.dataset.height, config.dataset.width);
    for p in std::iter::once(&config.train_policy).chain(&config.eval_bands) {
        sample_placement(p, image, (g, g), &mut stream(0))?;
    }
    match config.model.precision {
        Precision::F32 => run_typed::<f32>(config, base),
        Precision::F64 => run_typed::<f64>(config, base),
    }
}

fn run_typed<T: Scalar>(config: &ExperimentConfig, base: &Dataset) -> Result<RunRecord> {
    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let label = config.train_label();
    let mut repeats = Vec::with_capacity(config.repeats);
    for k in 0..config.repeats {
        let seeds = RepeatSeeds::derive(config.master_seed, k);
        let t0 = Instant::now();
        let (model, epoch_losses, steps) = train_repeat::<T>(config, base, &seeds)?;
        let train_seconds = t0.elapsed().as_secs_f64();
        let checkpoint = match &config.output_dir {
            Some(dir) => {
                let path = checkpoint_path(dir, k);
                save_checkpoint(&model, steps, &path)?;
                Some(path)
            }
            None => None,
        };
        let t1 = Instant::now();
        let eval_losses = evaluate_bands(&model, base, &config.eval_bands, config.eval_count, seeds.eval)?;
        let eval_seconds = t1.elapsed().as_secs_f64();
        log::info!(
            "{label} repeat {k}: {steps} steps in {train_seconds:.1}s, eval {eval_seconds:.1}s, final epoch loss {:?}",
            epoch_losses.last()
        );
        repeats.push(RepeatRecord {
            index: k,
            seeds,
            steps,
            epoch_losses,
            eval_losses,
            checkpoint,
            train_seconds,
            eval_seconds,
        });
    }
    let per_repeat = repeats
        .iter()
        .map(|r| {
            LossMatrix::new(
                vec![label.clone()],
                config.eval_bands.clone(),
                vec![r.eval_losses.clone()],
                Normalization::Raw,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let matrix = mean_matrix(&per_repeat)?;
    let normalized = [Normalization::ByCentralBand, Normalization::ByUnrestricted]
        .into_iter()
        .filter_map(|mode| normalize_matrix(&matrix, mode).ok())
        .collect();
    Ok(RunRecord {
        schema_version: SCHEMA_VERSION,
        config_hash: config.hash(),
        config: config.clone(),
        repeats,
        matrix,
        normalized,
        started_unix,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn checkpoint_path(output_dir: &Path, repeat: usize) -> PathBuf {
    output_dir.join("checkpoints").join(format!("repeat{repeat}.ckpt"))
}

/// Training sample `i` of `epoch`, with the configured augmentations applied.
fn training_sample(
    config: &ExperimentConfig,
    data: &Dataset,
    seeds: &RepeatSeeds,
    epoch: usize,
    i: usize,
) -> Result<Sample> {
    let mut sample = data.sample(i)?;
    if !config.augmentations.is_empty() {
        let mut rng = stream(splitmix64(seeds.augment, (epoch * config.train_count + i) as u64));
        for a in &config.augmentations {
            sample = a.apply(&sample, &mut rng)?;
        }
    }
    Ok(sample)
}

/// Trains one fresh model; returns it with the per-epoch mean losses and
/// the number of optimizer steps.
pub fn train_repeat<T: Scalar>(
    config: &ExperimentConfig,
    base: &Dataset,
    seeds: &RepeatSeeds,
) -> Result<(Model<T>, Vec<f64>, u64)> {
    let model_config = UNetConfig {
        seed: seeds.model,
        ..config.model.clone()
    };
    let mut model = build_unet::<T>(&model_config)?;
    let data = base.derive(config.train_policy, seeds.data, config.train_count)?;
    let mut adam = model.adam_state(config.optimizer);
    let options = ForwardOptions {
        edge_drop: config.augmentations.iter().find_map(|a| match a {
            Augmentation::EdgeBlockDrop(spec) => Some(*spec),
            _ => None,
        }),
        training: true,
    };
    let mut order_rng = stream(splitmix64(seeds.data, u64::MAX));
    let mut forward_rng = stream(seeds.forward);
    let mut order: Vec<usize> = (0..config.train_count).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut steps = 0u64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for batch in order.chunks_exact(config.batch_size) {
            let samples = batch
                .par_iter()
                .map(|&i| training_sample(config, &data, seeds, epoch, i))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Sample> = samples.iter().collect();
            let (x, y) = stack_batch::<T>(&refs)?;
            total += model.train_step_with(&x, &y, &mut adam, &mut forward_rng, &options)?;
            steps += 1;
        }
        let mean = total / config.steps_per_epoch() as f64;
        log::debug!("epoch {epoch}: mean loss {mean:.6}");
        epoch_losses.push(mean);
    }
    Ok((model, epoch_losses, steps))
}

/// Seed of the evaluation set for `policy`; equal policies share a set.
fn eval_seed(seed: u64, policy: &PlacementPolicy) -> u64 {
    let digest = Sha256::digest(policy.to_string().as_bytes());
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    splitmix64(seed, u64::from_le_bytes(word))
}

/// Mean per-pixel cross-entropy of `model` on `eval_count` fresh samples
/// under each policy.
pub fn evaluate_bands<T: Scalar>(
    model: &Model<T>,
    base: &Dataset,
    policies: &[PlacementPolicy],
    eval_count: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if eval_count == 0 {
        return Err(Error::invalid("eval_count must be at least 1"));
    }
    policies
        .iter()
        .map(|policy| {
            let data_seed = eval_seed(seed, policy);
            let data = base.derive(*policy, data_seed, eval_count)?;
            let mut total = 0.0;
            for (chunk, start) in (0..eval_count).step_by(EVAL_BATCH).enumerate() {
                let samples = data.samples(start..(start + EVAL_BATCH).min(eval_count))?;
                let refs: Vec<&Sample> = samples.iter().collect();
                let (x, y) = stack_batch::<T>(&refs)?;
                let mut rng = stream(splitmix64(data_seed, chunk as u64));
                total += model.item_losses(&x, &y, &mut rng)?.iter().sum::<f64>();
            }
            Ok(total / eval_count as f64)
        })
        .collect()
}

/// The two cross-test ratios of a center-trained and an edge-trained run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Asymmetry {
    /// Edge-test over center-test loss of the center-trained run, averaged
    /// over its repeats.
    pub center_to_edge_ratio: f64,
    /// Center-test over edge-test loss of the edge-trained run, averaged
    /// over its repeats.
    pub edge_to_center_ratio: f64,
    /// Same ratios computed from the repeat-averaged losses.
    pub center_to_edge_ratio_of_means: f64,
    pub edge_to_center_ratio_of_means: f64,
}

/// Cross-test ratios between the [`CENTRAL_BAND`] and [`EDGE_BAND`] columns.
pub fn summarize_asymmetry(record_center: &RunRecord, record_edge: &RunRecord) -> Result<Asymmetry> {
    summarize_asymmetry_with(record_center, record_edge, &CENTRAL_BAND, &EDGE_BAND)
}

pub fn summarize_asymmetry_with(
    record_center: &RunRecord,
    record_edge: &RunRecord,
    center: &PlacementPolicy,
    edge: &PlacementPolicy,
) -> Result<Asymmetry> {
    let columns = |r: &RunRecord| -> Result<(usize, usize)> {
        let find = |p: &PlacementPolicy| {
            r.matrix
                .column(p)
                .ok_or_else(|| Error::MissingReference(p.to_string()))
        };
        Ok((find(center)?, find(edge)?))
    };
    let (cc, ce) = columns(record_center)?;
    let (ec, ee) = columns(record_edge)?;
    let mean_ratio = |r: &RunRecord, num: usize, den: usize| {
        r.repeats
            .iter()
            .map(|x| x.eval_losses[num] / x.eval_losses[den])
            .sum::<f64>()
            / r.repeats.len() as f64
    };
    fn cells(r: &RunRecord) -> &[f64] {
        &r.matrix.cells[0]
    }
    Ok(Asymmetry {
        center_to_edge_ratio: mean_ratio(record_center, ce, cc),
        edge_to_center_ratio: mean_ratio(record_edge, ec, ee),
        center_to_edge_ratio_of_means: cells(record_center)[ce] / cells(record_center)[cc],
        edge_to_center_ratio_of_means: cells(record_edge)[ec] / cells(record_edge)[ee],
    })
}
