//! End-to-end train/test runs on freshly simulated data, scored against the
//! constant-box baseline.

use std::path::{Path, PathBuf};

use crate::dataset::{generate_dataset, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{iou, Scored};
use crate::model::{MicroCrackNet, ModelConfig};
use crate::rng::derive_seed;
use crate::train::{evaluate, mean_target, train, EpochRecord, Evaluation, TrainConfig, TrainLog};
use crate::wavesim::{CrackSampler, LatticeConfig, SourceSpec};

/// Cracks covering fewer label pixels than this are excluded from the
/// headline IoU.
pub const MIN_MASK_PIXELS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Preset {
    /// 512 training and 128 test samples with the default model.
    pub fn desk() -> Self {
        Self {
            n_train: 512,
            n_test: 128,
            seed: 1,
            model: ModelConfig::default(),
            train: TrainConfig {
                val_fraction: 0.0,
                ..TrainConfig::default()
            },
        }
    }

    /// 128/32 samples at half width, sized to finish within an hour on one core.
    pub fn quarter() -> Self {
        let mut p = Self::desk();
        p.n_train = 128;
        p.n_test = 32;
        p.model.base_filters = 8;
        p.train.epochs = 150;
        p
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub log: TrainLog,
    pub evaluation: Evaluation,
    /// Mean test IoU over cracks with at least [`MIN_MASK_PIXELS`] pixels.
    pub test_iou: f64,
    /// Same subset scored against the mean training box.
    pub baseline_iou: f64,
    pub scored_count: usize,
    pub generation_seconds: f64,
}

/// Loads `path` when it already holds `n` samples, otherwise simulates it.
pub fn cached_dataset(path: &Path, n: usize, seed: u64) -> Result<Dataset> {
    if let Ok(ds) = Dataset::load(path) {
        if ds.len() == n {
            return Ok(ds);
        }
    }
    let cfg = LatticeConfig {
        seed,
        ..LatticeConfig::default()
    };
    generate_dataset(
        n,
        &cfg,
        &CrackSampler::default(),
        &SourceSpec::default(),
        path,
    )?;
    Dataset::load(path)
}

/// Paths of the `(train, test)` files for `preset` inside `dir`.
pub fn dataset_paths(preset: &Preset, dir: &Path) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("train_{}_{}.cwf1", preset.n_train, preset.seed)),
        dir.join(format!("test_{}_{}.cwf1", preset.n_test, preset.seed)),
    )
}

/// Mean IoU over samples whose masks reach [`MIN_MASK_PIXELS`].
pub fn headline_iou(data: &Dataset, scored: &[Scored]) -> Result<(f64, usize)> {
    let picked: Vec<f64> = scored
        .iter()
        .zip(&data.samples)
        .filter(|(_, s)| s.mask.count_ones() >= MIN_MASK_PIXELS)
        .map(|(sc, _)| iou(&sc.pred, &sc.truth))
        .collect();
    if picked.is_empty() {
        return Err(Error::Validation(
            "no test crack covers enough label pixels".into(),
        ));
    }
    Ok((
        picked.iter().sum::<f64>() / picked.len() as f64,
        picked.len(),
    ))
}

/// Generates (or reuses) the datasets in `dir`, trains and scores.
pub fn run(
    preset: &Preset,
    dir: &Path,
    thresholds: &[f64],
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<Outcome> {
    std::fs::create_dir_all(dir)?;
    let (train_path, test_path) = dataset_paths(preset, dir);
    let t0 = std::time::Instant::now();
    let train_set = cached_dataset(
        &train_path,
        preset.n_train,
        derive_seed(preset.seed, "train", 0),
    )?;
    let test_set = cached_dataset(
        &test_path,
        preset.n_test,
        derive_seed(preset.seed, "test", 0),
    )?;
    let generation_seconds = t0.elapsed().as_secs_f64();

    let mut net = MicroCrackNet::<f32>::build(&preset.model, derive_seed(preset.seed, "init", 0))?;
    let cfg = TrainConfig {
        seed: derive_seed(preset.seed, "train_loop", 0),
        ..preset.train.clone()
    };
    let log = train(&mut net, &train_set, &cfg, Some(&dir.join("run")), on_epoch)?;
    let evaluation = evaluate(&mut net, &test_set, thresholds, cfg.huber_delta)?;
    let (test_iou, scored_count) = headline_iou(&test_set, &evaluation.scored)?;

    let all: Vec<usize> = (0..train_set.len()).collect();
    let constant = mean_target(&train_set, &all)?;
    let baseline: Vec<Scored> = evaluation
        .scored
        .iter()
        .map(|s| Scored {
            pred: constant,
            ..*s
        })
        .collect();
    let (baseline_iou, _) = headline_iou(&test_set, &baseline)?;
    Ok(Outcome {
        log,
        evaluation,
        test_iou,
        baseline_iou,
        scored_count,
        generation_seconds,
    })
}
