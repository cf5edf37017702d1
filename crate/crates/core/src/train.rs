//! Mini-batch training, evaluation and run configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gradnet::{Mode, Real, Tensor};
use crate::io::write_atomic;
use crate::kv;
use crate::labels::KeypointBox;
use crate::losses::{LossKind, LossSummary, DEFAULT_HUBER_DELTA};
use crate::metrics::{binned_report, EvalReport, Scored};
use crate::model::{box_from_raw, MicroCrackNet, ModelConfig, REFERENCE_TOTAL_PARAMS};
use crate::rng::stream_rng;

pub const LOG_HEADER: &str = "epoch,train_loss,val_loss,seconds";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
    SgdMomentum {
        momentum: f64,
    },
}

impl Optimizer {
    pub const fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossKind,
    /// Huber threshold used for `loss = huber` and for evaluation summaries.
    pub huber_delta: f64,
    /// Also write `epoch_<n>.mcpn` every this many epochs.
    pub checkpoint_every: Option<usize>,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    pub val_fraction: f64,
    /// Stop once the monitored training loss drops below this value.
    pub target_loss: Option<f64>,
    /// Hard cap on optimizer steps.
    pub max_steps: Option<usize>,
    pub clip_norm: Option<f64>,
    /// Re-evaluate the training set in inference mode after each epoch
    /// (the monitored training loss then ignores dropout noise).
    pub eval_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 16,
            optimizer: Optimizer::adam(),
            learning_rate: 1e-3,
            seed: 0,
            loss: LossKind::Mse,
            huber_delta: DEFAULT_HUBER_DELTA,
            checkpoint_every: None,
            patience: None,
            val_fraction: 0.2,
            target_loss: None,
            max_steps: None,
            clip_norm: Some(5.0),
            eval_train: false,
        }
    }
}

fn optional<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    if matches!(v, "" | "none" | "off") {
        Ok(None)
    } else {
        kv::value(key, v).map(Some)
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(
                "learning_rate must be finite and non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config("huber_delta must be positive".into()));
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = kv::value(key, v)?,
            "batch_size" => self.batch_size = kv::value(key, v)?,
            "learning_rate" => self.learning_rate = kv::value(key, v)?,
            "seed" => self.seed = kv::value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = optional(key, v)?,
            "patience" => self.patience = optional(key, v)?,
            "val_fraction" => self.val_fraction = kv::value(key, v)?,
            "target_loss" => self.target_loss = optional(key, v)?,
            "max_steps" => self.max_steps = optional(key, v)?,
            "clip_norm" => self.clip_norm = optional(key, v)?,
            "eval_train" => self.eval_train = kv::value(key, v)?,
            "loss" => {
                self.loss = match v.parse()? {
                    LossKind::Huber { .. } => LossKind::Huber {
                        delta: self.huber_delta,
                    },
                    k => k,
                }
            }
            "huber_delta" => {
                self.huber_delta = kv::value(key, v)?;
                if let LossKind::Huber { delta } = &mut self.loss {
                    *delta = self.huber_delta;
                }
            }
            "optimizer" => {
                self.optimizer = match v {
                    "adam" => Optimizer::adam(),
                    "sgd_momentum" => Optimizer::SgdMomentum { momentum: 0.9 },
                    _ => {
                        return Err(Error::Config(format!(
                            "optimizer: expected adam|sgd_momentum, got `{v}`"
                        )))
                    }
                }
            }
            "beta1" | "beta2" | "epsilon" => {
                let x: f64 = kv::value(key, v)?;
                let Optimizer::Adam {
                    beta1,
                    beta2,
                    epsilon,
                } = &mut self.optimizer
                else {
                    return Err(Error::Config(format!(
                        "{key} only applies to the adam optimizer"
                    )));
                };
                *match key {
                    "beta1" => beta1,
                    "beta2" => beta2,
                    _ => epsilon,
                } = x;
            }
            "momentum" => {
                let Optimizer::SgdMomentum { momentum } = &mut self.optimizer else {
                    return Err(Error::Config(
                        "momentum only applies to sgd_momentum".into(),
                    ));
                };
                *momentum = kv::value(key, v)?;
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Model and training settings read from one `key = value` file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in kv::parse(text)? {
            if !cfg.model.apply(&k, &v)? && !cfg.train.apply(&k, &v)? {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

/// Stacks samples `idx` of `data` into a `(b, t, s, c)` input tensor.
pub fn batch_inputs<T: Real>(data: &Dataset, idx: &[usize]) -> Tensor<T> {
    let [t, s, c] = data.input_shape();
    let mut x = Tensor::zeros(&[idx.len(), t, s, c]);
    for (b, &i) in idx.iter().enumerate() {
        for (d, &v) in x.sample_mut(b).iter_mut().zip(&data.samples[i].field) {
            *d = T::from_f64_lossy(v as f64);
        }
    }
    x
}

pub fn sample_target(data: &Dataset, i: usize) -> Result<KeypointBox> {
    data.samples[i].target()?.ok_or_else(|| {
        Error::Validation(format!(
            "sample {i} has an empty crack mask and no box target"
        ))
    })
}

pub fn batch_targets<T: Real>(data: &Dataset, idx: &[usize]) -> Result<Tensor<T>> {
    let mut v = Vec::with_capacity(idx.len() * 4);
    for &i in idx {
        v.extend(sample_target(data, i)?.to_array().map(T::from_f64_lossy));
    }
    Tensor::from_vec(&[idx.len(), 4], v)
}

fn check_compatible<T: Real>(net: &MicroCrackNet<T>, data: &Dataset) -> Result<()> {
    if data.input_shape() != net.config().input_shape {
        return Err(Error::Shape(format!(
            "dataset samples are {:?} but the model expects {:?}",
            data.input_shape(),
            net.config().input_shape
        )));
    }
    Ok(())
}

/// Seeded train/validation split: `(train, val)` index lists.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, "split", 0));
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    }
    let train = idx.split_off(n_val);
    (train, idx)
}

/// Per-parameter optimizer state.
struct OptState<T> {
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> OptState<T> {
    fn new(net: &MicroCrackNet<T>) -> Self {
        let zeros: Vec<Vec<T>> = net
            .graph()
            .layers()
            .flat_map(|l| {
                l.params()
                    .into_iter()
                    .map(|p| vec![T::zero(); p.len()])
                    .collect::<Vec<_>>()
            })
            .collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }

    fn apply(&mut self, net: &mut MicroCrackNet<T>, opt: Optimizer, lr: f64, clip: Option<f64>) {
        self.step += 1;
        let norm = net.graph().grad_norm();
        let scale = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let t = self.step as i32;
        let mut slot = 0;
        for layer in net.graph_mut().layers_mut() {
            for (p, g) in layer.params_and_grads_mut() {
                let (m, v) = (&mut self.first[slot], &mut self.second[slot]);
                slot += 1;
                let sc = T::from_f64_lossy(scale);
                match opt {
                    Optimizer::Adam {
                        beta1,
                        beta2,
                        epsilon,
                    } => {
                        let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
                        let step = T::from_f64_lossy(
                            lr * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t)),
                        );
                        let eps = T::from_f64_lossy(epsilon);
                        for (((w, &gr), mi), vi) in p
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .zip(m.iter_mut())
                            .zip(v.iter_mut())
                        {
                            let gr = gr * sc;
                            *mi = b1 * *mi + (T::one() - b1) * gr;
                            *vi = b2 * *vi + (T::one() - b2) * gr * gr;
                            *w -= step * *mi / (vi.sqrt() + eps);
                        }
                    }
                    Optimizer::SgdMomentum { momentum } => {
                        let (mu, lr) = (T::from_f64_lossy(momentum), T::from_f64_lossy(lr));
                        for ((w, &gr), mi) in
                            p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut())
                        {
                            *mi = mu * *mi + gr * sc;
                            *w -= lr * *mi;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's batches.
    pub train_loss: f64,
    /// Inference-mode loss over the training set, when `eval_train` is set.
    pub train_eval_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub total_seconds: f64,
    pub trainable: usize,
    pub non_trainable: usize,
    pub val_indices: Vec<usize>,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        for e in &self.epochs {
            let val = e.val_loss.map(|v| format!("{v:.8e}")).unwrap_or_default();
            writeln!(
                out,
                "{},{:.8e},{},{:.3}",
                e.epoch, e.train_loss, val, e.seconds
            )
            .unwrap();
        }
        out
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs
            .last()
            .map(|e| e.train_eval_loss.unwrap_or(e.train_loss))
    }

    /// Parameter and timing summary.
    pub fn summary(&self) -> String {
        let first = self.epochs.first().map_or(0.0, |e| e.seconds);
        format!(
            "Total params: {}\nTrainable params: {}\nNon-trainable params: {}\nReference total params: {}\n\
             Epochs: {}\nTime taken by first Epoch: {:.2} s\nTotal training time: {:.2} s\n",
            self.trainable + self.non_trainable,
            self.trainable,
            self.non_trainable,
            REFERENCE_TOTAL_PARAMS,
            self.epochs.len(),
            first,
            self.total_seconds
        )
    }
}

/// Mean loss of `net` over `idx` in inference mode.
pub fn dataset_loss<T: Real>(
    net: &mut MicroCrackNet<T>,
    data: &Dataset,
    idx: &[usize],
    loss: LossKind,
    batch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(batch.max(1)) {
        let y = net.infer(&batch_inputs(data, chunk))?;
        total += loss.eval(&y, &batch_targets(data, chunk)?)?.0 * chunk.len() as f64;
    }
    Ok(total / idx.len() as f64)
}

/// Trains `net` on `data`. With `out`, writes `best.mcpn`, `final.mcpn`
/// (plus sidecars) and `train_log.csv` into that directory. `on_epoch` is
/// called after each epoch.
pub fn train<T: Real>(
    net: &mut MicroCrackNet<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    check_compatible(net, data)?;
    if data.is_empty() {
        return Err(Error::Validation("cannot train on an empty dataset".into()));
    }
    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
    for &i in &train_idx {
        sample_target(data, i)?;
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let extra = |epoch: usize| -> Vec<(String, String)> {
        vec![
            ("seed".into(), cfg.seed.to_string()),
            ("val_fraction".into(), cfg.val_fraction.to_string()),
            ("val_indices".into(), kv::join(&val_idx)),
            ("epoch".into(), epoch.to_string()),
            ("normalization".into(), "per_sample_max_abs".into()),
        ]
    };

    let (trainable, non_trainable) = net.count_params();
    let mut opt = OptState::new(net);
    let mut log = TrainLog {
        epochs: Vec::new(),
        steps: 0,
        total_seconds: 0.0,
        trainable,
        non_trainable,
        val_indices: val_idx.clone(),
        stopped_early: false,
    };
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let started = Instant::now();
    'epochs: for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let mut order = train_idx.clone();
        order.shuffle(&mut stream_rng(cfg.seed, "shuffle", epoch as u64));
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        // a trailing single-sample batch gives degenerate batch statistics
        if batches.len() > 1 && batches.last().unwrap().len() == 1 {
            batches.pop();
        }
        let (mut sum, mut seen) = (0.0, 0usize);
        for (bi, b) in batches.iter().enumerate() {
            let x = batch_inputs::<T>(data, b);
            let y = batch_targets::<T>(data, b)?;
            let pred = net.forward(&x, Mode::Train)?;
            let (loss, grad) = cfg.loss.eval(&pred, &y)?;
            if !loss.is_finite() {
                net.graph_mut().clear_caches();
                return Err(Error::Diverged {
                    epoch,
                    step: bi + 1,
                    loss,
                });
            }
            net.backward_params(&grad)?;
            opt.apply(net, cfg.optimizer, cfg.learning_rate, cfg.clip_norm);
            sum += loss * b.len() as f64;
            seen += b.len();
            log.steps += 1;
            if cfg.max_steps.is_some_and(|m| log.steps >= m) {
                break;
            }
        }
        let train_loss = sum / seen.max(1) as f64;
        let train_eval_loss = if cfg.eval_train {
            Some(dataset_loss(
                net,
                data,
                &train_idx,
                cfg.loss,
                cfg.batch_size,
            )?)
        } else {
            None
        };
        let val_loss = if val_idx.is_empty() {
            None
        } else {
            Some(dataset_loss(net, data, &val_idx, cfg.loss, cfg.batch_size)?)
        };
        let rec = EpochRecord {
            epoch,
            train_loss,
            train_eval_loss,
            val_loss,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        log.epochs.push(rec.clone());

        let monitored_train = train_eval_loss.unwrap_or(train_loss);
        let monitored = val_loss.unwrap_or(monitored_train);
        if monitored < best {
            best = monitored;
            since_best = 0;
            if let Some(dir) = out_dir {
                net.save(&dir.join("best.mcpn"), &extra(epoch))?;
            }
        } else {
            since_best += 1;
        }
        if let (Some(dir), Some(k)) = (out_dir, cfg.checkpoint_every) {
            if k > 0 && epoch % k == 0 {
                net.save(&dir.join(format!("epoch_{epoch}.mcpn")), &extra(epoch))?;
            }
        }
        let stop = cfg.target_loss.is_some_and(|t| monitored_train < t)
            || cfg.patience.is_some_and(|p| since_best >= p)
            || cfg.max_steps.is_some_and(|m| log.steps >= m);
        if stop {
            log.stopped_early = epoch < cfg.epochs;
            break 'epochs;
        }
    }
    log.total_seconds = started.elapsed().as_secs_f64();
    if let Some(dir) = out_dir {
        net.save(&dir.join("final.mcpn"), &extra(log.epochs.len()))?;
        write_atomic(&dir.join("train_log.csv"), log.to_csv().as_bytes())?;
    }
    Ok(log)
}

/// Predictions and scores for a dataset.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub scored: Vec<Scored>,
    /// Raw network outputs, `(n, 4)` row-major.
    pub raw: Vec<[f64; 4]>,
}

pub fn evaluate<T: Real>(
    net: &mut MicroCrackNet<T>,
    data: &Dataset,
    thresholds: &[f64],
    huber_delta: f64,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty dataset".into()));
    }
    check_compatible(net, data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut raw = Vec::with_capacity(data.len());
    let mut truth = Vec::with_capacity(data.len() * 4);
    let mut scored = Vec::with_capacity(data.len());
    for chunk in idx.chunks(16) {
        let y = net.infer(&batch_inputs::<T>(data, chunk))?;
        for (row, &i) in y.data().chunks_exact(4).zip(chunk) {
            let r = [
                row[0].as_f64(),
                row[1].as_f64(),
                row[2].as_f64(),
                row[3].as_f64(),
            ];
            let t = sample_target(data, i)?;
            raw.push(r);
            truth.extend(t.to_array());
            scored.push(Scored {
                pred: box_from_raw(r),
                truth: t,
                crack_size: data.samples[i].crack_size as f64,
            });
        }
    }
    let pred = Tensor::from_vec(&[raw.len(), 4], raw.iter().flatten().copied().collect())?;
    let target = Tensor::from_vec(&[raw.len(), 4], truth)?;
    let mut report = binned_report(&scored, thresholds)?;
    report.losses = Some(LossSummary::compute(&pred, &target, huber_delta)?);
    Ok(Evaluation {
        report,
        scored,
        raw,
    })
}

/// Mean target box over `idx`: the constant prediction minimising MSE.
pub fn mean_target(data: &Dataset, idx: &[usize]) -> Result<KeypointBox> {
    if idx.is_empty() {
        return Err(Error::Validation(
            "mean target of an empty index set".into(),
        ));
    }
    let mut acc = [0.0; 4];
    for &i in idx {
        for (a, v) in acc.iter_mut().zip(sample_target(data, i)?.to_array()) {
            *a += v;
        }
    }
    Ok(KeypointBox::from_array(acc.map(|a| a / idx.len() as f64)))
}
