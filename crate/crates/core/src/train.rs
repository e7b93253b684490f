//! Training loop and the ablation harness.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{evaluate, EvalReport, MetricsError};
use crate::model::{images_to_tensor, Model, ModelConfig, ModelError, Params};
use crate::objectives::{total_loss, PixelNormalization, LossBundle, LossConfig, LossError};
use crate::postprocess::PostprocessParams;
use crate::synth::{random_crop, Dataset, ImageSample, Split, SynthError};
use crate::tensor::{Tape, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} (batch seed {batch_seed}): {bundle:?}")]
    NonFinite {
        step: usize,
        batch_seed: u64,
        bundle: LossBundle,
    },
    #[error("split {0:?} is empty")]
    EmptySplit(Split),
    #[error("log write failed: {0}")]
    Log(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Random crop `(h, w)`; must be multiples of 32.
    pub crop: (usize, usize),
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient norm ceiling; `None` disables clipping.
    pub clip_grad_norm: Option<f64>,
    pub loss: LossConfig,
    /// Evaluate on the validation split every this many epochs (and after
    /// the last one). 0 disables evaluation.
    pub eval_every: usize,
    /// Use at most this many training images.
    pub max_train_images: Option<usize>,
    /// Use at most this many validation images.
    pub max_eval_images: Option<usize>,
    pub eval_split: Split,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 30,
            batch_size: 2,
            crop: (96, 96),
            optimizer: Optimizer::Adam,
            learning_rate: 0.003,
            momentum: 0.9,
            weight_decay: 0.0,
            clip_grad_norm: Some(5.0),
            loss: LossConfig {
                field_normalization: PixelNormalization::ValidPixels,
                ..LossConfig::default()
            },
            eval_every: 5,
            max_train_images: None,
            max_eval_images: None,
            eval_split: Split::Val,
        }
    }
}

/// One JSON line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBundle,
    pub tau: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochEval {
    pub epoch: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation mIoU (the final ones if evaluation
    /// was disabled).
    pub best: Params<f32>,
    pub best_epoch: usize,
    pub best_report: Option<EvalReport>,
    pub evals: Vec<EpochEval>,
    /// Mean total loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Cosine decay from `base` to 0 over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    0.5 * base * (1.0 + (PI * step as f64 / total as f64).cos())
}

pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    crate::synth::derive_seed(seed, stream)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Heavy-ball momentum.
    Sgd,
    /// Adam with `beta1 = momentum`, `beta2 = 0.999`.
    Adam,
}

/// Optimizer state over `model`'s parameters, updated in place.
struct Opt {
    kind: Optimizer,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    momentum: f32,
    weight_decay: f32,
    t: i32,
}

impl Opt {
    fn new(kind: Optimizer, params: &Params<f32>, momentum: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Opt {
            kind,
            first: zeros(),
            second: if kind == Optimizer::Adam { zeros() } else { Vec::new() },
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Params<f32>, grads: &[Vec<f32>], lr: f32, scale: f32) {
        self.t += 1;
        let (b1, b2) = (self.momentum, 0.999f32);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i).data_mut();
            let m = &mut self.first[i];
            match self.kind {
                Optimizer::Sgd => {
                    for j in 0..g.len() {
                        let d = g[j] * scale + self.weight_decay * p[j];
                        m[j] = self.momentum * m[j] + d;
                        p[j] -= lr * m[j];
                    }
                }
                Optimizer::Adam => {
                    let v = &mut self.second[i];
                    for j in 0..g.len() {
                        let d = g[j] * scale + self.weight_decay * p[j];
                        m[j] = b1 * m[j] + (1.0 - b1) * d;
                        v[j] = b2 * v[j] + (1.0 - b2) * d * d;
                        p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + 1e-8);
                    }
                }
            }
        }
    }
}

/// Runs one optimization step on a batch; returns the loss breakdown and
/// the gradient norm before clipping.
fn train_step(
    model: &mut Model,
    opt: &mut Opt,
    batch: &[ImageSample],
    loss_cfg: &LossConfig,
    lr: f64,
    clip: Option<f64>,
) -> Result<(LossBundle, f64), TrainError> {
    let (h, w) = (batch[0].height, batch[0].width);
    let images: Vec<&[u8]> = batch.iter().map(|s| s.image.as_slice()).collect();
    let refs: Vec<&ImageSample> = batch.iter().collect();
    let labels = ImageSample::batch_labels(&refs);

    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let x = tape.leaf(images_to_tensor(&images, h, w), false);
    let out = model.forward_on_tape(&mut tape, &p, x)?;
    let (loss, bundle) = total_loss(&mut tape, &out, &labels, loss_cfg)?;
    if !bundle.total.is_finite() {
        return Ok((bundle, f64::NAN));
    }
    let mut grads = tape.backward(loss)?;
    let grads: Vec<Vec<f32>> = p
        .iter()
        .map(|&v| grads.take(v).expect("parameter gradient"))
        .collect();
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Ok((bundle, norm));
    }
    let scale = match clip {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    opt.step(model.params_mut(), &grads, lr as f32, scale as f32);
    Ok((bundle, norm))
}

/// Trains `model` on the training split. Every random choice derives from
/// `cfg.seed`, so identical inputs give identical parameters.
pub fn train<W: Write>(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut log: W,
) -> Result<TrainOutcome, TrainError> {
    let mut train_set = dataset.split(Split::Train);
    if let Some(m) = cfg.max_train_images {
        train_set.truncate(m);
    }
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    let mut eval_set = dataset.split(cfg.eval_split);
    if let Some(m) = cfg.max_eval_images {
        eval_set.truncate(m);
    }
    if cfg.eval_every > 0 && eval_set.is_empty() {
        return Err(TrainError::EmptySplit(cfg.eval_split));
    }

    let eval_size = (train_set[0].height, train_set[0].width);
    let mut train_model = model.with_input_size(cfg.crop.0, cfg.crop.1)?;
    let post = PostprocessParams::for_size(eval_size.1, eval_size.0);
    let mut opt = Opt::new(cfg.optimizer, train_model.params(), cfg.momentum, cfg.weight_decay);

    let batch = cfg.batch_size.max(1);
    let steps_per_epoch = train_set.len().div_ceil(batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut step = 0;
    let mut outcome = TrainOutcome {
        best: train_model.params().clone(),
        best_epoch: 0,
        best_report: None,
        evals: Vec::new(),
        epoch_losses: Vec::new(),
        steps: 0,
    };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64)));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            let batch_seed = mix_seed(cfg.seed ^ 0xb47c_4000_0000_0000, step as u64);
            let crops = chunk
                .iter()
                .enumerate()
                .map(|(i, &k)| random_crop(train_set[k], cfg.crop, mix_seed(batch_seed, i as u64)))
                .collect::<Result<Vec<_>, _>>()?;
            let lr = cosine_lr(cfg.learning_rate, step, total_steps);
            let (bundle, grad_norm) = train_step(&mut train_model, &mut opt, &crops, &cfg.loss, lr, cfg.clip_grad_norm)?;
            if !bundle.total.is_finite() || !grad_norm.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    batch_seed,
                    bundle,
                });
            }
            loss_sum += bundle.total;
            let entry = StepLog {
                step,
                epoch,
                lr,
                tau: bundle.tau,
                losses: bundle,
                grad_norm,
            };
            serde_json::to_writer(&mut log, &entry).map_err(std::io::Error::from)?;
            log.write_all(b"\n")?;
            step += 1;
        }
        outcome.epoch_losses.push(loss_sum / steps_per_epoch as f64);

        let last = epoch + 1 == cfg.epochs;
        if cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last) {
            let report = evaluate(&train_model, &eval_set, &post, batch)?;
            let better = outcome
                .best_report
                .as_ref()
                .is_none_or(|b| report.binary_miou > b.binary_miou);
            if better {
                outcome.best = train_model.params().clone();
                outcome.best_epoch = epoch + 1;
                outcome.best_report = Some(report.clone());
            }
            serde_json::to_writer(&mut log, &serde_json::json!({ "epoch": epoch + 1, "eval": &report }))
                .map_err(std::io::Error::from)?;
            log.write_all(b"\n")?;
            outcome.evals.push(EpochEval {
                epoch: epoch + 1,
                report,
            });
        }
    }
    outcome.steps = step;
    if cfg.eval_every == 0 {
        outcome.best = train_model.params().clone();
        outcome.best_epoch = cfg.epochs;
    }
    *model.params_mut() = outcome.best.clone();
    Ok(outcome)
}

/// Settings compared by the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationSetting {
    /// Weighted cross-entropy, no cascade branch.
    Baseline,
    /// Loss max-pooling, no cascade branch.
    Lmp,
    /// Loss max-pooling with the cascade branch.
    LmpCascade,
}

impl AblationSetting {
    pub const ALL: [AblationSetting; 3] = [AblationSetting::Baseline, AblationSetting::Lmp, AblationSetting::LmpCascade];

    pub fn label(self) -> &'static str {
        match self {
            AblationSetting::Baseline => "baseline",
            AblationSetting::Lmp => "+lmp",
            AblationSetting::LmpCascade => "+cascade",
        }
    }

    pub fn configure(self, model: &ModelConfig, train: &TrainConfig) -> (ModelConfig, TrainConfig) {
        let mut m = model.clone();
        let mut t = train.clone();
        m.cascade_enabled = self == AblationSetting::LmpCascade;
        t.loss.fgbg = match self {
            AblationSetting::Baseline => LossConfig::weighted_baseline().fgbg,
            _ => LossConfig::default().fgbg,
        };
        (m, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: AblationSetting,
    pub seed: u64,
    pub miou: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn miou(&self, setting: AblationSetting, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.setting == setting && r.seed == seed)
            .map(|r| r.miou)
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Whether `baseline <= +lmp <= +cascade` holds for `seed`.
    pub fn monotone(&self, seed: u64) -> bool {
        let v: Vec<Option<f64>> = AblationSetting::ALL.iter().map(|&s| self.miou(s, seed)).collect();
        match v[..] {
            [Some(a), Some(b), Some(c)] => a <= b && b <= c,
            _ => false,
        }
    }

    /// Seeds for which the trend holds, out of all seeds.
    pub fn monotone_count(&self) -> (usize, usize) {
        let seeds = self.seeds();
        (seeds.iter().filter(|&&s| self.monotone(s)).count(), seeds.len())
    }

    pub fn mean(&self, setting: AblationSetting) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.setting == setting).map(|r| r.miou).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("setting,seed,binary_miou,best_epoch\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.6},{}\n", r.setting.label(), r.seed, r.miou, r.best_epoch));
        }
        s
    }
}

/// Trains every setting for every seed with equal budgets. A given seed
/// sees the same initialization stream and data order in all settings.
pub fn run_ablation(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationTable, TrainError> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for setting in AblationSetting::ALL {
            let (mc, mut tc) = setting.configure(model_cfg, train_cfg);
            tc.seed = seed;
            let mut model = Model::build(mc, seed)?;
            let out = train(&mut model, dataset, &tc, std::io::sink())?;
            let row = AblationRow {
                setting,
                seed,
                miou: out.best_report.map(|r| r.binary_miou).unwrap_or(0.0),
                best_epoch: out.best_epoch,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.05, 0, 100), 0.05);
        assert!((cosine_lr(0.05, 50, 100) - 0.025).abs() < 1e-12);
        assert!(cosine_lr(0.05, 100, 100).abs() < 1e-12);
    }

    #[test]
    fn table_trend() {
        let row = |setting, seed, miou| AblationRow {
            setting,
            seed,
            miou,
            best_epoch: 1,
        };
        let t = AblationTable {
            rows: vec![
                row(AblationSetting::Baseline, 0, 0.7),
                row(AblationSetting::Lmp, 0, 0.75),
                row(AblationSetting::LmpCascade, 0, 0.8),
                row(AblationSetting::Baseline, 1, 0.8),
                row(AblationSetting::Lmp, 1, 0.75),
                row(AblationSetting::LmpCascade, 1, 0.8),
            ],
        };
        assert!(t.monotone(0));
        assert!(!t.monotone(1));
        assert_eq!(t.monotone_count(), (1, 2));
        assert!(t.to_csv().starts_with("setting,seed,binary_miou,best_epoch\nbaseline,0,0.700000,1\n"));
    }
}
