//! Training objectives: multinomial NLL for the class and fg/bg heads, loss
//! max-pooling over the fg/bg pixels of a minibatch, and the L2 loss on the
//! base-to-tip direction field.
//!
//! Class and field losses only count pixels inside ground-truth nails. By
//! default they are normalized by the full pixel count `N * H * W`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{HeadVars, OutputVars};
use crate::tensor::{Element, Tape, TensorError, Var};

/// Fraction of fg/bg pixels kept by loss max-pooling.
pub const DEFAULT_KEPT_FRACTION: f64 = 0.1;
/// Foreground weight of the weighted cross-entropy baseline.
pub const BASELINE_FG_WEIGHT: f64 = 20.0;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("field target at pixel {pixel} has norm {norm}, expected 1")]
    FieldNorm { pixel: usize, norm: f64 },
    #[error("label shape mismatch: {0}")]
    Labels(String),
    #[error("kept fraction must lie in (0, 1], got {0}")]
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FgbgObjective {
    /// Mean over the hardest `kept_fraction` of all minibatch pixels.
    LossMaxPooling { kept_fraction: f64 },
    /// Per-pixel NLL with foreground pixels weighted `fg_weight` times.
    WeightedCrossEntropy { fg_weight: f64 },
}

/// Denominator of the in-nail class and field sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelNormalization {
    /// Divide the in-nail sum by every pixel, `N * H * W`.
    AllPixels,
    /// Divide by the number of in-nail pixels.
    ValidPixels,
}

impl PixelNormalization {
    fn denominator(self, all: usize, valid: usize) -> f64 {
        match self {
            PixelNormalization::AllPixels => all as f64,
            PixelNormalization::ValidPixels => valid.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub fgbg: FgbgObjective,
    pub class_normalization: PixelNormalization,
    pub field_normalization: PixelNormalization,
    pub aux_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            fgbg: FgbgObjective::LossMaxPooling {
                kept_fraction: DEFAULT_KEPT_FRACTION,
            },
            class_normalization: PixelNormalization::AllPixels,
            field_normalization: PixelNormalization::AllPixels,
            aux_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn weighted_baseline() -> Self {
        LossConfig {
            fgbg: FgbgObjective::WeightedCrossEntropy {
                fg_weight: BASELINE_FG_WEIGHT,
            },
            ..LossConfig::default()
        }
    }
}

/// Summed losses of one step (all scales), as logged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub fgbg: f64,
    #[serde(rename = "class")]
    pub class_: f64,
    pub field: f64,
    pub total: f64,
    /// LMP threshold at full resolution; 0 for the weighted baseline.
    pub tau: f64,
    pub kept_fraction: f64,
}

/// Dense labels for a batch, all `N x H x W` at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    /// 0 background, 1 nail.
    pub fgbg: Vec<u8>,
    /// 0 background, `1..=C` finger identity.
    pub classes: Vec<u8>,
    /// `N x 2 x H x W`, unit vectors on nail pixels and zero elsewhere.
    pub field: Vec<f32>,
}

impl Labels {
    pub fn validate(&self) -> Result<(), LossError> {
        let px = self.n * self.h * self.w;
        if self.fgbg.len() != px || self.classes.len() != px || self.field.len() != 2 * px {
            return Err(LossError::Labels(format!(
                "{}x{}x{} needs {px} mask values and {} field values",
                self.n,
                self.h,
                self.w,
                2 * px
            )));
        }
        Ok(())
    }

    /// Nearest-neighbour masks and area-mean-then-renormalized field at
    /// `1/factor` resolution.
    pub fn downsample(&self, factor: usize) -> Labels {
        if factor == 1 {
            return self.clone();
        }
        let (oh, ow) = (self.h / factor, self.w / factor);
        let hw = self.h * self.w;
        let ohw = oh * ow;
        let mut fgbg = vec![0u8; self.n * ohw];
        let mut classes = vec![0u8; self.n * ohw];
        let mut field = vec![0f32; self.n * 2 * ohw];
        let centre = factor / 2;
        for b in 0..self.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let src = b * hw + (oy * factor + centre) * self.w + ox * factor + centre;
                    let dst = b * ohw + oy * ow + ox;
                    fgbg[dst] = self.fgbg[src];
                    classes[dst] = self.classes[src];
                    if fgbg[dst] == 0 {
                        continue;
                    }
                    let (mut fx, mut fy) = (0f64, 0f64);
                    for dy in 0..factor {
                        for dx in 0..factor {
                            let p = (oy * factor + dy) * self.w + ox * factor + dx;
                            fx += self.field[(b * 2) * hw + p] as f64;
                            fy += self.field[(b * 2 + 1) * hw + p] as f64;
                        }
                    }
                    let norm = fx.hypot(fy);
                    let (ux, uy) = if norm > 0.0 {
                        (fx / norm, fy / norm)
                    } else {
                        let p = src - b * hw;
                        (self.field[(b * 2) * hw + p] as f64, self.field[(b * 2 + 1) * hw + p] as f64)
                    };
                    field[(b * 2) * ohw + oy * ow + ox] = ux as f32;
                    field[(b * 2 + 1) * ohw + oy * ow + ox] = uy as f32;
                }
            }
        }
        Labels {
            n: self.n,
            h: oh,
            w: ow,
            fgbg,
            classes,
            field,
        }
    }
}

/// Result of ranking per-pixel losses for max-pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct LmpSelection<T> {
    /// Flat indices of kept pixels, ascending.
    pub kept: Vec<usize>,
    /// Loss of the last kept pixel in rank order.
    pub tau: T,
}

/// Number of pixels kept out of `total`: `max(1, floor(fraction * total))`.
pub fn lmp_keep_count(total: usize, kept_fraction: f64) -> usize {
    ((kept_fraction * total as f64).floor() as usize).clamp(1, total.max(1))
}

/// Selects the `k` hardest pixels. Pixels are ranked by loss, descending,
/// with ties broken by ascending flat index, so exactly `k` are kept.
pub fn lmp_select<T: Element>(losses: &[T], kept_fraction: f64) -> Result<LmpSelection<T>, LossError> {
    if !(kept_fraction > 0.0 && kept_fraction <= 1.0) {
        return Err(LossError::Fraction(kept_fraction));
    }
    if losses.is_empty() {
        return Err(TensorError::invalid("lmp_loss", "no pixels to pool").into());
    }
    let k = lmp_keep_count(losses.len(), kept_fraction);
    let rank = |a: &usize, b: &usize| -> Ordering {
        losses[*b]
            .partial_cmp(&losses[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let mut order: Vec<usize> = (0..losses.len()).collect();
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, rank);
        order.truncate(k);
    }
    let last = *order.iter().max_by(|a, b| rank(a, b)).expect("k >= 1");
    let tau = losses[last];
    order.sort_unstable();
    Ok(LmpSelection { kept: order, tau })
}

/// Per-pixel `-log softmax(logits)[target]`; pixels without a target are 0.
pub fn nll_loss<T: Element>(tape: &mut Tape<T>, logits: Var, targets: &[Option<usize>]) -> Result<Var, LossError> {
    Ok(tape.nll(logits, targets)?)
}

/// Mean of the hardest `kept_fraction` of `per_pixel` and the threshold used.
pub fn lmp_loss<T: Element>(tape: &mut Tape<T>, per_pixel: Var, kept_fraction: f64) -> Result<(Var, T), LossError> {
    let sel = lmp_select(tape.value(per_pixel).data(), kept_fraction)?;
    let v = tape.subset_mean(per_pixel, sel.kept)?;
    Ok((v, sel.tau))
}

/// Squared error of the field over `valid` pixels, normalized per `norm`.
/// `target` and `pred` are `N x 2 x H x W`; `valid` is `N x H x W`.
pub fn field_loss<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &[f32],
    valid: &[bool],
    norm: PixelNormalization,
) -> Result<Var, LossError> {
    let (n, _, h, w) = tape.value(pred).dims4()?;
    let hw = h * w;
    if valid.len() != n * hw || target.len() != 2 * n * hw {
        return Err(LossError::Labels(format!(
            "field pred {:?}, {} targets, {} mask values",
            tape.value(pred).shape(),
            target.len(),
            valid.len()
        )));
    }
    for (i, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
        let (b, p) = (i / hw, i % hw);
        let norm = (target[b * 2 * hw + p] as f64).hypot(target[(b * 2 + 1) * hw + p] as f64);
        if (norm - 1.0).abs() > 1e-3 {
            return Err(LossError::FieldNorm { pixel: i, norm });
        }
    }
    let count = valid.iter().filter(|&&v| v).count();
    let scale = T::from_f64_lossy(1.0 / norm.denominator(n * hw, count));
    let mask = valid
        .iter()
        .map(|&v| if v { scale } else { T::zero() })
        .collect();
    let target = target.iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
    Ok(tape.masked_sq_err(pred, target, mask)?)
}

/// Losses of one head set against labels at its resolution.
struct ScaleLoss {
    fgbg: Var,
    class: Var,
    field: Var,
    tau: f64,
}

fn scale_loss<T: Element>(
    tape: &mut Tape<T>,
    heads: &HeadVars,
    labels: &Labels,
    cfg: &LossConfig,
) -> Result<ScaleLoss, LossError> {
    let px = labels.n * labels.h * labels.w;
    let (_, classes, h, w) = tape.value(heads.class).dims4()?;
    if (h, w) != (labels.h, labels.w) {
        return Err(LossError::Labels(format!(
            "head at {h}x{w}, labels at {}x{}",
            labels.h, labels.w
        )));
    }

    let fg_targets: Vec<Option<usize>> = labels.fgbg.iter().map(|&v| Some(v as usize)).collect();
    let fg_pixels = nll_loss(tape, heads.fgbg, &fg_targets)?;
    let (fgbg, tau) = match cfg.fgbg {
        FgbgObjective::LossMaxPooling { kept_fraction } => {
            let (v, tau) = lmp_loss(tape, fg_pixels, kept_fraction)?;
            (v, tau.to_f64_lossy())
        }
        FgbgObjective::WeightedCrossEntropy { fg_weight } => {
            let total: f64 = labels.fgbg.iter().map(|&v| if v > 0 { fg_weight } else { 1.0 }).sum();
            let weights = labels
                .fgbg
                .iter()
                .map(|&v| T::from_f64_lossy(if v > 0 { fg_weight } else { 1.0 } / total))
                .collect();
            (tape.weighted_sum(fg_pixels, weights)?, 0.0)
        }
    };

    let mut class_targets = Vec::with_capacity(px);
    for &c in &labels.classes {
        class_targets.push(match c as usize {
            0 => None,
            k if k <= classes => Some(k - 1),
            k => {
                return Err(TensorError::invalid("class loss", format!("label {k} exceeds {classes} classes")).into())
            }
        });
    }
    let class_pixels = nll_loss(tape, heads.class, &class_targets)?;
    let in_nail = class_targets.iter().filter(|t| t.is_some()).count();
    let inv = T::from_f64_lossy(1.0 / cfg.class_normalization.denominator(px, in_nail));
    let class = tape.weighted_sum(class_pixels, vec![inv; px])?;

    let valid: Vec<bool> = labels.fgbg.iter().map(|&v| v > 0).collect();
    let field = field_loss(tape, heads.field, &labels.field, &valid, cfg.field_normalization)?;
    Ok(ScaleLoss {
        fgbg,
        class,
        field,
        tau,
    })
}

/// `fgbg + class + field` summed over the full-resolution heads and every
/// auxiliary scale (weighted by `aux_weight`). Returns the scalar to
/// differentiate and the logged breakdown.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    output: &OutputVars,
    labels: &Labels,
    cfg: &LossConfig,
) -> Result<(Var, LossBundle), LossError> {
    labels.validate()?;
    let full = scale_loss(tape, &output.full, labels, cfg)?;
    let mut fgbg_terms = vec![full.fgbg];
    let mut class_terms = vec![full.class];
    let mut field_terms = vec![full.field];
    for (scale, heads) in &output.aux {
        let l = scale_loss(tape, heads, &labels.downsample(*scale), cfg)?;
        let wgt = T::from_f64_lossy(cfg.aux_weight);
        for (terms, v) in [(&mut fgbg_terms, l.fgbg), (&mut class_terms, l.class), (&mut field_terms, l.field)] {
            terms.push(if cfg.aux_weight == 1.0 { v } else { tape.scale(v, wgt) });
        }
    }
    let fgbg = tape.add_all(&fgbg_terms)?;
    let class = tape.add_all(&class_terms)?;
    let field = tape.add_all(&field_terms)?;
    let total = tape.add_all(&[fgbg, class, field])?;

    let value = |v: Var| tape.value(v).item().to_f64_lossy();
    let (f, c, d) = (value(fgbg), value(class), value(field));
    let kept_fraction = match cfg.fgbg {
        FgbgObjective::LossMaxPooling { kept_fraction } => kept_fraction,
        FgbgObjective::WeightedCrossEntropy { .. } => 1.0,
    };
    Ok((
        total,
        LossBundle {
            fgbg: f,
            class_: c,
            field: d,
            total: f + c + d,
            tau: full.tau,
            kept_fraction,
        },
    ))
}
