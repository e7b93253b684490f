//! Evaluation: IoU, orientation error and the runtime procedure.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{images_to_tensor, Model, ModelError};
use crate::postprocess::{extract_instances, label_components, Connectivity, DensePrediction, PostprocessError, PostprocessParams};
use crate::synth::ImageSample;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask sizes differ: {0} vs {1}")]
    Shape(usize, usize),
    #[error("vector ({0}, {1}) is not unit length")]
    NotUnit(f64, f64),
    #[error("no samples to evaluate")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Postprocess(#[from] PostprocessError),
}

fn iou(inter: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// `(intersection, union)` counts for foreground and background.
fn binary_counts(pred: &[bool], gt: &[bool]) -> [(u64, u64); 2] {
    let mut c = [(0u64, 0u64); 2];
    for (&p, &g) in pred.iter().zip(gt) {
        for (k, (pk, gk)) in [(p, g), (!p, !g)].into_iter().enumerate() {
            c[k].0 += (pk && gk) as u64;
            c[k].1 += (pk || gk) as u64;
        }
    }
    c
}

/// Mean of foreground and background IoU. A class absent from both masks
/// scores 1.
pub fn miou(pred: &[bool], gt: &[bool]) -> Result<f64, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::Shape(pred.len(), gt.len()));
    }
    let [fg, bg] = binary_counts(pred, gt);
    Ok(0.5 * (iou(fg.0, fg.1) + iou(bg.0, bg.1)))
}

/// Angle in degrees between two unit vectors.
pub fn angular_error(pred: (f64, f64), gt: (f64, f64)) -> Result<f64, MetricsError> {
    for v in [pred, gt] {
        if (v.0.hypot(v.1) - 1.0).abs() > 1e-3 {
            return Err(MetricsError::NotUnit(v.0, v.1));
        }
    }
    let dot = (pred.0 * gt.0 + pred.1 * gt.1).clamp(-1.0, 1.0);
    Ok(dot.acos().to_degrees())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub binary_miou: f64,
    /// IoU of finger identities `1..=10`, in order.
    pub per_class_iou: Vec<f64>,
    pub mean_angular_error_deg: f64,
    pub pixel_accuracy: f64,
    pub runtime_ms_per_frame: f64,
    pub frames: usize,
    /// Ground-truth nails with an overlapping predicted instance.
    pub matched_nails: usize,
    pub total_nails: usize,
}

/// Per-frame counters, merged in frame order.
#[derive(Debug, Clone, Default)]
struct Tally {
    bin: [(u64, u64); 2],
    class: Vec<(u64, u64)>,
    correct: u64,
    pixels: u64,
    angle_sum: f64,
    matched: usize,
    nails: usize,
}

impl Tally {
    fn merge(&mut self, o: &Tally) {
        for k in 0..2 {
            self.bin[k].0 += o.bin[k].0;
            self.bin[k].1 += o.bin[k].1;
        }
        if self.class.len() < o.class.len() {
            self.class.resize(o.class.len(), (0, 0));
        }
        for (a, b) in self.class.iter_mut().zip(&o.class) {
            a.0 += b.0;
            a.1 += b.1;
        }
        self.correct += o.correct;
        self.pixels += o.pixels;
        self.angle_sum += o.angle_sum;
        self.matched += o.matched;
        self.nails += o.nails;
    }
}

fn tally_frame(pred: &DensePrediction, gt: &ImageSample, params: &PostprocessParams, classes: usize) -> Tally {
    let fg = pred.fg_mask(params.fg_threshold);
    let gt_fg: Vec<bool> = gt.fgbg.iter().map(|&v| v > 0).collect();
    let mut t = Tally {
        bin: binary_counts(&fg, &gt_fg),
        class: vec![(0, 0); classes],
        pixels: fg.len() as u64,
        ..Tally::default()
    };
    t.correct = fg.iter().zip(&gt_fg).filter(|(a, b)| a == b).count() as u64;
    for p in 0..fg.len() {
        let pc = if fg[p] { pred.class[p] as usize } else { 0 };
        let gc = gt.classes[p] as usize;
        for c in 1..=classes {
            let (a, b) = (pc == c, gc == c);
            t.class[c - 1].0 += (a && b) as u64;
            t.class[c - 1].1 += (a || b) as u64;
        }
    }

    // each ground-truth nail is matched to the predicted instance it overlaps most
    let instances = extract_instances(pred, params);
    let mut owner = vec![usize::MAX; fg.len()];
    for (i, inst) in instances.iter().enumerate() {
        for (x, y) in inst.pixels() {
            owner[y as usize * pred.width + x as usize] = i;
        }
    }
    let (labels, count) = label_components(&gt_fg, gt.width, gt.height, Connectivity::Four);
    let mut overlap = vec![vec![0usize; instances.len()]; count];
    let mut dir = vec![(0.0, 0.0); count];
    for (p, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let k = l as usize - 1;
        dir[k] = (gt.field[2 * p] as f64, gt.field[2 * p + 1] as f64);
        if owner[p] != usize::MAX {
            overlap[k][owner[p]] += 1;
        }
    }
    t.nails = count;
    for k in 0..count {
        let best = overlap[k].iter().enumerate().max_by_key(|&(i, &n)| (n, std::cmp::Reverse(i)));
        if let Some((i, &n)) = best {
            if n > 0 {
                let o = instances[i].orientation;
                let norm = dir[k].0.hypot(dir[k].1);
                let d = (dir[k].0 / norm, dir[k].1 / norm);
                t.angle_sum += angular_error(o, d).unwrap_or(180.0);
                t.matched += 1;
            }
        }
    }
    t
}

/// Evaluates `model` on samples of equal size, `batch` frames at a time.
pub fn evaluate(
    model: &Model,
    samples: &[&ImageSample],
    params: &PostprocessParams,
    batch: usize,
) -> Result<EvalReport, MetricsError> {
    let first = samples.first().ok_or(MetricsError::Empty)?;
    let (h, w) = (first.height, first.width);
    let model = if model.config().input_size == (h, w) {
        model.clone()
    } else {
        model.with_input_size(h, w)?
    };
    let classes = model.config().num_finger_classes;
    let mut total = Tally::default();
    let mut elapsed = 0.0;
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<&[u8]> = chunk.iter().map(|s| s.image.as_slice()).collect();
        let start = Instant::now();
        let out = model.forward(&images_to_tensor(&images, h, w))?;
        let preds = (0..chunk.len())
            .map(|i| DensePrediction::from_output(&out, i))
            .collect::<Result<Vec<_>, _>>()?;
        elapsed += start.elapsed().as_secs_f64();
        for (pred, gt) in preds.iter().zip(chunk) {
            total.merge(&tally_frame(pred, gt, params, classes));
        }
    }
    let [fg, bg] = total.bin;
    Ok(EvalReport {
        binary_miou: 0.5 * (iou(fg.0, fg.1) + iou(bg.0, bg.1)),
        per_class_iou: total.class.iter().map(|&(i, u)| iou(i, u)).collect(),
        mean_angular_error_deg: if total.matched == 0 {
            0.0
        } else {
            total.angle_sum / total.matched as f64
        },
        pixel_accuracy: total.correct as f64 / total.pixels.max(1) as f64,
        runtime_ms_per_frame: 1e3 * elapsed / samples.len() as f64,
        frames: samples.len(),
        matched_nails: total.matched,
        total_nails: total.nails,
    })
}

/// Timing of single-frame forward plus instance extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub frames: usize,
    pub warmup: usize,
}

pub const RUNTIME_WARMUP: usize = 10;
pub const RUNTIME_FRAMES: usize = 50;

/// Median wall time of `frames` runs after `warmup` runs, on one thread.
pub fn measure_runtime(
    model: &Model,
    image: &[u8],
    params: &PostprocessParams,
    warmup: usize,
    frames: usize,
) -> Result<RuntimeStats, MetricsError> {
    let (h, w) = model.config().input_size;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-thread pool");
    let input = images_to_tensor(&[image], h, w);
    pool.install(|| -> Result<RuntimeStats, MetricsError> {
        let mut times = Vec::with_capacity(frames);
        for i in 0..warmup + frames {
            let start = Instant::now();
            let out = model.forward(&input)?;
            let pred = DensePrediction::from_output(&out, 0)?;
            std::hint::black_box(extract_instances(&pred, params));
            if i >= warmup {
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
        }
        if times.is_empty() {
            return Err(MetricsError::Empty);
        }
        times.sort_by(f64::total_cmp);
        let n = times.len();
        let median = if n % 2 == 1 {
            times[n / 2]
        } else {
            0.5 * (times[n / 2 - 1] + times[n / 2])
        };
        Ok(RuntimeStats {
            median_ms: median,
            min_ms: times[0],
            max_ms: times[n - 1],
            frames: n,
            warmup,
        })
    })
}
