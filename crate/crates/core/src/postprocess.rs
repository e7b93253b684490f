//! Dense predictions to per-nail instances.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::SegOutput;
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl Connectivity {
    pub fn from_count(n: usize) -> Option<Self> {
        match n {
            4 => Some(Connectivity::Four),
            8 => Some(Connectivity::Eight),
            _ => None,
        }
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let up = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = up;
            x = up;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) -> u32 {
        let (ra, rb) = (self.find(a), self.find(b));
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        self.parent[hi as usize] = lo;
        lo
    }
}

/// Two-pass union-find labelling. Labels are `1..=count` in raster order of
/// first appearance; background is 0.
pub fn label_components(mask: &[bool], width: usize, height: usize, conn: Connectivity) -> (Vec<u32>, usize) {
    assert_eq!(mask.len(), width * height, "mask size");
    let mut labels = vec![0u32; mask.len()];
    let mut uf = UnionFind { parent: vec![0] };
    for y in 0..height {
        for x in 0..width {
            let p = y * width + x;
            if !mask[p] {
                continue;
            }
            let mut neighbours = [0u32; 4];
            let mut n = 0;
            let mut push = |l: u32| {
                if l != 0 {
                    neighbours[n] = l;
                    n += 1;
                }
            };
            if x > 0 {
                push(labels[p - 1]);
            }
            if y > 0 {
                push(labels[p - width]);
                if conn == Connectivity::Eight {
                    if x > 0 {
                        push(labels[p - width - 1]);
                    }
                    if x + 1 < width {
                        push(labels[p - width + 1]);
                    }
                }
            }
            labels[p] = if n == 0 {
                let l = uf.parent.len() as u32;
                uf.parent.push(l);
                l
            } else {
                let mut root = neighbours[0];
                for &l in &neighbours[1..n] {
                    root = uf.union(root, l);
                }
                uf.find(root)
            };
        }
    }
    let mut compact = vec![0u32; uf.parent.len()];
    let mut count = 0u32;
    for l in labels.iter_mut() {
        if *l == 0 {
            continue;
        }
        let root = uf.find(*l) as usize;
        if compact[root] == 0 {
            count += 1;
            compact[root] = count;
        }
        *l = compact[root];
    }
    (labels, count as usize)
}

#[derive(Debug, Error, PartialEq)]
pub enum PostprocessError {
    #[error("prediction planes disagree: {0}")]
    Shape(String),
    #[error("batch index {index} out of range for batch of {n}")]
    Index { index: usize, n: usize },
}

/// Per-pixel planes for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DensePrediction {
    pub width: usize,
    pub height: usize,
    /// Foreground softmax.
    pub fg_score: Vec<f32>,
    /// Argmax finger identity, `1..=classes`.
    pub class: Vec<u8>,
    /// Interleaved `(x, y)` direction predictions.
    pub field: Vec<f32>,
}

impl DensePrediction {
    /// Reads frame `index` of a full-resolution output.
    pub fn from_output<T: Element>(out: &SegOutput<T>, index: usize) -> Result<Self, PostprocessError> {
        let (n, c2, h, w) = out.fgbg_logits.dims4().map_err(|e| PostprocessError::Shape(e.to_string()))?;
        let (cn, classes, ch, cw) = out.class_logits.dims4().map_err(|e| PostprocessError::Shape(e.to_string()))?;
        let (fnn, fc, fh, fw) = out.field.dims4().map_err(|e| PostprocessError::Shape(e.to_string()))?;
        if c2 != 2 || fc != 2 || (cn, ch, cw) != (n, h, w) || (fnn, fh, fw) != (n, h, w) || classes == 0 {
            return Err(PostprocessError::Shape("expected N x {2, C, 2} x H x W".into()));
        }
        if index >= n {
            return Err(PostprocessError::Index { index, n });
        }
        let hw = h * w;
        let f = |t: &crate::tensor::Tensor<T>, c: usize, p: usize, cs: usize| t.data()[(index * cs + c) * hw + p].to_f64_lossy();
        let mut fg_score = Vec::with_capacity(hw);
        let mut class = Vec::with_capacity(hw);
        let mut field = Vec::with_capacity(2 * hw);
        for p in 0..hw {
            let (bg, fg) = (f(&out.fgbg_logits, 0, p, 2), f(&out.fgbg_logits, 1, p, 2));
            fg_score.push((1.0 / (1.0 + (bg - fg).exp())) as f32);
            let mut best = (f64::NEG_INFINITY, 0);
            for c in 0..classes {
                let v = f(&out.class_logits, c, p, classes);
                if v > best.0 {
                    best = (v, c);
                }
            }
            class.push(best.1 as u8 + 1);
            field.push(f(&out.field, 0, p, 2) as f32);
            field.push(f(&out.field, 1, p, 2) as f32);
        }
        Ok(DensePrediction {
            width: w,
            height: h,
            fg_score,
            class,
            field,
        })
    }

    /// Binary foreground mask at `threshold`.
    pub fn fg_mask(&self, threshold: f32) -> Vec<bool> {
        self.fg_score.iter().map(|&s| s >= threshold).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocessParams {
    pub min_area: usize,
    pub fg_threshold: f32,
    pub connectivity: Connectivity,
}

impl PostprocessParams {
    /// 16 px at 288 x 288, scaled with the pixel count.
    pub fn for_size(width: usize, height: usize) -> Self {
        let min_area = (16.0 * (width * height) as f64 / (288.0 * 288.0)).round().max(1.0) as usize;
        PostprocessParams {
            min_area,
            fg_threshold: 0.5,
            connectivity: Connectivity::Four,
        }
    }
}

/// Inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

/// One detected nail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NailInstance {
    pub id: usize,
    #[serde(rename = "class")]
    pub class_label: u8,
    pub bbox: BBox,
    /// Mean pixel coordinate `(x, y)`.
    pub centroid: (f64, f64),
    /// Base-to-tip unit vector.
    pub orientation: (f64, f64),
    pub area: usize,
    pub mean_score: f64,
    /// Set when the weighted direction sum vanished and `orientation` is the
    /// fallback.
    pub degenerate: bool,
    /// Row runs `[y, x_start, length]` in raster order.
    pub rle: Vec<[u32; 3]>,
}

/// Fallback orientation: pointing up the frame.
pub const DEGENERATE_ORIENTATION: (f64, f64) = (0.0, -1.0);

fn encode_rle(pixels: &[(u32, u32)]) -> Vec<[u32; 3]> {
    let mut sorted: Vec<(u32, u32)> = pixels.iter().map(|&(x, y)| (y, x)).collect();
    sorted.sort_unstable();
    sorted.dedup();
    let mut runs: Vec<[u32; 3]> = Vec::new();
    for (y, x) in sorted {
        match runs.last_mut() {
            Some(r) if r[0] == y && r[1] + r[2] == x => r[2] += 1,
            _ => runs.push([y, x, 1]),
        }
    }
    runs
}

impl NailInstance {
    /// Pixels `(x, y)` in raster order.
    pub fn pixels(&self) -> Vec<(u32, u32)> {
        self.rle
            .iter()
            .flat_map(|&[y, x0, len]| (x0..x0 + len).map(move |x| (x, y)))
            .collect()
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        self.rle.iter().any(|&[ry, x0, len]| ry == y && x >= x0 && x < x0 + len)
    }

    /// Builds an instance from a pixel set, recomputing bbox, area and centroid.
    pub fn from_pixels(
        id: usize,
        class_label: u8,
        pixels: &[(u32, u32)],
        orientation: (f64, f64),
        mean_score: f64,
        degenerate: bool,
    ) -> Self {
        assert!(!pixels.is_empty(), "instance needs at least one pixel");
        let rle = encode_rle(pixels);
        let mut inst = NailInstance {
            id,
            class_label,
            bbox: BBox {
                x0: 0,
                y0: 0,
                x1: 0,
                y1: 0,
            },
            centroid: (0.0, 0.0),
            orientation,
            area: 0,
            mean_score,
            degenerate,
            rle,
        };
        inst.refresh_geometry();
        inst
    }

    fn refresh_geometry(&mut self) {
        let px = self.pixels();
        let (mut sx, mut sy) = (0.0, 0.0);
        let mut b = BBox {
            x0: u32::MAX,
            y0: u32::MAX,
            x1: 0,
            y1: 0,
        };
        for &(x, y) in &px {
            sx += x as f64;
            sy += y as f64;
            b.x0 = b.x0.min(x);
            b.y0 = b.y0.min(y);
            b.x1 = b.x1.max(x);
            b.y1 = b.y1.max(y);
        }
        self.area = px.len();
        self.bbox = b;
        self.centroid = (sx / px.len() as f64, sy / px.len() as f64);
    }
}

/// Per-class connected components of the gated argmax map, with
/// score-weighted orientation.
pub fn extract_instances(pred: &DensePrediction, params: &PostprocessParams) -> Vec<NailInstance> {
    let (w, h) = (pred.width, pred.height);
    let gate = pred.fg_mask(params.fg_threshold);
    let max_class = pred.class.iter().copied().max().unwrap_or(0);
    let mut out = Vec::new();
    for class in 1..=max_class {
        let mask: Vec<bool> = (0..w * h).map(|p| gate[p] && pred.class[p] == class).collect();
        let (labels, count) = label_components(&mask, w, h, params.connectivity);
        if count == 0 {
            continue;
        }
        let mut members: Vec<Vec<u32>> = vec![Vec::new(); count];
        for (p, &l) in labels.iter().enumerate() {
            if l > 0 {
                members[l as usize - 1].push(p as u32);
            }
        }
        for comp in members {
            if comp.len() < params.min_area {
                continue;
            }
            let (mut dx, mut dy, mut score) = (0.0f64, 0.0f64, 0.0f64);
            for &p in &comp {
                let s = pred.fg_score[p as usize] as f64;
                dx += s * pred.field[2 * p as usize] as f64;
                dy += s * pred.field[2 * p as usize + 1] as f64;
                score += s;
            }
            let norm = dx.hypot(dy);
            let (orientation, degenerate) = if norm > 1e-12 && norm.is_finite() {
                ((dx / norm, dy / norm), false)
            } else {
                (DEGENERATE_ORIENTATION, true)
            };
            let pixels: Vec<(u32, u32)> = comp.iter().map(|&p| (p % w as u32, p / w as u32)).collect();
            out.push(NailInstance::from_pixels(
                0,
                class,
                &pixels,
                orientation,
                score / comp.len() as f64,
                degenerate,
            ));
        }
    }
    // stable ids: raster order of each instance's first pixel
    out.sort_by_key(|i| (i.rle[0][0], i.rle[0][1], i.class_label));
    for (id, inst) in out.iter_mut().enumerate() {
        inst.id = id;
    }
    out
}

/// Sweeps tip-side boundary pixels `1..=length` steps along the orientation
/// and unions them in, clipped to the frame. Centroid and orientation are
/// kept from the unstretched nail.
pub fn stretch_mask(inst: &NailInstance, length: usize, width: usize, height: usize) -> NailInstance {
    if length == 0 {
        return inst.clone();
    }
    let pixels = inst.pixels();
    let (ox, oy) = inst.orientation;
    let (cx, cy) = inst.centroid;
    let mut grown = pixels.clone();
    for &(x, y) in &pixels {
        let boundary = x == 0
            || y == 0
            || !inst.contains(x - 1, y)
            || !inst.contains(x + 1, y)
            || !inst.contains(x, y - 1)
            || !inst.contains(x, y + 1);
        let tip_side = (x as f64 - cx) * ox + (y as f64 - cy) * oy >= -1e-9;
        if !(boundary && tip_side) {
            continue;
        }
        for t in 1..=length {
            let nx = (x as f64 + t as f64 * ox).round();
            let ny = (y as f64 + t as f64 * oy).round();
            if nx >= 0.0 && ny >= 0.0 && (nx as usize) < width && (ny as usize) < height {
                grown.push((nx as u32, ny as u32));
            }
        }
    }
    let mut out = inst.clone();
    out.rle = encode_rle(&grown);
    let centroid = out.centroid;
    out.refresh_geometry();
    out.centroid = centroid;
    out
}
