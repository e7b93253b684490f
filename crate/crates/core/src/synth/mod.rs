//! Procedural fingernail scenes with dense labels.
//!
//! Each scene is a textured backdrop with skin-toned distractor blobs and a
//! few fingers. Every finger carries a nail drawn as a rotated super-ellipse
//! with a pale band at its free edge. Labels are a fg/bg mask, the finger
//! identity of every nail pixel and the nail's base-to-tip unit vector.
//!
//! Finger identity is tied to the nail's tint so the class head has a
//! visual cue to learn from.

mod io;

pub(crate) use io::derive_seed;
pub use io::{
    dataset_checksum, read_field, read_manifest, write_field,
    generate_dataset, read_dataset, write_dataset, Dataset, DatasetError, DatasetSpec, Manifest, ManifestEntry,
    Split,
};

use std::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objectives::Labels;

/// Largest finger-identity label.
pub const NUM_FINGER_CLASSES: u8 = 10;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("could not place {count} nails without overlap (seed {seed})")]
    Placement { seed: u64, count: usize },
    #[error("invalid scene: {0}")]
    Spec(String),
    #[error("crop {crop_h}x{crop_w} larger than image {h}x{w}")]
    Crop {
        crop_h: usize,
        crop_w: usize,
        h: usize,
        w: usize,
    },
    #[error("sample invariant violated: {0}")]
    Invariant(String),
}

/// One image and its three label planes, all row-major `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub width: usize,
    pub height: usize,
    /// Interleaved sRGB, 3 bytes per pixel.
    pub image: Vec<u8>,
    /// 1 on nail pixels.
    pub fgbg: Vec<u8>,
    /// 0 background, `1..=10` finger identity.
    pub classes: Vec<u8>,
    /// Interleaved `(x, y)` base-to-tip unit vectors; zero off-nail.
    pub field: Vec<f32>,
}

impl ImageSample {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn fg_pixels(&self) -> usize {
        self.fgbg.iter().filter(|&&v| v > 0).count()
    }

    pub fn fg_fraction(&self) -> f64 {
        self.fg_pixels() as f64 / self.pixels() as f64
    }

    /// Checks the label invariants.
    pub fn validate(&self) -> Result<(), SynthError> {
        let px = self.pixels();
        if self.image.len() != 3 * px || self.fgbg.len() != px || self.classes.len() != px || self.field.len() != 2 * px
        {
            return Err(SynthError::Invariant("plane sizes disagree".into()));
        }
        for p in 0..px {
            let fg = self.fgbg[p] > 0;
            if fg != (self.classes[p] > 0) {
                return Err(SynthError::Invariant(format!("pixel {p}: fg/bg and class disagree")));
            }
            if self.classes[p] > NUM_FINGER_CLASSES {
                return Err(SynthError::Invariant(format!("pixel {p}: class {}", self.classes[p])));
            }
            let norm = (self.field[2 * p] as f64).hypot(self.field[2 * p + 1] as f64);
            let ok = if fg { (norm - 1.0).abs() <= 1e-3 } else { norm == 0.0 };
            if !ok {
                return Err(SynthError::Invariant(format!("pixel {p}: field norm {norm}")));
            }
        }
        Ok(())
    }

    /// Stacks samples of equal size into batch labels.
    pub fn batch_labels(samples: &[&ImageSample]) -> Labels {
        let (h, w) = (samples[0].height, samples[0].width);
        let hw = h * w;
        let mut fgbg = Vec::with_capacity(samples.len() * hw);
        let mut classes = Vec::with_capacity(samples.len() * hw);
        let mut field = vec![0f32; samples.len() * 2 * hw];
        for (b, s) in samples.iter().enumerate() {
            assert_eq!((s.height, s.width), (h, w), "batch samples must share a size");
            fgbg.extend_from_slice(&s.fgbg);
            classes.extend_from_slice(&s.classes);
            for p in 0..hw {
                field[b * 2 * hw + p] = s.field[2 * p];
                field[(b * 2 + 1) * hw + p] = s.field[2 * p + 1];
            }
        }
        Labels {
            n: samples.len(),
            h,
            w,
            fgbg,
            classes,
            field,
        }
    }

    /// Copies the `h x w` window whose top-left corner is `(x0, y0)`.
    pub fn crop_at(&self, x0: usize, y0: usize, h: usize, w: usize) -> Result<ImageSample, SynthError> {
        if h == 0 || w == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(SynthError::Crop {
                crop_h: h,
                crop_w: w,
                h: self.height,
                w: self.width,
            });
        }
        let mut out = ImageSample {
            width: w,
            height: h,
            image: Vec::with_capacity(3 * h * w),
            fgbg: Vec::with_capacity(h * w),
            classes: Vec::with_capacity(h * w),
            field: Vec::with_capacity(2 * h * w),
        };
        for y in y0..y0 + h {
            let row = y * self.width;
            out.image.extend_from_slice(&self.image[3 * (row + x0)..3 * (row + x0 + w)]);
            out.fgbg.extend_from_slice(&self.fgbg[row + x0..row + x0 + w]);
            out.classes.extend_from_slice(&self.classes[row + x0..row + x0 + w]);
            out.field.extend_from_slice(&self.field[2 * (row + x0)..2 * (row + x0 + w)]);
        }
        Ok(out)
    }
}

/// Crops all planes to `size = (h, w)` at offsets drawn from `seed`.
pub fn random_crop(sample: &ImageSample, size: (usize, usize), seed: u64) -> Result<ImageSample, SynthError> {
    let (h, w) = size;
    if h > sample.height || w > sample.width {
        return Err(SynthError::Crop {
            crop_h: h,
            crop_w: w,
            h: sample.height,
            w: sample.width,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y0 = rng.gen_range(0..=sample.height - h);
    let x0 = rng.gen_range(0..=sample.width - w);
    sample.crop_at(x0, y0, h, w)
}

/// Colors shared by all images of one scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Appearance {
    pub skin: [u8; 3],
    pub backdrop: [u8; 3],
}

impl Appearance {
    pub fn random(rng: &mut impl Rng) -> Self {
        let skins = [
            [236, 188, 160],
            [224, 172, 138],
            [198, 145, 110],
            [161, 110, 80],
            [120, 80, 58],
            [241, 204, 178],
        ];
        let base = skins[rng.gen_range(0..skins.len())];
        let skin = base.map(|c| (c as i32 + rng.gen_range(-10..=10)).clamp(0, 255) as u8);
        let backdrop = [
            rng.gen_range(40..=210),
            rng.gen_range(40..=210),
            rng.gen_range(40..=210),
        ];
        Appearance { skin, backdrop }
    }
}

/// Parameters of one generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub rng_seed: u64,
    pub width: usize,
    pub height: usize,
    /// Nails to place, `1..=10`.
    pub nail_count: usize,
    /// Half-width range of a nail, px.
    pub nail_half_width: (f64, f64),
    /// Half-length range of a nail (base to tip), px.
    pub nail_half_length: (f64, f64),
    /// Range of the base-to-tip angle, radians.
    pub rotation: (f64, f64),
    /// Width of the pale free-edge band, px.
    pub distal_band_px: f64,
    pub appearance: Appearance,
    /// Amplitude of the low-frequency backdrop texture, in 8-bit units.
    pub texture_amplitude: f64,
    /// Skin-toned blobs that are not nails.
    pub distractors: usize,
    /// Relative brightness change across the frame.
    pub lighting_gradient: f64,
}

impl SceneSpec {
    /// Default geometry for a `width x height` frame, with sizes scaled
    /// relative to a 128 px frame.
    pub fn new(rng_seed: u64, width: usize, height: usize, nail_count: usize, appearance: Appearance) -> Self {
        let s = width.min(height) as f64 / 128.0;
        SceneSpec {
            rng_seed,
            width,
            height,
            nail_count,
            nail_half_width: (6.0 * s, 8.5 * s),
            nail_half_length: (9.0 * s, 12.5 * s),
            rotation: (0.0, TAU),
            distal_band_px: 2.5 * s,
            appearance,
            texture_amplitude: 14.0,
            distractors: 2,
            lighting_gradient: 0.25,
        }
    }

    /// Everything, including appearance, drawn from `seed`.
    pub fn random(seed: u64, width: usize, height: usize, nail_count: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed_5eed_5eed);
        SceneSpec::new(seed, width, height, nail_count, Appearance::random(&mut rng))
    }

    fn validate(&self) -> Result<(), SynthError> {
        if !(1..=NUM_FINGER_CLASSES as usize).contains(&self.nail_count) {
            return Err(SynthError::Spec(format!("nail_count {} outside 1..=10", self.nail_count)));
        }
        if self.width < 16 || self.height < 16 {
            return Err(SynthError::Spec(format!("frame {}x{} too small", self.width, self.height)));
        }
        let ok_range = |(lo, hi): (f64, f64)| lo > 0.0 && hi >= lo && hi.is_finite();
        if !ok_range(self.nail_half_width) || !ok_range(self.nail_half_length) {
            return Err(SynthError::Spec("nail size ranges must be positive".into()));
        }
        if self.rotation.1 < self.rotation.0 {
            return Err(SynthError::Spec("empty rotation range".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Nail {
    cx: f64,
    cy: f64,
    half_width: f64,
    half_length: f64,
    /// Base-to-tip unit vector.
    dir: (f64, f64),
    class: u8,
    exponent: f64,
    wobble: f64,
    wobble_freq: f64,
    wobble_phase: f64,
}

impl Nail {
    /// Local `(across, along)` coordinates of a pixel centre.
    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let along = dx * self.dir.0 + dy * self.dir.1;
        let across = -dx * self.dir.1 + dy * self.dir.0;
        (across, along)
    }

    /// Super-ellipse test with a gentle radial wobble.
    fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.local(x, y);
        let (nu, nv) = (u / self.half_width, v / self.half_length);
        let r = (nu.abs().powf(self.exponent) + nv.abs().powf(self.exponent)).powf(1.0 / self.exponent);
        let angle = nv.atan2(nu);
        r <= 1.0 + self.wobble * (self.wobble_freq * angle + self.wobble_phase).sin()
    }

    fn reach(&self) -> f64 {
        self.half_length.max(self.half_width) * (1.0 + self.wobble) + 1.0
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h / 60.0).rem_euclid(6.0);
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

/// Base nail color for a finger identity.
fn nail_tint(class: u8) -> [f64; 3] {
    let pink = [232.0, 178.0, 170.0];
    let hue = hsv_to_rgb((class as f64 - 1.0) * 36.0, 0.6, 0.92);
    [0, 1, 2].map(|i| 0.45 * pink[i] + 0.55 * hue[i])
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] * (1.0 - t) + b[i] * t)
}

fn rgb_f64(c: [u8; 3]) -> [f64; 3] {
    c.map(|v| v as f64)
}

/// Distance from `p` to segment `a-b`.
fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - a.0 - t * abx).hypot(p.1 - a.1 - t * aby)
}

const MAX_PLACEMENT_TRIES: usize = 400;

/// Renders one scene. Identical specs give byte-identical samples.
pub fn generate_sample(spec: &SceneSpec) -> Result<ImageSample, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let (w, h) = (spec.width, spec.height);
    let px = w * h;

    // backdrop: base color, low-frequency texture, lighting ramp
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let ang = rng.gen_range(0.0..TAU);
            let freq = rng.gen_range(0.02..0.12);
            (ang.cos() * freq, ang.sin() * freq, rng.gen_range(0.0..TAU), rng.gen_range(0.3..1.0))
        })
        .collect();
    let light_ang = rng.gen_range(0.0..TAU);
    let light = (light_ang.cos(), light_ang.sin());
    let backdrop = rgb_f64(spec.appearance.backdrop);
    let mut color = vec![[0f64; 3]; px];
    for y in 0..h {
        for x in 0..w {
            let tex: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * x as f64 + fy * y as f64 + ph).sin())
                .sum::<f64>()
                * spec.texture_amplitude
                / 1.8;
            color[y * w + x] = backdrop.map(|c| c + tex);
        }
    }

    // skin-toned distractor blobs
    let skin = rgb_f64(spec.appearance.skin);
    let scale = w.min(h) as f64 / 128.0;
    for _ in 0..spec.distractors {
        let (cx, cy) = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let (ra, rb) = (rng.gen_range(6.0..18.0) * scale, rng.gen_range(4.0..12.0) * scale);
        let ang: f64 = rng.gen_range(0.0..PI);
        let shade = rng.gen_range(0.85..1.1);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = dx * ang.cos() + dy * ang.sin();
                let v = -dx * ang.sin() + dy * ang.cos();
                if (u / ra).powi(2) + (v / rb).powi(2) <= 1.0 {
                    color[y * w + x] = skin.map(|c| c * shade);
                }
            }
        }
    }

    // nail placement
    let mut classes: Vec<u8> = (1..=NUM_FINGER_CLASSES).collect();
    classes.shuffle(&mut rng);
    let mut nails: Vec<Nail> = Vec::with_capacity(spec.nail_count);
    let mut tries = 0;
    while nails.len() < spec.nail_count {
        tries += 1;
        if tries > MAX_PLACEMENT_TRIES {
            return Err(SynthError::Placement {
                seed: spec.rng_seed,
                count: spec.nail_count,
            });
        }
        let half_width = rng.gen_range(spec.nail_half_width.0..=spec.nail_half_width.1);
        let half_length = rng.gen_range(spec.nail_half_length.0..=spec.nail_half_length.1);
        let theta = rng.gen_range(spec.rotation.0..=spec.rotation.1);
        let wobble = rng.gen_range(0.0..0.05);
        let margin = half_length.max(half_width) * (1.0 + wobble) + 2.0;
        if 2.0 * margin >= w.min(h) as f64 {
            continue;
        }
        let cx = rng.gen_range(margin..w as f64 - margin);
        let cy = rng.gen_range(margin..h as f64 - margin);
        let nail = Nail {
            cx,
            cy,
            half_width,
            half_length,
            dir: (theta.cos(), theta.sin()),
            class: classes[nails.len()],
            exponent: rng.gen_range(2.2..2.8),
            wobble,
            wobble_freq: [2.0, 3.0, 4.0][rng.gen_range(0..3)],
            wobble_phase: rng.gen_range(0.0..TAU),
        };
        let clear = nails
            .iter()
            .all(|o| (o.cx - cx).hypot(o.cy - cy) > o.reach() + nail.reach() + 3.0);
        if clear {
            nails.push(nail);
        }
    }

    // fingers under the nails, extending from just past the tip back towards the palm
    for nail in &nails {
        let tip = (nail.cx + nail.dir.0 * nail.half_length * 0.55, nail.cy + nail.dir.1 * nail.half_length * 0.55);
        let base = (nail.cx - nail.dir.0 * nail.half_length * 5.0, nail.cy - nail.dir.1 * nail.half_length * 5.0);
        let radius = nail.half_width * 1.4;
        for y in 0..h {
            for x in 0..w {
                let d = segment_distance((x as f64 + 0.5, y as f64 + 0.5), tip, base);
                if d <= radius {
                    let shade = 1.0 - 0.25 * (d / radius).powi(2);
                    color[y * w + x] = skin.map(|c| c * shade);
                }
            }
        }
    }

    let mut fgbg = vec![0u8; px];
    let mut class_map = vec![0u8; px];
    let mut field = vec![0f32; 2 * px];
    let free_edge = [246.0, 242.0, 232.0];
    for nail in &nails {
        let tint = nail_tint(nail.class);
        let r = nail.reach().ceil() as isize;
        let (x0, x1) = ((nail.cx as isize - r).max(0), (nail.cx as isize + r).min(w as isize - 1));
        let (y0, y1) = ((nail.cy as isize - r).max(0), (nail.cy as isize + r).min(h as isize - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                if !nail.contains(fx, fy) {
                    continue;
                }
                let p = y as usize * w + x as usize;
                let (u, v) = nail.local(fx, fy);
                let sheen = 1.0 - 0.12 * (u / nail.half_width).powi(2);
                let mut c = tint.map(|v| v * sheen);
                let edge = v - (nail.half_length - spec.distal_band_px);
                if edge > 0.0 {
                    c = mix(c, free_edge, (edge / spec.distal_band_px).clamp(0.0, 1.0) * 0.5 + 0.5);
                }
                color[p] = c;
                fgbg[p] = 1;
                class_map[p] = nail.class;
                field[2 * p] = nail.dir.0 as f32;
                field[2 * p + 1] = nail.dir.1 as f32;
            }
        }
    }

    let mut image = vec![0u8; 3 * px];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let t = ((x as f64 / w as f64 - 0.5) * light.0 + (y as f64 / h as f64 - 0.5) * light.1) * 2.0;
            let gain = 1.0 + spec.lighting_gradient * 0.5 * t;
            for ch in 0..3 {
                let noise = rng.gen_range(-3.0..3.0);
                image[3 * p + ch] = (color[p][ch] * gain + noise).round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    Ok(ImageSample {
        width: w,
        height: h,
        image,
        fgbg,
        classes: class_map,
        field,
    })
}
