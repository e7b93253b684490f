//! Polish compositing over detected nails.
//!
//! Each instance is stretched towards its tip to hide the pale free edge,
//! feathered at its border and filled with the polish colour. A Gaussian
//! brightness band along the base-to-tip axis imitates a specular
//! highlight. Blending is source-over in linear light.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::postprocess::{stretch_mask, NailInstance};

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("{name} = {value} outside {range}")]
    Param {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("image buffer of {got} bytes does not match {width}x{height} RGB")]
    Image { got: usize, width: usize, height: usize },
}

/// Width of the highlight band, as a fraction of the nail length.
pub const GLOSS_SIGMA: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderParams {
    /// sRGB polish colour.
    pub color: [u8; 3],
    pub opacity: f64,
    pub gradient_strength: f64,
    /// Centre of the highlight, 0 at the base and 1 at the tip.
    pub gloss_band_position: f64,
    pub stretch_px: usize,
    pub edge_feather_px: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            color: [196, 24, 64],
            opacity: 0.85,
            gradient_strength: 0.35,
            gloss_band_position: 0.35,
            stretch_px: 4,
            edge_feather_px: 1.5,
        }
    }
}

impl RenderParams {
    /// Defaults with the stretch scaled from its 288 px reference.
    pub fn for_size(width: usize, height: usize) -> Self {
        let s = width.min(height) as f64 / 288.0;
        RenderParams {
            stretch_px: (4.0 * s).round().max(1.0) as usize,
            ..RenderParams::default()
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let unit = |name, value: f64| {
            if (0.0..=1.0).contains(&value) {
                Ok(())
            } else {
                Err(RenderError::Param {
                    name,
                    value,
                    range: "[0, 1]",
                })
            }
        };
        unit("opacity", self.opacity)?;
        unit("gradient_strength", self.gradient_strength)?;
        unit("gloss_band_position", self.gloss_band_position)?;
        if !(self.edge_feather_px >= 0.0 && self.edge_feather_px.is_finite()) {
            return Err(RenderError::Param {
                name: "edge_feather_px",
                value: self.edge_feather_px,
                range: "[0, inf)",
            });
        }
        Ok(())
    }
}

pub fn srgb_to_linear(v: u8) -> f64 {
    let c = v as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

pub fn linear_to_srgb(v: f64) -> u8 {
    let v = v.clamp(0.0, 1.0);
    let c = if v <= 0.003_130_8 {
        v * 12.92
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    };
    (c * 255.0).round() as u8
}

/// Projection extremes of a mask along its orientation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TipFrame {
    orientation: (f64, f64),
    base: f64,
    tip: f64,
    degenerate: bool,
}

impl TipFrame {
    pub fn new(inst: &NailInstance) -> Self {
        let (ox, oy) = inst.orientation;
        let (mut base, mut tip) = (f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in inst.pixels() {
            let s = x as f64 * ox + y as f64 * oy;
            base = base.min(s);
            tip = tip.max(s);
        }
        TipFrame {
            orientation: inst.orientation,
            base,
            tip,
            degenerate: inst.degenerate,
        }
    }

    /// 0 at the base extreme, 1 at the tip extreme; 0.5 when the instance is
    /// degenerate or has no extent along its orientation.
    pub fn at(&self, x: u32, y: u32) -> f64 {
        let span = self.tip - self.base;
        if self.degenerate || span <= 1e-12 {
            return 0.5;
        }
        let s = x as f64 * self.orientation.0 + y as f64 * self.orientation.1;
        ((s - self.base) / span).clamp(0.0, 1.0)
    }
}

pub fn tip_coordinate(x: u32, y: u32, inst: &NailInstance) -> f64 {
    TipFrame::new(inst).at(x, y)
}

/// Euclidean distance from every mask pixel to the nearest pixel outside the
/// mask (out-of-frame counts as outside), within the mask's bounding box
/// grown by `reach`. Pixels farther than `reach` get `reach`.
fn inside_distance(inst: &NailInstance, width: usize, height: usize, reach: f64) -> Vec<((u32, u32), f64)> {
    let r = reach.ceil() as i64;
    let pixels = inst.pixels();
    pixels
        .iter()
        .map(|&(x, y)| {
            let mut best = reach * reach;
            for dy in -r..=r {
                for dx in -r..=r {
                    let d2 = (dx * dx + dy * dy) as f64;
                    if d2 >= best {
                        continue;
                    }
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    let outside = nx < 0
                        || ny < 0
                        || nx >= width as i64
                        || ny >= height as i64
                        || !inst.contains(nx as u32, ny as u32);
                    if outside {
                        best = d2;
                    }
                }
            }
            ((x, y), best.sqrt())
        })
        .collect()
}

/// Composite and overlay, both `width x height`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub width: usize,
    pub height: usize,
    /// Interleaved sRGB.
    pub composited: Vec<u8>,
    /// Interleaved straight-alpha sRGBA; alpha is 0 off the polish.
    pub overlay: Vec<u8>,
}

/// Paints every instance over `image` (interleaved sRGB, `width x height`).
pub fn render_overlay(
    image: &[u8],
    width: usize,
    height: usize,
    instances: &[NailInstance],
    params: &RenderParams,
) -> Result<Rendered, RenderError> {
    params.validate()?;
    if image.len() != width * height * 3 {
        return Err(RenderError::Image {
            got: image.len(),
            width,
            height,
        });
    }
    let mut composited = image.to_vec();
    // premultiplied linear RGBA of the polish layer
    let mut layer = vec![[0f64; 4]; width * height];
    let base_lin = params.color.map(srgb_to_linear);

    for inst in instances {
        let stretched = stretch_mask(inst, params.stretch_px, width, height);
        let frame = TipFrame::new(&stretched);
        let feather = params.edge_feather_px;
        let coverage: Vec<((u32, u32), f64)> = if feather > 0.0 {
            inside_distance(&stretched, width, height, feather.max(1.0))
                .into_iter()
                .map(|(p, d)| (p, (d / feather).min(1.0)))
                .collect()
        } else {
            stretched.pixels().into_iter().map(|p| (p, 1.0)).collect()
        };
        for ((x, y), cover) in coverage {
            let alpha = params.opacity * cover;
            if alpha <= 0.0 {
                continue;
            }
            let t = frame.at(x, y);
            let band = 1.0
                + params.gradient_strength
                    * (-(t - params.gloss_band_position).powi(2) / (2.0 * GLOSS_SIGMA * GLOSS_SIGMA)).exp();
            let src = base_lin.map(|c| (c * band).min(1.0));
            let p = y as usize * width + x as usize;
            for c in 0..3 {
                let dst = srgb_to_linear(composited[3 * p + c]);
                composited[3 * p + c] = linear_to_srgb(src[c] * alpha + dst * (1.0 - alpha));
            }
            let l = &mut layer[p];
            for c in 0..3 {
                l[c] = src[c] * alpha + l[c] * (1.0 - alpha);
            }
            l[3] = alpha + l[3] * (1.0 - alpha);
        }
    }

    let mut overlay = vec![0u8; width * height * 4];
    for (p, l) in layer.iter().enumerate() {
        if l[3] > 0.0 {
            for c in 0..3 {
                overlay[4 * p + c] = linear_to_srgb(l[c] / l[3]);
            }
            overlay[4 * p + 3] = (l[3] * 255.0).round() as u8;
        }
    }
    Ok(Rendered {
        width,
        height,
        composited,
        overlay,
    })
}
