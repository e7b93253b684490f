//! Single images in, nail instances out: PNG codecs and segmentation at
//! arbitrary frame sizes.

use std::io::Cursor;

use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{images_to_tensor, Model, ModelError};
use crate::postprocess::{extract_instances, DensePrediction, NailInstance, PostprocessError, PostprocessParams};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("cannot encode png: {0}")]
    Encode(String),
    #[error("image is empty")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Postprocess(#[from] PostprocessError),
}

/// Interleaved 8-bit RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// Decodes any PNG, dropping alpha.
pub fn decode_png(bytes: &[u8]) -> Result<RgbImage, PipelineError> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| PipelineError::Decode(e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(PipelineError::Empty);
    }
    Ok(RgbImage {
        width: w as usize,
        height: h as usize,
        data: img.into_raw(),
    })
}

/// PNG bytes for an 8-bit buffer of 1 (gray), 3 (RGB) or 4 (RGBA) channels.
/// Encoding is deterministic: the same pixels always give the same bytes.
pub fn encode_png(data: &[u8], width: usize, height: usize, channels: usize) -> Result<Vec<u8>, PipelineError> {
    let color = match channels {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        4 => ExtendedColorType::Rgba8,
        c => return Err(PipelineError::Encode(format!("{c} channels"))),
    };
    if data.len() != width * height * channels {
        return Err(PipelineError::Encode(format!(
            "{} bytes for {width}x{height}x{channels}",
            data.len()
        )));
    }
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(Cursor::new(&mut buf))
        .write_image(data, width as u32, height as u32, color)
        .map_err(|e| PipelineError::Encode(e.to_string()))?;
    Ok(buf)
}

/// Foreground statistics of the direction field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldSummary {
    pub fg_pixels: usize,
    /// Mean vector length over foreground pixels.
    pub mean_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub prediction: DensePrediction,
    pub instances: Vec<NailInstance>,
    pub params: PostprocessParams,
}

impl Segmentation {
    /// Gated foreground as a 0/255 grayscale PNG.
    pub fn fgbg_png(&self) -> Result<Vec<u8>, PipelineError> {
        let p = &self.prediction;
        let mask: Vec<u8> = p
            .fg_mask(self.params.fg_threshold)
            .into_iter()
            .map(|m| if m { 255 } else { 0 })
            .collect();
        encode_png(&mask, p.width, p.height, 1)
    }

    /// Per-pixel class label (0 off the foreground) as a grayscale PNG.
    pub fn classes_png(&self) -> Result<Vec<u8>, PipelineError> {
        let p = &self.prediction;
        let gate = p.fg_mask(self.params.fg_threshold);
        let labels: Vec<u8> = gate.iter().zip(&p.class).map(|(&g, &c)| if g { c } else { 0 }).collect();
        encode_png(&labels, p.width, p.height, 1)
    }

    pub fn field_summary(&self) -> FieldSummary {
        let p = &self.prediction;
        let gate = p.fg_mask(self.params.fg_threshold);
        let (mut n, mut sum) = (0usize, 0f64);
        for (i, _) in gate.iter().enumerate().filter(|(_, &g)| g) {
            n += 1;
            sum += (p.field[2 * i] as f64).hypot(p.field[2 * i + 1] as f64);
        }
        FieldSummary {
            fg_pixels: n,
            mean_norm: if n == 0 { 0.0 } else { sum / n as f64 },
        }
    }
}

/// Edge-replicates `image` up to the next multiple of 16 on each side.
fn pad16(image: &RgbImage) -> (Vec<u8>, usize, usize) {
    let ph = image.height.div_ceil(16) * 16;
    let pw = image.width.div_ceil(16) * 16;
    if (ph, pw) == (image.height, image.width) {
        return (image.data.clone(), ph, pw);
    }
    let mut out = Vec::with_capacity(ph * pw * 3);
    for y in 0..ph {
        let sy = y.min(image.height - 1);
        for x in 0..pw {
            let sx = x.min(image.width - 1);
            let s = (sy * image.width + sx) * 3;
            out.extend_from_slice(&image.data[s..s + 3]);
        }
    }
    (out, ph, pw)
}

fn crop_prediction(p: DensePrediction, w: usize, h: usize) -> DensePrediction {
    if (p.width, p.height) == (w, h) {
        return p;
    }
    let mut out = DensePrediction {
        width: w,
        height: h,
        fg_score: Vec::with_capacity(w * h),
        class: Vec::with_capacity(w * h),
        field: Vec::with_capacity(2 * w * h),
    };
    for y in 0..h {
        let row = y * p.width;
        out.fg_score.extend_from_slice(&p.fg_score[row..row + w]);
        out.class.extend_from_slice(&p.class[row..row + w]);
        out.field.extend_from_slice(&p.field[2 * row..2 * (row + w)]);
    }
    out
}

/// Runs the model on one frame of any size and extracts instances.
/// `params` defaults to [`PostprocessParams::for_size`] of the frame.
pub fn segment(
    model: &Model,
    image: &RgbImage,
    params: Option<PostprocessParams>,
) -> Result<Segmentation, PipelineError> {
    if image.width == 0 || image.height == 0 {
        return Err(PipelineError::Empty);
    }
    let (data, ph, pw) = pad16(image);
    let resized;
    let model = if model.config().input_size == (ph, pw) {
        model
    } else {
        resized = model.with_input_size(ph, pw)?;
        &resized
    };
    let out = model.forward(&images_to_tensor(&[&data], ph, pw))?;
    let prediction = crop_prediction(DensePrediction::from_output(&out, 0)?, image.width, image.height);
    let params = params.unwrap_or_else(|| PostprocessParams::for_size(image.width, image.height));
    let instances = extract_instances(&prediction, &params);
    Ok(Segmentation {
        prediction,
        instances,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let img = RgbImage {
            width: 3,
            height: 2,
            data: (0..18).map(|v| v * 13).collect(),
        };
        let bytes = encode_png(&img.data, 3, 2, 3).unwrap();
        assert_eq!(decode_png(&bytes).unwrap(), img);
        assert_eq!(encode_png(&img.data, 3, 2, 3).unwrap(), bytes);
    }

    #[test]
    fn garbage_does_not_decode() {
        assert!(matches!(decode_png(b"not a png"), Err(PipelineError::Decode(_))));
    }

    #[test]
    fn padding_replicates_edges() {
        let img = RgbImage {
            width: 17,
            height: 1,
            data: (0..51).map(|v| v as u8).collect(),
        };
        let (data, h, w) = pad16(&img);
        assert_eq!((h, w), (16, 32));
        assert_eq!(&data[3 * 31..3 * 32], &img.data[48..51]);
        assert_eq!(&data[3 * 32..3 * 33], &img.data[0..3]);
    }
}
