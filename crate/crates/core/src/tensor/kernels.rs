//! Forward and backward kernels on raw NCHW buffers.
//!
//! Convolutions dispatch to three paths: pointwise (a single GEMM per
//! sample), depthwise (direct loops), and everything else (im2col + GEMM
//! per group). Work is split over batch samples; per-sample partial weight
//! gradients are reduced in sample order so results never depend on the
//! thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Element, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    /// Symmetric zero padding of `(k - 1) * dilation / 2` per side.
    Same,
    Explicit(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: 1,
            dilation: 1,
            groups: 1,
            padding: Padding::Same,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        ConvSpec::new(channels, channels, kernel).groups(channels)
    }

    pub fn pad(&self) -> (usize, usize) {
        match self.padding {
            Padding::Same => (
                (self.kernel.0 - 1) * self.dilation / 2,
                (self.kernel.1 - 1) * self.dilation / 2,
            ),
            Padding::Explicit(p) => (p, p),
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels && self.groups == self.out_channels
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == 1 && self.groups == 1 && self.pad() == (0, 0)
    }

    pub fn validate(&self) -> Result<()> {
        let op = "ConvSpec";
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(TensorError::invalid(op, "channel counts and groups must be positive"));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 || self.dilation == 0 {
            return Err(TensorError::invalid(op, "kernel, stride and dilation must be positive"));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(TensorError::invalid(
                op,
                format!(
                    "channels ({} in, {} out) not divisible by groups {}",
                    self.in_channels, self.out_channels, self.groups
                ),
            ));
        }
        Ok(())
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ph, pw) = self.pad();
        let eh = (self.kernel.0 - 1) * self.dilation + 1;
        let ew = (self.kernel.1 - 1) * self.dilation + 1;
        if h + 2 * ph < eh {
            return Err(TensorError::shape(
                "conv2d",
                format!("height {h} (padded {}) smaller than receptive field {eh}", h + 2 * ph),
            ));
        }
        if w + 2 * pw < ew {
            return Err(TensorError::shape(
                "conv2d",
                format!("width {w} (padded {}) smaller than receptive field {ew}", w + 2 * pw),
            ));
        }
        Ok((
            (h + 2 * ph - eh) / self.stride + 1,
            (w + 2 * pw - ew) / self.stride + 1,
        ))
    }
}

/// Geometry shared by the convolution kernels.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn new(input_shape: &[usize], weight_shape: &[usize], spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let (n, c, h, w) = match input_shape {
            &[n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(TensorError::shape(
                    "conv2d",
                    format!("input must be NCHW, got {input_shape:?}"),
                ))
            }
        };
        if c != spec.in_channels {
            return Err(TensorError::shape(
                "conv2d",
                format!("input channels: tensor has {c}, spec expects {}", spec.in_channels),
            ));
        }
        if weight_shape != spec.weight_shape() {
            return Err(TensorError::shape(
                "conv2d",
                format!(
                    "weight shape {weight_shape:?} does not match spec {:?}",
                    spec.weight_shape()
                ),
            ));
        }
        let (oh, ow) = spec.output_hw(h, w)?;
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            oh,
            ow,
            spec,
        })
    }

    fn in_plane(&self) -> usize {
        self.c * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.spec.out_channels * self.oh * self.ow
    }

    fn col_rows(&self) -> usize {
        (self.c / self.spec.groups) * self.spec.kernel.0 * self.spec.kernel.1
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.spec.out_channels, self.oh, self.ow]
    }
}

/// Range of output positions `o` for which `o * stride + offset` lands in
/// `[0, extent)`.
#[inline]
fn valid_range(out: usize, stride: usize, offset: isize, extent: usize) -> (usize, usize) {
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let hi_num = extent as isize - offset;
    let hi = if hi_num <= 0 {
        0
    } else {
        (((hi_num as usize) - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// Unfolds one group of one sample into `[cg * kh * kw, oh * ow]`.
fn im2col<T: Element>(x: &[T], g: &ConvGeom, group: usize, col: &mut [T]) {
    let s = &g.spec;
    let cg = g.c / s.groups;
    let (ph, pw) = s.pad();
    let (kh, kw) = s.kernel;
    let ohw = g.oh * g.ow;
    col.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..cg {
        let plane = &x[(group * cg + ci) * g.h * g.w..][..g.h * g.w];
        for ky in 0..kh {
            let oy_off = (ky * s.dilation) as isize - ph as isize;
            let (oy0, oy1) = valid_range(g.oh, s.stride, oy_off, g.h);
            for kx in 0..kw {
                let ox_off = (kx * s.dilation) as isize - pw as isize;
                let (ox0, ox1) = valid_range(g.ow, s.stride, ox_off, g.w);
                if ox0 == ox1 {
                    continue;
                }
                let row = &mut col[((ci * kh + ky) * kw + kx) * ohw..][..ohw];
                for oy in oy0..oy1 {
                    let iy = (oy * s.stride) as isize + oy_off;
                    let src = &plane[iy as usize * g.w..][..g.w];
                    let dst = &mut row[oy * g.ow..][..g.ow];
                    if s.stride == 1 {
                        let start = (ox0 as isize + ox_off) as usize;
                        dst[ox0..ox1].copy_from_slice(&src[start..start + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            dst[ox] = src[((ox * s.stride) as isize + ox_off) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Inverse of [`im2col`]: accumulates columns back into one sample's input gradient.
fn col2im<T: Element>(col: &[T], g: &ConvGeom, group: usize, dx: &mut [T]) {
    let s = &g.spec;
    let cg = g.c / s.groups;
    let (ph, pw) = s.pad();
    let (kh, kw) = s.kernel;
    let ohw = g.oh * g.ow;
    for ci in 0..cg {
        let plane = &mut dx[(group * cg + ci) * g.h * g.w..][..g.h * g.w];
        for ky in 0..kh {
            let oy_off = (ky * s.dilation) as isize - ph as isize;
            let (oy0, oy1) = valid_range(g.oh, s.stride, oy_off, g.h);
            for kx in 0..kw {
                let ox_off = (kx * s.dilation) as isize - pw as isize;
                let (ox0, ox1) = valid_range(g.ow, s.stride, ox_off, g.w);
                let row = &col[((ci * kh + ky) * kw + kx) * ohw..][..ohw];
                for oy in oy0..oy1 {
                    let iy = (oy * s.stride) as isize + oy_off;
                    let dst = &mut plane[iy as usize * g.w..][..g.w];
                    let src = &row[oy * g.ow..][..g.ow];
                    for ox in ox0..ox1 {
                        let ix = ((ox * s.stride) as isize + ox_off) as usize;
                        dst[ix] = dst[ix] + src[ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Element>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.out_plane()];
    let ohw = g.oh * g.ow;
    out.par_chunks_mut(g.out_plane())
        .zip(x.par_chunks(g.in_plane()))
        .for_each(|(y, xs)| {
            if let Some(b) = bias {
                for (co, plane) in y.chunks_mut(ohw).enumerate() {
                    plane.iter_mut().for_each(|v| *v = b[co]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            if g.spec.is_pointwise() {
                T::gemm(
                    g.spec.out_channels,
                    g.c,
                    ohw,
                    T::one(),
                    weight,
                    g.c as isize,
                    1,
                    xs,
                    ohw as isize,
                    1,
                    beta,
                    y,
                    ohw as isize,
                    1,
                );
            } else if g.spec.is_depthwise() {
                depthwise_forward(xs, weight, g, y);
            } else {
                let rows = g.col_rows();
                let cog = g.spec.out_channels / g.spec.groups;
                let mut col = vec![T::zero(); rows * ohw];
                for group in 0..g.spec.groups {
                    im2col(xs, g, group, &mut col);
                    T::gemm(
                        cog,
                        rows,
                        ohw,
                        T::one(),
                        &weight[group * cog * rows..],
                        rows as isize,
                        1,
                        &col,
                        ohw as isize,
                        1,
                        beta,
                        &mut y[group * cog * ohw..],
                        ohw as isize,
                        1,
                    );
                }
            }
        });
    out
}

fn depthwise_forward<T: Element>(x: &[T], weight: &[T], g: &ConvGeom, y: &mut [T]) {
    let s = &g.spec;
    let (ph, pw) = s.pad();
    let (kh, kw) = s.kernel;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..][..g.h * g.w];
        let out = &mut y[c * g.oh * g.ow..][..g.oh * g.ow];
        let wk = &weight[c * kh * kw..][..kh * kw];
        for ky in 0..kh {
            let oy_off = (ky * s.dilation) as isize - ph as isize;
            let (oy0, oy1) = valid_range(g.oh, s.stride, oy_off, g.h);
            for kx in 0..kw {
                let wv = wk[ky * kw + kx];
                let ox_off = (kx * s.dilation) as isize - pw as isize;
                let (ox0, ox1) = valid_range(g.ow, s.stride, ox_off, g.w);
                if ox0 == ox1 {
                    continue;
                }
                for oy in oy0..oy1 {
                    let iy = ((oy * s.stride) as isize + oy_off) as usize;
                    let src = &plane[iy * g.w..][..g.w];
                    let dst = &mut out[oy * g.ow..][..g.ow];
                    if s.stride == 1 {
                        let start = (ox0 as isize + ox_off) as usize;
                        for (d, &v) in dst[ox0..ox1].iter_mut().zip(&src[start..]) {
                            *d = *d + wv * v;
                        }
                    } else {
                        for ox in ox0..ox1 {
                            let ix = ((ox * s.stride) as isize + ox_off) as usize;
                            dst[ox] = dst[ox] + wv * src[ix];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution. Each output is computed only when requested.
pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let ohw = g.oh * g.ow;
    let wlen = weight.len();

    let bias = need_bias.then(|| {
        let mut db = vec![T::zero(); g.spec.out_channels];
        for sample in dy.chunks(g.out_plane()) {
            for (co, plane) in sample.chunks(ohw).enumerate() {
                db[co] = db[co] + plane.iter().copied().sum::<T>();
            }
        }
        db
    });

    // Per-sample (dx, dw) pairs, reduced in sample order below.
    let per_sample: Vec<(Vec<T>, Vec<T>)> = x
        .par_chunks(g.in_plane())
        .zip(dy.par_chunks(g.out_plane()))
        .map(|(xs, dys)| {
            let mut dx = if need_input {
                vec![T::zero(); g.in_plane()]
            } else {
                Vec::new()
            };
            let mut dw = if need_weight {
                vec![T::zero(); wlen]
            } else {
                Vec::new()
            };
            if g.spec.is_pointwise() {
                if need_weight {
                    // dW[co, ci] = sum_p dy[co, p] * x[ci, p]
                    T::gemm(
                        g.spec.out_channels,
                        ohw,
                        g.c,
                        T::one(),
                        dys,
                        ohw as isize,
                        1,
                        xs,
                        1,
                        ohw as isize,
                        T::zero(),
                        &mut dw,
                        g.c as isize,
                        1,
                    );
                }
                if need_input {
                    // dx[ci, p] = sum_co W[co, ci] * dy[co, p]
                    T::gemm(
                        g.c,
                        g.spec.out_channels,
                        ohw,
                        T::one(),
                        weight,
                        1,
                        g.c as isize,
                        dys,
                        ohw as isize,
                        1,
                        T::zero(),
                        &mut dx,
                        ohw as isize,
                        1,
                    );
                }
            } else if g.spec.is_depthwise() {
                depthwise_backward(xs, weight, dys, g, need_input.then_some(&mut dx[..]), need_weight.then_some(&mut dw[..]));
            } else {
                let rows = g.col_rows();
                let cog = g.spec.out_channels / g.spec.groups;
                let mut col = vec![T::zero(); rows * ohw];
                for group in 0..g.spec.groups {
                    let dyg = &dys[group * cog * ohw..][..cog * ohw];
                    if need_weight {
                        im2col(xs, g, group, &mut col);
                        T::gemm(
                            cog,
                            ohw,
                            rows,
                            T::one(),
                            dyg,
                            ohw as isize,
                            1,
                            &col,
                            1,
                            ohw as isize,
                            T::zero(),
                            &mut dw[group * cog * rows..],
                            rows as isize,
                            1,
                        );
                    }
                    if need_input {
                        T::gemm(
                            rows,
                            cog,
                            ohw,
                            T::one(),
                            &weight[group * cog * rows..],
                            1,
                            rows as isize,
                            dyg,
                            ohw as isize,
                            1,
                            T::zero(),
                            &mut col,
                            ohw as isize,
                            1,
                        );
                        col2im(&col, g, group, &mut dx);
                    }
                }
            }
            (dx, dw)
        })
        .collect();

    let mut input = need_input.then(|| Vec::with_capacity(x.len()));
    let mut wgrad = need_weight.then(|| vec![T::zero(); wlen]);
    for (dx, dw) in per_sample {
        if let Some(buf) = input.as_mut() {
            buf.extend_from_slice(&dx);
        }
        if let Some(acc) = wgrad.as_mut() {
            acc.iter_mut().zip(&dw).for_each(|(a, &b)| *a = *a + b);
        }
    }
    ConvGrads {
        input,
        weight: wgrad,
        bias,
    }
}

fn depthwise_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: &ConvGeom,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    let s = &g.spec;
    let (ph, pw) = s.pad();
    let (kh, kw) = s.kernel;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..][..g.h * g.w];
        let grad_out = &dy[c * g.oh * g.ow..][..g.oh * g.ow];
        for ky in 0..kh {
            let oy_off = (ky * s.dilation) as isize - ph as isize;
            let (oy0, oy1) = valid_range(g.oh, s.stride, oy_off, g.h);
            for kx in 0..kw {
                let widx = c * kh * kw + ky * kw + kx;
                let wv = weight[widx];
                let ox_off = (kx * s.dilation) as isize - pw as isize;
                let (ox0, ox1) = valid_range(g.ow, s.stride, ox_off, g.w);
                let mut wacc = T::zero();
                for oy in oy0..oy1 {
                    let iy = ((oy * s.stride) as isize + oy_off) as usize;
                    let go = &grad_out[oy * g.ow..][..g.ow];
                    for ox in ox0..ox1 {
                        let ix = ((ox * s.stride) as isize + ox_off) as usize;
                        let gv = go[ox];
                        wacc = wacc + gv * plane[iy * g.w + ix];
                        if let Some(dx) = dx.as_deref_mut() {
                            let i = c * g.h * g.w + iy * g.w + ix;
                            dx[i] = dx[i] + wv * gv;
                        }
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    dw[widx] = dw[widx] + wacc;
                }
            }
        }
    }
}

/// Per-axis sampling table for align-corners=false bilinear resizing by an
/// integer factor: `(lo, hi, weight_of_hi)` for every output index.
fn bilinear_taps(input: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..input * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Element>(x: &[T], shape: &[usize], factor: usize) -> Vec<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if factor == 1 {
        return x.to_vec();
    }
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx: Vec<(usize, usize, T)> = bilinear_taps(w, factor)
        .into_iter()
        .map(|(a, b, l)| (a, b, T::from_f64_lossy(l)))
        .collect();
    let mut out = vec![T::zero(); n * c * oh * ow];
    out.par_chunks_mut(oh * ow)
        .zip(x.par_chunks(h * w))
        .for_each(|(dst, src)| {
            let mut row_lo = vec![T::zero(); ow];
            let mut row_hi = vec![T::zero(); ow];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::from_f64_lossy(ly);
                for (buf, y) in [(&mut row_lo, y0), (&mut row_hi, y1)] {
                    let r = &src[y * w..][..w];
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        buf[ox] = r[x0] + (r[x1] - r[x0]) * lx;
                    }
                }
                let d = &mut dst[oy * ow..][..ow];
                for ox in 0..ow {
                    d[ox] = row_lo[ox] + (row_hi[ox] - row_lo[ox]) * ly;
                }
            }
        });
    out
}

pub(crate) fn upsample_backward<T: Element>(dy: &[T], in_shape: &[usize], factor: usize) -> Vec<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    if factor == 1 {
        return dy.to_vec();
    }
    let (oh, ow) = (h * factor, w * factor);
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let mut dx = vec![T::zero(); n * c * h * w];
    dx.par_chunks_mut(h * w)
        .zip(dy.par_chunks(oh * ow))
        .for_each(|(dst, src)| {
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::from_f64_lossy(ly);
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::from_f64_lossy(lx);
                    let gv = src[oy * ow + ox];
                    let top = gv * (T::one() - ly);
                    let bot = gv * ly;
                    dst[y0 * w + x0] = dst[y0 * w + x0] + top * (T::one() - lx);
                    dst[y0 * w + x1] = dst[y0 * w + x1] + top * lx;
                    dst[y1 * w + x0] = dst[y1 * w + x0] + bot * (T::one() - lx);
                    dst[y1 * w + x1] = dst[y1 * w + x1] + bot * lx;
                }
            }
        });
    dx
}

/// 2x2 mean pooling with stride 2. For even input sizes this is exactly
/// align-corners=false bilinear downsampling by 2.
pub(crate) fn avg_pool2_forward<T: Element>(x: &[T], shape: &[usize]) -> Vec<T> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (dst, src) in out.chunks_mut(oh * ow).zip(x.chunks(h * w)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let i = 2 * oy * w + 2 * ox;
                dst[oy * ow + ox] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    out
}

pub(crate) fn avg_pool2_backward<T: Element>(dy: &[T], in_shape: &[usize]) -> Vec<T> {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64_lossy(0.25);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (dst, src) in dx.chunks_mut(h * w).zip(dy.chunks(oh * ow)) {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = src[oy * ow + ox] * quarter;
                let i = 2 * oy * w + 2 * ox;
                dst[i] = g;
                dst[i + 1] = g;
                dst[i + w] = g;
                dst[i + w + 1] = g;
            }
        }
    }
    dx
}

/// `(outer, axis_len, inner)` decomposition of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward<T: Element>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let max = (0..len)
                .map(|k| x[base + k * inner])
                .fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for k in 0..len {
                let e = (x[base + k * inner] - max).exp();
                out[base + k * inner] = e;
                sum = sum + e;
            }
            for k in 0..len {
                out[base + k * inner] = out[base + k * inner] / sum;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward<T: Element>(y: &[T], dy: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dot: T = (0..len)
                .map(|k| y[base + k * inner] * dy[base + k * inner])
                .sum();
            for k in 0..len {
                let j = base + k * inner;
                dx[j] = y[j] * (dy[j] - dot);
            }
        }
    }
    dx
}

/// Saved statistics of a group-norm forward pass.
#[derive(Debug, Clone)]
pub(crate) struct GroupNormCache<T> {
    pub xhat: Vec<T>,
    /// One entry per `(sample, group)`.
    pub inv_std: Vec<T>,
}

/// Normalizes each `(sample, group)` slab of an NCHW tensor to zero mean and
/// unit variance, then applies per-channel `gamma` and `beta`.
pub(crate) fn group_norm_forward<T: Element>(
    x: &[T],
    shape: &[usize],
    groups: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, GroupNormCache<T>) {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let slab = c / groups * hw;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); n * groups];
    y.par_chunks_mut(slab)
        .zip(xhat.par_chunks_mut(slab))
        .zip(inv_std.par_iter_mut())
        .zip(x.par_chunks(slab))
        .enumerate()
        .for_each(|(i, (((yo, xo), is), xi))| {
            let count = T::from_usize(slab).expect("count fits");
            let mean = xi.iter().copied().sum::<T>() / count;
            let var = xi.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv = T::one() / (var + eps).sqrt();
            *is = inv;
            let c0 = (i % groups) * (c / groups);
            for (k, ((yv, xv), &v)) in yo.iter_mut().zip(xo.iter_mut()).zip(xi).enumerate() {
                let ch = c0 + k / hw;
                *xv = (v - mean) * inv;
                *yv = *xv * gamma[ch] + beta[ch];
            }
        });
    (y, GroupNormCache { xhat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn group_norm_backward<T: Element>(
    dy: &[T],
    shape: &[usize],
    groups: usize,
    gamma: &[T],
    cache: &GroupNormCache<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let cpg = c / groups;
    let slab = cpg * hw;
    let mut dx = vec![T::zero(); dy.len()];
    dx.par_chunks_mut(slab)
        .zip(dy.par_chunks(slab))
        .zip(cache.xhat.par_chunks(slab))
        .enumerate()
        .for_each(|(i, ((dxo, dyi), xh))| {
            let c0 = (i % groups) * cpg;
            let count = T::from_usize(slab).expect("count fits");
            let mut mean_g = T::zero();
            let mut mean_gx = T::zero();
            for k in 0..slab {
                let g = dyi[k] * gamma[c0 + k / hw];
                mean_g = mean_g + g;
                mean_gx = mean_gx + g * xh[k];
            }
            mean_g = mean_g / count;
            mean_gx = mean_gx / count;
            let inv = cache.inv_std[i];
            for k in 0..slab {
                let g = dyi[k] * gamma[c0 + k / hw];
                dxo[k] = inv * (g - mean_g - xh[k] * mean_gx);
            }
        });
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for k in base..base + hw {
                dgamma[ch] = dgamma[ch] + dy[k] * cache.xhat[k];
                dbeta[ch] = dbeta[ch] + dy[k];
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_preserves_size_at_stride_one() {
        let spec = ConvSpec::new(4, 4, 3).dilation(2);
        assert_eq!(spec.pad(), (2, 2));
        assert_eq!(spec.output_hw(9, 7).unwrap(), (9, 7));
    }

    #[test]
    fn stride_two_halves_even_sizes() {
        let spec = ConvSpec::new(3, 8, 3).stride(2);
        assert_eq!(spec.output_hw(96, 64).unwrap(), (48, 32));
    }

    #[test]
    fn receptive_field_larger_than_input_is_rejected() {
        let spec = ConvSpec::new(1, 1, 5).padding(Padding::Explicit(0));
        let err = spec.output_hw(3, 8).unwrap_err();
        assert!(err.to_string().contains("height"));
    }

    #[test]
    fn groups_must_divide_channels() {
        assert!(ConvSpec::new(6, 4, 3).groups(4).validate().is_err());
    }

    #[test]
    fn valid_range_matches_brute_force() {
        for out in 1..8 {
            for stride in 1..4 {
                for offset in -4isize..4 {
                    for extent in 1..10 {
                        let expect: Vec<usize> = (0..out)
                            .filter(|&o| {
                                let i = (o * stride) as isize + offset;
                                i >= 0 && (i as usize) < extent
                            })
                            .collect();
                        let (lo, hi) = valid_range(out, stride, offset, extent);
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, expect, "out={out} stride={stride} offset={offset} extent={extent}");
                    }
                }
            }
        }
    }

    #[test]
    fn bilinear_taps_clamp_at_borders() {
        let taps = bilinear_taps(2, 2);
        assert_eq!(taps[0], (0, 1, 0.0));
        assert_eq!(taps[1], (0, 1, 0.25));
        assert_eq!(taps[2], (0, 1, 0.75));
        assert_eq!(taps[3], (1, 1, 0.25));
    }
}
