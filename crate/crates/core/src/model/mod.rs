//! Cascaded two-branch encoder-decoder with three dense heads.
//!
//! A shallow encoder sees the full-resolution image, a deep encoder sees
//! the image downsampled 2x. Two fusion blocks merge them on the way back
//! up; every fusion block also emits an auxiliary prediction, so the model
//! returns a pyramid of outputs at H/16, H/8 and full resolution.
//!
//! Both encoders are built from inverted-residual bottlenecks grouped into
//! stages (see `STAGES` and the README for the table). The deep encoder
//! runs its last stride-2 group at stride 1 with dilation 2 in the last two
//! stages, which holds its output stride at 16 instead of 32.

mod config;
mod params;

pub use config::{ConfigError, EncoderVariant, ModelConfig, Normalization};
pub use params::{ParamError, Params};

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::tensor::{ConvSpec, Element, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("input {got:?} does not match configured input [N, 3, {h}, {w}]")]
    InputShape { got: Vec<usize>, h: usize, w: usize },
    #[error("io on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// One bottleneck group: expansion factor, output channels, repeats,
/// stride of the first block.
#[derive(Debug, Clone, Copy)]
struct GroupSpec {
    expand: usize,
    channels: usize,
    repeats: usize,
    stride: usize,
}

/// Stem width before scaling.
const STEM_CHANNELS: usize = 32;

/// Stages 2..=8. Stage 1 is the stride-2 stem convolution.
const STAGES: [GroupSpec; 7] = [
    GroupSpec { expand: 1, channels: 16, repeats: 1, stride: 1 },
    GroupSpec { expand: 6, channels: 24, repeats: 2, stride: 2 },
    GroupSpec { expand: 6, channels: 32, repeats: 3, stride: 2 },
    GroupSpec { expand: 6, channels: 64, repeats: 4, stride: 2 },
    GroupSpec { expand: 6, channels: 96, repeats: 3, stride: 1 },
    GroupSpec { expand: 6, channels: 160, repeats: 3, stride: 2 },
    GroupSpec { expand: 6, channels: 320, repeats: 1, stride: 1 },
];

/// Decoder feature width before scaling.
const DECODER_CHANNELS: usize = 128;

const INPUT_MEAN: f64 = 0.5;
const INPUT_STD: f64 = 0.25;

/// Per-channel affine group normalization.
#[derive(Debug, Clone)]
struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

/// Channels per normalization group.
const NORM_GROUP_WIDTH: usize = 8;

/// A convolution followed by optional group norm and relu6. Normalized
/// convolutions carry no bias; `beta` takes its place.
#[derive(Debug, Clone)]
struct ConvLayer {
    spec: ConvSpec,
    weight: usize,
    bias: Option<usize>,
    norm: Option<Norm>,
    relu6: bool,
}

impl ConvLayer {
    fn apply<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var, TensorError> {
        let mut y = tape.conv2d(x, p[self.weight], self.bias.map(|b| p[b]), self.spec)?;
        if let Some(n) = &self.norm {
            y = tape.group_norm(y, p[n.gamma], p[n.beta], n.groups)?;
        }
        Ok(if self.relu6 { tape.relu6(y) } else { y })
    }
}

#[derive(Debug, Clone)]
struct Bottleneck {
    expand: Option<ConvLayer>,
    depthwise: ConvLayer,
    project: ConvLayer,
    residual: bool,
}

impl Bottleneck {
    fn apply<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        if let Some(e) = &self.expand {
            h = e.apply(tape, p, h)?;
        }
        h = self.depthwise.apply(tape, p, h)?;
        h = self.project.apply(tape, p, h)?;
        if self.residual {
            h = tape.add(x, h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
enum Stage {
    Stem(ConvLayer),
    Group(Vec<Bottleneck>),
}

impl Stage {
    fn apply<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var, TensorError> {
        match self {
            Stage::Stem(c) => c.apply(tape, p, x),
            Stage::Group(blocks) => blocks.iter().try_fold(x, |h, b| b.apply(tape, p, h)),
        }
    }

    fn stride(&self) -> usize {
        match self {
            Stage::Stem(c) => c.spec.stride,
            Stage::Group(blocks) => blocks.iter().map(|b| b.depthwise.spec.stride).product(),
        }
    }

    fn convs(&self) -> Vec<&ConvLayer> {
        match self {
            Stage::Stem(c) => vec![c],
            Stage::Group(blocks) => blocks
                .iter()
                .flat_map(|b| b.expand.iter().chain([&b.depthwise, &b.project]))
                .collect(),
        }
    }
}

/// 1x1 classifiers for the three tasks.
#[derive(Debug, Clone)]
struct OutputBranch {
    fgbg: ConvLayer,
    class: ConvLayer,
    field: ConvLayer,
}

impl OutputBranch {
    fn apply<T: Element>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<HeadVars, TensorError> {
        Ok(HeadVars {
            fgbg: self.fgbg.apply(tape, p, x)?,
            class: self.class.apply(tape, p, x)?,
            field: self.field.apply(tape, p, x)?,
        })
    }
}

/// Decoder fusion: `relu6(dilated_conv(up2(F1)) + project(F2))`, plus an
/// auxiliary output read from `up2(F1)`.
#[derive(Debug, Clone)]
struct Fusion {
    deep_conv: ConvLayer,
    shallow_proj: Option<ConvLayer>,
    aux: OutputBranch,
}

impl Fusion {
    /// `target` is the output size: twice the deep size, or one less when
    /// the input side was an odd multiple of 16 and the deep map carries a
    /// padded extra cell.
    fn apply<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        deep: Var,
        shallow: Option<Var>,
        target: (usize, usize),
    ) -> Result<(Var, HeadVars), ModelError> {
        let (_, _, dh, dw) = tape.value(deep).dims4()?;
        let fits = |t: usize, d: usize| t == 2 * d || t + 1 == 2 * d;
        if !fits(target.0, dh) || !fits(target.1, dw) {
            return Err(TensorError::shape(
                "fuse",
                format!("deep features at {dh}x{dw} cannot be upsampled to {}x{}", target.0, target.1),
            )
            .into());
        }
        let up = tape.upsample(deep, 2)?;
        let up = tape.crop(up, target.0, target.1)?;
        let aux = self.aux.apply(tape, p, up)?;
        let mut sum = self.deep_conv.apply(tape, p, up)?;
        match (shallow, &self.shallow_proj) {
            (Some(f2), Some(proj)) => {
                let projected = proj.apply(tape, p, f2)?;
                if tape.value(projected).shape() != tape.value(sum).shape() {
                    return Err(TensorError::shape(
                        "fuse",
                        format!(
                            "upsampled deep features {:?} vs projected shallow features {:?}",
                            tape.value(sum).shape(),
                            tape.value(projected).shape()
                        ),
                    )
                    .into());
                }
                sum = tape.add(sum, projected)?;
            }
            (None, None) => {}
            _ => {
                return Err(TensorError::invalid("fuse", "shallow input and projection must come together").into())
            }
        }
        Ok((tape.relu6(sum), aux))
    }
}

/// Tape handles of one set of heads.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub fgbg: Var,
    pub class: Var,
    pub field: Var,
}

/// Tape handles of a full forward pass. `aux` is ordered from coarsest to
/// finest; each entry carries the downsampling factor relative to the input.
#[derive(Debug, Clone)]
pub struct OutputVars {
    pub full: HeadVars,
    pub aux: Vec<(usize, HeadVars)>,
}

/// Concrete tensors of one set of heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Heads<T: Element = f32> {
    pub fgbg_logits: Tensor<T>,
    pub class_logits: Tensor<T>,
    pub field: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuxOutput<T: Element = f32> {
    /// Input size divided by this output's size.
    pub scale: usize,
    pub heads: Heads<T>,
}

/// Multi-scale prediction bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct SegOutput<T: Element = f32> {
    pub fgbg_logits: Tensor<T>,
    pub class_logits: Tensor<T>,
    pub field: Tensor<T>,
    pub aux: Vec<AuxOutput<T>>,
}

impl<T: Element> SegOutput<T> {
    pub fn from_tape(tape: &Tape<T>, vars: &OutputVars) -> Self {
        let heads = |h: &HeadVars| Heads {
            fgbg_logits: tape.value(h.fgbg).clone(),
            class_logits: tape.value(h.class).clone(),
            field: tape.value(h.field).clone(),
        };
        SegOutput {
            fgbg_logits: tape.value(vars.full.fgbg).clone(),
            class_logits: tape.value(vars.full.class).clone(),
            field: tape.value(vars.full.field).clone(),
            aux: vars
                .aux
                .iter()
                .map(|(scale, h)| AuxOutput {
                    scale: *scale,
                    heads: heads(h),
                })
                .collect(),
        }
    }
}

/// Built network: configuration, parameters and layer wiring.
#[derive(Debug, Clone)]
pub struct Model<T: Element = f32> {
    config: ModelConfig,
    params: Params<T>,
    high: Option<Vec<Stage>>,
    low: Vec<Stage>,
    fuse_low: Fusion,
    fuse_high: Fusion,
    head: OutputBranch,
}

/// Parameter factory used while wiring the network.
struct Builder<'a, T: Element> {
    params: &'a mut Params<T>,
    rng: ChaCha8Rng,
    norm: Normalization,
}

impl<T: Element> Builder<'_, T> {
    fn weight(&mut self, name: &str, spec: ConvSpec, gain: f64) -> usize {
        let shape = spec.weight_shape();
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let normal = Normal::new(0.0, gain / fan_in.sqrt()).expect("valid std");
        let numel: usize = shape.iter().product();
        let data: Vec<T> = (0..numel)
            .map(|_| T::from_f64_lossy(normal.sample(&mut self.rng)))
            .collect();
        self.params
            .push(format!("{name}.weight"), Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    /// Plain convolution with bias; `gain` scales a fan-in normal init
    /// (`std = gain / sqrt(fan_in)`).
    fn conv(&mut self, name: &str, spec: ConvSpec, relu6: bool, gain: f64) -> ConvLayer {
        let weight = self.weight(name, spec, gain);
        let bias = self
            .params
            .push(format!("{name}.bias"), Tensor::zeros(&[spec.out_channels]));
        ConvLayer {
            spec,
            weight,
            bias: Some(bias),
            norm: None,
            relu6,
        }
    }

    /// Convolution followed by group norm whose scale starts at `gamma`.
    /// Without normalization `gamma` becomes the init gain of a plain
    /// convolution.
    fn conv_norm(&mut self, name: &str, spec: ConvSpec, relu6: bool, gamma: f64) -> ConvLayer {
        if self.norm == Normalization::None {
            let gain = if relu6 { 2f64.sqrt() } else { gamma };
            return self.conv(name, spec, relu6, gain);
        }
        let gain = if relu6 { 2f64.sqrt() } else { 1.0 };
        let weight = self.weight(name, spec, gain);
        let c = spec.out_channels;
        let gamma = self
            .params
            .push(format!("{name}.norm.gamma"), Tensor::full(&[c], T::from_f64_lossy(gamma)));
        let beta = self.params.push(format!("{name}.norm.beta"), Tensor::zeros(&[c]));
        ConvLayer {
            spec,
            weight,
            bias: None,
            norm: Some(Norm {
                gamma,
                beta,
                groups: (c / NORM_GROUP_WIDTH).max(1),
            }),
            relu6,
        }
    }

    fn output_branch(&mut self, name: &str, in_ch: usize, classes: usize) -> OutputBranch {
        OutputBranch {
            fgbg: self.conv(&format!("{name}.fgbg"), ConvSpec::new(in_ch, 2, 1), false, 1.0),
            class: self.conv(&format!("{name}.class"), ConvSpec::new(in_ch, classes, 1), false, 1.0),
            field: self.conv(&format!("{name}.field"), ConvSpec::new(in_ch, 2, 1), false, 1.0),
        }
    }

    /// Builds encoder stages `1..=count`. With `surgery`, the stage-7
    /// stride is dropped to 1 and stages 7 and 8 use dilation 2.
    fn encoder(&mut self, prefix: &str, cfg: &ModelConfig, count: usize, surgery: bool) -> (Vec<Stage>, Vec<usize>) {
        let stem_ch = cfg.scaled(STEM_CHANNELS);
        let mut stages = vec![Stage::Stem(self.conv_norm(
            &format!("{prefix}.s1"),
            ConvSpec::new(3, stem_ch, 3).stride(2),
            true,
            1.0,
        ))];
        let mut channels = vec![stem_ch];
        let mut in_ch = stem_ch;
        for (gi, g) in STAGES.iter().enumerate().take(count.saturating_sub(1)) {
            let stage_no = gi + 2;
            let out_ch = cfg.scaled(g.channels);
            let (stride, dilation) = if surgery && stage_no >= 7 { (1, 2) } else { (g.stride, 1) };
            let mut blocks = Vec::with_capacity(g.repeats);
            for r in 0..g.repeats {
                let name = format!("{prefix}.s{stage_no}.b{r}");
                let s = if r == 0 { stride } else { 1 };
                let hidden = in_ch * g.expand;
                let residual = s == 1 && in_ch == out_ch;
                let expand = (g.expand != 1).then(|| {
                    self.conv_norm(&format!("{name}.expand"), ConvSpec::new(in_ch, hidden, 1), true, 1.0)
                });
                let depthwise = self.conv_norm(
                    &format!("{name}.dw"),
                    ConvSpec::depthwise(hidden, 3).stride(s).dilation(dilation),
                    true,
                    1.0,
                );
                // damp residual branches so the identity path dominates at init
                let proj_gain = if residual { 0.5 } else { 1.0 };
                let project =
                    self.conv_norm(&format!("{name}.project"), ConvSpec::new(hidden, out_ch, 1), false, proj_gain);
                blocks.push(Bottleneck {
                    expand,
                    depthwise,
                    project,
                    residual,
                });
                in_ch = out_ch;
            }
            stages.push(Stage::Group(blocks));
            channels.push(out_ch);
        }
        (stages, channels)
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> ModelError {
    let path = path.display().to_string();
    move |source| ModelError::Io { path, source }
}

impl Model<f32> {
    /// Builds a freshly initialized model. Identical `(config, seed)` pairs
    /// give bit-identical parameters.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        Model::<f32>::build_typed(config, seed)
    }

    pub fn load(ckpt_path: &Path, config_path: &Path) -> Result<Self, ModelError> {
        let json = std::fs::read_to_string(config_path).map_err(io_error(config_path))?;
        let config = ModelConfig::from_json(&json)?;
        let mut model = Model::build(config, 0)?;
        let file = std::fs::File::open(ckpt_path).map_err(io_error(ckpt_path))?;
        model.params.load_checkpoint(std::io::BufReader::new(file))?;
        Ok(model)
    }

    /// Writes the checkpoint and its config JSON.
    pub fn save(&self, ckpt_path: &Path, config_path: &Path) -> Result<(), ModelError> {
        let file = std::fs::File::create(ckpt_path).map_err(io_error(ckpt_path))?;
        self.params.write_checkpoint(std::io::BufWriter::new(file))?;
        std::fs::write(config_path, self.config.to_json()).map_err(io_error(config_path))?;
        Ok(())
    }
}

impl<T: Element> Model<T> {
    pub fn build_typed(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = Params::new();
        let mut b = Builder {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            norm: config.normalization,
        };
        let low_count = match config.encoder_variant {
            EncoderVariant::Deep55 => 8,
            EncoderVariant::Shallow43 => 7,
        };
        let (low, low_ch) = b.encoder("low", &config, low_count, true);
        let high = config
            .cascade_enabled
            .then(|| b.encoder("high", &config, 4, false));

        let classes = config.num_finger_classes;
        let dec = config.scaled(DECODER_CHANNELS);
        let deep_ch = *low_ch.last().expect("stages");
        let fuse_low = Fusion {
            deep_conv: b.conv_norm("fuse_low.deep", ConvSpec::new(deep_ch, dec, 3).dilation(2), false, 1.0),
            shallow_proj: Some(b.conv_norm("fuse_low.shallow", ConvSpec::new(low_ch[3], dec, 1), false, 1.0)),
            aux: b.output_branch("fuse_low.aux", deep_ch, classes),
        };
        let fuse_high = Fusion {
            deep_conv: b.conv_norm("fuse_high.deep", ConvSpec::new(dec, dec, 3).dilation(2), false, 1.0),
            shallow_proj: high
                .as_ref()
                .map(|(_, ch)| b.conv_norm("fuse_high.shallow", ConvSpec::new(ch[3], dec, 1), false, 1.0)),
            aux: b.output_branch("fuse_high.aux", dec, classes),
        };
        let head = b.output_branch("head", dec, classes);
        Ok(Model {
            config,
            params,
            high: high.map(|(s, _)| s),
            low,
            fuse_low,
            fuse_high,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Number of convolution layers in the deep encoder.
    pub fn low_branch_depth(&self) -> usize {
        self.low.iter().map(|s| s.convs().len()).sum()
    }

    /// Product of all strides in the deep encoder.
    pub fn low_branch_stride(&self) -> usize {
        self.low.iter().map(Stage::stride).product()
    }

    /// `(stride, dilation)` of every deep-encoder stage, stage 1 first.
    pub fn low_stage_geometry(&self) -> Vec<(usize, usize)> {
        self.low
            .iter()
            .map(|s| {
                let dil = s.convs().iter().map(|c| c.spec.dilation).max().unwrap_or(1);
                (s.stride(), dil)
            })
            .collect()
    }

    /// The same weights configured for another input size. The network is
    /// fully convolutional, so only the expected shape changes.
    pub fn with_input_size(&self, h: usize, w: usize) -> Result<Self, ModelError> {
        let mut config = self.config.clone();
        config.input_size = (h, w);
        config.validate()?;
        let mut m = self.clone();
        m.config = config;
        Ok(m)
    }

    /// Same architecture with parameters converted to another element type.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            high: self.high.clone(),
            low: self.low.clone(),
            fuse_low: self.fuse_low.clone(),
            fuse_high: self.fuse_high.clone(),
            head: self.head.clone(),
        }
    }

    /// Records every parameter on `tape`; the returned handles are indexed
    /// like [`Params`].
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect()
    }

    /// Forward pass on `tape`. `images` must be a normalized `N x 3 x H x W`
    /// tensor matching the configured input size.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, p: &[Var], images: Var) -> Result<OutputVars, ModelError> {
        let shape = tape.value(images).shape().to_vec();
        let (h, w) = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != h || shape[3] != w {
            return Err(ModelError::InputShape { got: shape, h, w });
        }

        let mut x = tape.avg_pool2(images)?;
        let mut low4 = None;
        for (i, stage) in self.low.iter().enumerate() {
            x = stage.apply(tape, p, x)?;
            if i == 3 {
                low4 = Some(x);
            }
        }
        let low4 = low4.expect("deep encoder has at least four stages");
        let (fused_low, aux16) = self.fuse_low.apply(tape, p, x, Some(low4), (h / 16, w / 16))?;

        let high4 = match &self.high {
            Some(stages) => Some(stages.iter().try_fold(images, |h, s| s.apply(tape, p, h))?),
            None => None,
        };
        let (fused_high, aux8) = self.fuse_high.apply(tape, p, fused_low, high4, (h / 8, w / 8))?;

        let coarse = self.head.apply(tape, p, fused_high)?;
        let full = HeadVars {
            fgbg: tape.upsample(coarse.fgbg, 8)?,
            class: tape.upsample(coarse.class, 8)?,
            field: tape.upsample(coarse.field, 8)?,
        };
        Ok(OutputVars {
            full,
            aux: vec![(16, aux16), (8, aux8)],
        })
    }

    /// Inference on a normalized image batch.
    pub fn forward(&self, images: &Tensor<T>) -> Result<SegOutput<T>, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.leaf(images.clone(), false);
        let vars = self.forward_on_tape(&mut tape, &p, x)?;
        Ok(SegOutput::from_tape(&tape, &vars))
    }

    /// Runs one decoder fusion block on its own: deep features `f1` at half
    /// the resolution of shallow features `f2`. `f2` must be `None` for the
    /// high block of a cascade-off model.
    pub fn fuse(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        level: FuseLevel,
        f1: Var,
        f2: Option<Var>,
    ) -> Result<Var, ModelError> {
        let block = match level {
            FuseLevel::Low => &self.fuse_low,
            FuseLevel::High => &self.fuse_high,
        };
        let target = match f2 {
            Some(v) => {
                let s = tape.value(v).shape();
                if s.len() != 4 {
                    return Err(TensorError::shape("fuse", format!("shallow features {s:?} are not 4-d")).into());
                }
                (s[2], s[3])
            }
            None => {
                let (_, _, h, w) = tape.value(f1).dims4()?;
                (2 * h, 2 * w)
            }
        };
        Ok(block.apply(tape, p, f1, f2, target)?.0)
    }
}

/// Which decoder fusion block: `Low` merges the deep encoder output with its
/// stage 4 (to H/16), `High` merges that with the shallow encoder (to H/8).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FuseLevel {
    Low,
    High,
}

/// Converts interleaved RGB8 images (all `h x w`) into a normalized NCHW batch.
pub fn images_to_tensor<T: Element>(images: &[&[u8]], h: usize, w: usize) -> Tensor<T> {
    let hw = h * w;
    let mut data = vec![T::zero(); images.len() * 3 * hw];
    for (n, img) in images.iter().enumerate() {
        assert_eq!(img.len(), hw * 3, "image buffer does not match {h}x{w}");
        for p in 0..hw {
            for c in 0..3 {
                let v = (img[p * 3 + c] as f64 / 255.0 - INPUT_MEAN) / INPUT_STD;
                data[(n * 3 + c) * hw + p] = T::from_f64_lossy(v);
            }
        }
    }
    Tensor::new(vec![images.len(), 3, h, w], data).expect("batch shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deep_encoder_stride_is_sixteen() {
        let m = Model::build(ModelConfig::tiny(64, 64), 0).unwrap();
        assert_eq!(m.low_branch_stride(), 16);
        let geo = m.low_stage_geometry();
        assert_eq!(geo.len(), 8);
        assert_eq!(geo[5], (1, 1));
        assert_eq!(geo[6], (1, 2));
        assert_eq!(geo[7], (1, 2));
        assert_eq!(&geo[..4], &[(2, 1), (1, 1), (2, 1), (2, 1)]);
    }

    #[test]
    fn shallow_variant_drops_last_group() {
        let mut cfg = ModelConfig::tiny(64, 64);
        cfg.encoder_variant = EncoderVariant::Shallow43;
        let shallow = Model::build(cfg, 0).unwrap();
        let deep = Model::build(ModelConfig::tiny(64, 64), 0).unwrap();
        assert_eq!(shallow.low_stage_geometry().len(), 7);
        assert!(shallow.low_branch_depth() < deep.low_branch_depth());
        assert_eq!(shallow.low_branch_stride(), 16);
    }

    #[test]
    fn bad_input_size_is_config_error() {
        let err = Model::build(ModelConfig::tiny(100, 96), 0).unwrap_err();
        assert!(matches!(err, ModelError::Config(ConfigError::InputSize { .. })));
    }

    #[test]
    fn forward_rejects_wrong_image_size() {
        let m = Model::build(ModelConfig::tiny(64, 64), 0).unwrap();
        let err = m.forward(&Tensor::zeros(&[1, 3, 32, 64])).unwrap_err();
        assert!(matches!(err, ModelError::InputShape { .. }));
    }

    #[test]
    fn normalization_maps_mid_gray_to_zero() {
        let img = vec![0u8, 255, 128].repeat(4);
        let t = images_to_tensor::<f64>(&[&img], 2, 2);
        assert_eq!(t.shape(), &[1, 3, 2, 2]);
        assert!((t.at4(0, 0, 0, 0) + 2.0).abs() < 1e-12);
        assert!((t.at4(0, 1, 1, 1) - 2.0).abs() < 1e-12);
    }
}
