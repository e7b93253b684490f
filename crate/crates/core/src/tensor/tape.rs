//! Reverse-mode differentiation over a linear tape of recorded ops.

use super::kernels::{self, ConvGeom, ConvSpec, GroupNormCache};
use super::{Element, Result, Tensor, TensorError};

/// Variance floor of [`Tape::group_norm`].
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    GroupNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        cache: GroupNormCache<T>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Relu6(Var),
    Upsample {
        input: Var,
        factor: usize,
    },
    AvgPool2(Var),
    /// Top-left spatial crop.
    Crop(Var),
    Softmax {
        input: Var,
        axis: usize,
    },
    Sum(Var),
    Scale(Var, T),
    /// Per-pixel multinomial NLL; keeps the softmax for the backward pass.
    Nll {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<Option<usize>>,
    },
    WeightedSum {
        input: Var,
        weights: Vec<T>,
    },
    /// Mean over a fixed subset of entries.
    SubsetMean {
        input: Var,
        kept: Vec<usize>,
    },
    /// `sum_p mask[p] * sum_c (pred[n,c,p] - target[n,c,p])^2`.
    MaskedSqErr {
        pred: Var,
        target: Vec<T>,
        mask: Vec<T>,
        channels: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation so it can be differentiated with [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Moves the gradient of `v` out, leaving `None`.
    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Every recorded value, in recording order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    /// Short name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        match self.nodes[v.0].op {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::GroupNorm { .. } => "group_norm",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Relu6(_) => "relu6",
            Op::Upsample { .. } => "upsample",
            Op::AvgPool2(_) => "avg_pool2",
            Op::Crop(_) => "crop",
            Op::Softmax { .. } => "softmax",
            Op::Sum(_) => "sum",
            Op::Scale(..) => "scale",
            Op::Nll { .. } => "nll",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::SubsetMean { .. } => "subset_mean",
            Op::MaskedSqErr { .. } => "masked_sq_err",
        }
    }

    /// Adds an input. `requires_grad` marks it as something to differentiate.
    pub fn leaf(&mut self, mut value: Tensor<T>, requires_grad: bool) -> Var {
        value.grad = None;
        value.requires_grad = requires_grad;
        self.push(value, Op::Leaf, requires_grad)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let geom = ConvGeom::new(self.value(input).shape(), self.value(weight).shape(), spec)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [spec.out_channels] {
                return Err(TensorError::shape(
                    "conv2d",
                    format!(
                        "bias has shape {:?}, expected [{}]",
                        self.value(b).shape(),
                        spec.out_channels
                    ),
                ));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_parts(geom.output_shape(), out),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Group normalization over `groups` channel groups of an NCHW input,
    /// with per-channel affine `gamma` and `beta`.
    pub fn group_norm(&mut self, input: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (_, c, _, _) = self.value(input).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::invalid(
                "group_norm",
                format!("{c} channels do not split into {groups} groups"),
            ));
        }
        for v in [gamma, beta] {
            if self.value(v).shape() != [c] {
                return Err(TensorError::shape(
                    "group_norm",
                    format!("affine parameter has shape {:?}, expected [{c}]", self.value(v).shape()),
                ));
            }
        }
        let shape = self.value(input).shape().to_vec();
        let (y, cache) = kernels::group_norm_forward(
            self.value(input).data(),
            &shape,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            T::from_f64_lossy(GROUP_NORM_EPS),
        );
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(shape, y),
            Op::GroupNorm {
                input,
                gamma,
                beta,
                groups,
                cache,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::shape(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b), rg))
    }

    /// Sums any number of equally shaped values.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| TensorError::invalid("add_all", "no operands"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::shape(
                "mul",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let shape = ta.shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b), rg))
    }

    /// Bounded ReLU, `min(max(x, 0), 6)`.
    pub fn relu6(&mut self, x: Var) -> Var {
        let six = T::from_f64_lossy(6.0);
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(T::zero()).min(six)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, data), Op::Relu6(x), rg)
    }

    /// Bilinear upsampling by an integer factor, align-corners=false.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(TensorError::invalid("upsample", "factor must be at least 1"));
        }
        let t = self.value(x);
        let (n, c, h, w) = t.dims4()?;
        let data = kernels::upsample_forward(t.data(), t.shape(), factor);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h * factor, w * factor], data),
            Op::Upsample { input: x, factor },
            rg,
        ))
    }

    /// Keeps the top-left `h x w` window of every channel.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, c, ih, iw) = t.dims4()?;
        if h > ih || w > iw {
            return Err(TensorError::shape("crop", format!("{h}x{w} window in {ih}x{iw} input")));
        }
        if (h, w) == (ih, iw) {
            return Ok(x);
        }
        let src = t.data();
        let mut data = Vec::with_capacity(n * c * h * w);
        for plane in 0..n * c {
            for y in 0..h {
                let row = plane * ih * iw + y * iw;
                data.extend_from_slice(&src[row..row + w]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![n, c, h, w], data), Op::Crop(x), rg))
    }

    /// Halves both spatial dims by 2x2 averaging.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::shape(
                "avg_pool2",
                format!("spatial dims must be even, got {h}x{w}"),
            ));
        }
        let data = kernels::avg_pool2_forward(t.data(), t.shape());
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![n, c, h / 2, w / 2], data),
            Op::AvgPool2(x),
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(TensorError::invalid(
                "softmax",
                format!("axis {axis} out of range for rank {}", t.rank()),
            ));
        }
        let data = kernels::softmax_forward(t.data(), t.shape(), axis);
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax { input: x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * k).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, data), Op::Scale(x, k), rg)
    }

    /// Per-pixel `-log softmax(logits)[target]` over the channel axis of an
    /// NCHW tensor. Pixels whose target is `None` get loss 0 and no gradient.
    /// Output shape is `[N, H, W]`.
    pub fn nll(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (n, c, h, w) = t.dims4()?;
        if targets.len() != n * h * w {
            return Err(TensorError::shape(
                "nll",
                format!("{} targets for {n}x{h}x{w} pixels", targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&k| k >= c) {
            return Err(TensorError::invalid(
                "nll",
                format!("class index {bad} out of range for {c} classes"),
            ));
        }
        let probs = kernels::softmax_forward(t.data(), t.shape(), 1);
        let hw = h * w;
        let mut loss = vec![T::zero(); n * hw];
        for (i, tgt) in targets.iter().enumerate() {
            if let Some(k) = *tgt {
                let (b, p) = (i / hw, i % hw);
                // log-sum-exp form keeps the value accurate when p -> 0
                let base = b * c * hw + p;
                let xs = t.data();
                let max = (0..c).map(|j| xs[base + j * hw]).fold(T::neg_infinity(), T::max);
                let lse = (0..c).map(|j| (xs[base + j * hw] - max).exp()).sum::<T>().ln() + max;
                loss[i] = lse - xs[base + k * hw];
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::from_parts(vec![n, h, w], loss),
            Op::Nll {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Scalar `sum_i weights[i] * x[i]`.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let t = self.value(x);
        if weights.len() != t.numel() {
            return Err(TensorError::shape(
                "weighted_sum",
                format!("{} weights for {} values", weights.len(), t.numel()),
            ));
        }
        let s = t.data().iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { input: x, weights }, rg))
    }

    /// Scalar mean of the entries listed in `kept` (flat indices).
    pub fn subset_mean(&mut self, x: Var, kept: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if kept.is_empty() {
            return Err(TensorError::invalid("subset_mean", "empty subset"));
        }
        if let Some(&bad) = kept.iter().find(|&&i| i >= t.numel()) {
            return Err(TensorError::invalid(
                "subset_mean",
                format!("index {bad} out of range for {} values", t.numel()),
            ));
        }
        let sum: T = kept.iter().map(|&i| t.data()[i]).sum();
        let mean = sum / T::from_usize(kept.len()).expect("count fits");
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(mean), Op::SubsetMean { input: x, kept }, rg))
    }

    /// Scalar `sum_{n,p} mask[n,p] * ||pred[n,:,p] - target[n,:,p]||^2` for
    /// NCHW `pred`, with `mask` laid out as `[N, H, W]`.
    pub fn masked_sq_err(&mut self, pred: Var, target: Vec<T>, mask: Vec<T>) -> Result<Var> {
        let t = self.value(pred);
        let (n, c, h, w) = t.dims4()?;
        if target.len() != t.numel() || mask.len() != n * h * w {
            return Err(TensorError::shape(
                "masked_sq_err",
                format!(
                    "pred {:?}, target len {}, mask len {}",
                    t.shape(),
                    target.len(),
                    mask.len()
                ),
            ));
        }
        let hw = h * w;
        let mut s = T::zero();
        for (i, &m) in mask.iter().enumerate() {
            if m != T::zero() {
                let (b, p) = (i / hw, i % hw);
                let mut e = T::zero();
                for ch in 0..c {
                    let j = (b * c + ch) * hw + p;
                    let d = t.data()[j] - target[j];
                    e = e + d * d;
                }
                s = s + m * e;
            }
        }
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(s),
            Op::MaskedSqErr {
                pred,
                target,
                mask,
                channels: c,
            },
            rg,
        ))
    }

    /// Differentiates the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            let send = |v: Var, g: Vec<T>, grads: &mut Vec<Option<Vec<T>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let cg = kernels::conv2d_backward(
                        self.value(*input).data(),
                        self.value(*weight).data(),
                        &gy,
                        geom,
                        self.rg(*input),
                        self.rg(*weight),
                        bias.is_some_and(|b| self.rg(b)),
                    );
                    if let Some(g) = cg.input {
                        send(*input, g, &mut grads);
                    }
                    if let Some(g) = cg.weight {
                        send(*weight, g, &mut grads);
                    }
                    if let (Some(b), Some(g)) = (bias, cg.bias) {
                        send(*b, g, &mut grads);
                    }
                }
                Op::GroupNorm {
                    input,
                    gamma,
                    beta,
                    groups,
                    cache,
                } => {
                    let (dx, dgamma, dbeta) = kernels::group_norm_backward(
                        &gy,
                        self.value(*input).shape(),
                        *groups,
                        self.value(*gamma).data(),
                        cache,
                    );
                    send(*input, dx, &mut grads);
                    send(*gamma, dgamma, &mut grads);
                    send(*beta, dbeta, &mut grads);
                }
                Op::Add(a, b) => {
                    send(*a, gy.clone(), &mut grads);
                    send(*b, gy, &mut grads);
                }
                Op::Mul(a, b) => {
                    let ga = gy.iter().zip(self.value(*b).data()).map(|(&g, &y)| g * y).collect();
                    let gb = gy.iter().zip(self.value(*a).data()).map(|(&g, &x)| g * x).collect();
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::Relu6(x) => {
                    let six = T::from_f64_lossy(6.0);
                    let g = gy
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&g, &v)| if v > T::zero() && v < six { g } else { T::zero() })
                        .collect();
                    send(*x, g, &mut grads);
                }
                Op::Upsample { input, factor } => {
                    let g = kernels::upsample_backward(&gy, self.value(*input).shape(), *factor);
                    send(*input, g, &mut grads);
                }
                Op::AvgPool2(x) => {
                    let g = kernels::avg_pool2_backward(&gy, self.value(*x).shape());
                    send(*x, g, &mut grads);
                }
                Op::Crop(x) => {
                    let (_, _, ih, iw) = self.value(*x).dims4()?;
                    let (_, _, h, w) = node.value.dims4()?;
                    let mut g = vec![T::zero(); self.value(*x).numel()];
                    for (plane, src) in gy.chunks(h * w).enumerate() {
                        for y in 0..h {
                            let row = plane * ih * iw + y * iw;
                            g[row..row + w].copy_from_slice(&src[y * w..(y + 1) * w]);
                        }
                    }
                    send(*x, g, &mut grads);
                }
                Op::Softmax { input, axis } => {
                    let g = kernels::softmax_backward(node.value.data(), &gy, node.value.shape(), *axis);
                    send(*input, g, &mut grads);
                }
                Op::Sum(x) => {
                    let g = vec![gy[0]; self.value(*x).numel()];
                    send(*x, g, &mut grads);
                }
                Op::Scale(x, k) => {
                    let g = gy.iter().map(|&v| v * *k).collect();
                    send(*x, g, &mut grads);
                }
                Op::Nll {
                    logits,
                    probs,
                    targets,
                } => {
                    let (_, c, h, w) = self.value(*logits).dims4()?;
                    let hw = h * w;
                    let mut g = vec![T::zero(); probs.len()];
                    for (i, tgt) in targets.iter().enumerate() {
                        if let Some(k) = *tgt {
                            let (b, p) = (i / hw, i % hw);
                            let gl = gy[i];
                            if gl == T::zero() {
                                continue;
                            }
                            for j in 0..c {
                                let at = (b * c + j) * hw + p;
                                let onehot = if j == k { T::one() } else { T::zero() };
                                g[at] = gl * (probs[at] - onehot);
                            }
                        }
                    }
                    send(*logits, g, &mut grads);
                }
                Op::WeightedSum { input, weights } => {
                    let g = weights.iter().map(|&w| w * gy[0]).collect();
                    send(*input, g, &mut grads);
                }
                Op::SubsetMean { input, kept } => {
                    let mut g = vec![T::zero(); self.value(*input).numel()];
                    let share = gy[0] / T::from_usize(kept.len()).expect("count fits");
                    for &i in kept {
                        g[i] = g[i] + share;
                    }
                    send(*input, g, &mut grads);
                }
                Op::MaskedSqErr {
                    pred,
                    target,
                    mask,
                    channels,
                } => {
                    let p = self.value(*pred);
                    let hw = mask.len() / p.shape()[0];
                    let two = T::from_f64_lossy(2.0);
                    let mut g = vec![T::zero(); p.numel()];
                    for (i, &m) in mask.iter().enumerate() {
                        if m != T::zero() {
                            let (b, px) = (i / hw, i % hw);
                            for ch in 0..*channels {
                                let j = (b * channels + ch) * hw + px;
                                g[j] = two * m * (p.data()[j] - target[j]) * gy[0];
                            }
                        }
                    }
                    send(*pred, g, &mut grads);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[3], &[0.3, -1.0, 2.0]), true);
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let err = tape.backward(w).unwrap_err();
        assert!(matches!(err, TensorError::Invalid { op: "backward", .. }));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = tape.leaf(t(&[2], &[3.0, 4.0]), false);
        let p = tape.mul(w, c).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[0.0, 0.0]), false);
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let c = 0.7;
        let x = tape.leaf(t(&[2], &[c, c + 3f64.ln()]), false);
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12);

        let x = tape.leaf(t(&[2], &[1000.0, 1000.0]), false);
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[0.0, 0.0]), false);
        assert!(tape.softmax(x, 1).is_err());
    }

    #[test]
    fn upsample_rejects_zero_factor() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 1, 2], &[0.0, 1.0]), false);
        assert!(tape.upsample(x, 0).is_err());
    }

    #[test]
    fn nll_rejects_out_of_range_class() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 2, 1, 1], &[0.0, 0.0]), false);
        assert!(tape.nll(x, &[Some(2)]).is_err());
    }

    #[test]
    fn subset_mean_rejects_empty() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[0.0, 0.0]), false);
        assert!(tape.subset_mean(x, vec![]).is_err());
    }
}
