use serde::{Deserialize, Serialize};

use super::array::Tensor;
use super::kernels::{self, Window};
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Global reduction mode over the spatial grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Avg,
    Max,
}

/// Batch-norm behaviour for one call.
#[derive(Clone, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with stored running mean and variance.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Per-channel statistics of a training-mode batch norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the value blended into running statistics.
    pub var_unbiased: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        win: Window,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        win: Window,
    },
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    AvgPool {
        input: Var,
        win: Window,
    },
    GlobalAvg {
        input: Var,
    },
    GlobalMax {
        input: Var,
        argmax: Vec<u32>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    ChannelDense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    Reshape {
        input: Var,
    },
    Sum {
        input: Var,
    },
    ClassScoreSum {
        input: Var,
        class: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations in execution order and replays them in reverse to
/// accumulate gradients.
///
/// Every input of a node has a smaller index than the node itself, so a
/// reverse sweep over the node list visits each node once after all of its
/// consumers. [`Tape::backward`] may run once; a second call fails until
/// [`Tape::zero_grad`] clears the gradient buffers.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
    kinks: Kinks,
}

/// Which side of every kink a forward pass landed on: one mask per relu and
/// one winner list per max pooling, in execution order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KinkPattern {
    relu: Vec<Vec<bool>>,
    argmax: Vec<Vec<u32>>,
}

#[derive(Debug, Default)]
enum Kinks {
    #[default]
    Off,
    Record(KinkPattern),
    Replay {
        pattern: KinkPattern,
        relu: usize,
        argmax: usize,
    },
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose2d { .. } => "conv_transpose2d",
        Op::MaxPool { .. } => "maxpool2d",
        Op::AvgPool { .. } => "avgpool2d",
        Op::GlobalAvg { .. } => "global_avg_pool",
        Op::GlobalMax { .. } => "global_max_pool",
        Op::Dense { .. } => "dense",
        Op::ChannelDense { .. } => "channel_dense",
        Op::Relu { .. } => "relu",
        Op::BatchNorm { .. } => "batchnorm2d",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::ConcatChannels { .. } => "concat_channels",
        Op::Reshape { .. } => "reshape",
        Op::Sum { .. } => "sum",
        Op::ClassScoreSum { .. } => "class_score_sum",
        Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
            kinks: Kinks::Off,
        }
    }

    /// A tape that remembers the activation pattern of its relu and max ops.
    pub fn recording_kinks() -> Self {
        Self {
            kinks: Kinks::Record(KinkPattern::default()),
            ..Self::new()
        }
    }

    /// A tape whose relu and max ops follow `pattern` instead of their inputs,
    /// so the forward pass stays on one linear piece of the network. Replay
    /// tapes are meant for finite differencing, not for `backward`.
    pub fn replaying_kinks(pattern: KinkPattern) -> Self {
        Self {
            kinks: Kinks::Replay {
                pattern,
                relu: 0,
                argmax: 0,
            },
            ..Self::new()
        }
    }

    pub fn take_kinks(&mut self) -> Option<KinkPattern> {
        match std::mem::take(&mut self.kinks) {
            Kinks::Record(p) => Some(p),
            Kinks::Replay { pattern, .. } => Some(pattern),
            Kinks::Off => None,
        }
    }

    fn relu_mask(&mut self, x: &[T]) -> Result<Vec<bool>> {
        match &mut self.kinks {
            Kinks::Replay { pattern, relu, .. } => {
                let mask = pattern.relu.get(*relu).filter(|m| m.len() == x.len());
                let mask = mask.ok_or_else(|| Error::Usage("kink replay diverged at relu".into()))?.clone();
                *relu += 1;
                Ok(mask)
            }
            kinks => {
                let mask: Vec<bool> = x.iter().map(|&v| v > T::zero()).collect();
                if let Kinks::Record(p) = kinks {
                    p.relu.push(mask.clone());
                }
                Ok(mask)
            }
        }
    }

    fn argmax_override(&mut self, computed: &mut Vec<u32>) -> Result<bool> {
        match &mut self.kinks {
            Kinks::Replay { pattern, argmax, .. } => {
                let stored = pattern.argmax.get(*argmax).filter(|a| a.len() == computed.len());
                *computed = stored.ok_or_else(|| Error::Usage("kink replay diverged at max".into()))?.clone();
                *argmax += 1;
                Ok(true)
            }
            Kinks::Record(p) => {
                p.argmax.push(computed.clone());
                Ok(false)
            }
            Kinks::Off => Ok(false),
        }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name(&op) });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_finite_input(&self, op: &'static str, v: Var) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// 2-D cross-correlation over NCHW input with `[Cout, Cin, kH, kW]` weights.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        self.check_finite_input(OP, input)?;
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        let (o, wc, kh, kw) = self.value(weight).dims4(OP)?;
        if wc != c {
            return Err(dim_err(OP, format!("input has {c} channels, weight expects {wc}")));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(dim_err(OP, format!("bias shape {:?} != [{o}]", self.value(b).shape())));
            }
        }
        let win = Window::new(OP, (c, h, w), (kh, kw), stride, padding)?;
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            n,
            self.value(weight).data(),
            o,
            bias.map(|b| self.value(b).data()),
            &win,
        );
        let value = Tensor::new(&[n, o, win.oh, win.ow], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            value,
            &inputs,
            Op::Conv2d {
                input,
                weight,
                bias,
                win,
            },
        )
    }

    /// Transposed convolution with `[Cin, Cout, kH, kW]` weights and no
    /// padding; output extent is `(H - 1) * stride + kH`.
    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        self.check_finite_input(OP, input)?;
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        let (wc, o, kh, kw) = self.value(weight).dims4(OP)?;
        if wc != c {
            return Err(dim_err(OP, format!("input has {c} channels, weight expects {wc}")));
        }
        if stride == 0 || kh == 0 || kw == 0 || h == 0 || w == 0 {
            return Err(dim_err(OP, "stride, kernel and input extents must be >= 1"));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(dim_err(OP, format!("bias shape {:?} != [{o}]", self.value(b).shape())));
            }
        }
        let (oh, ow) = ((h - 1) * stride + kh, (w - 1) * stride + kw);
        let win = Window::new(OP, (o, oh, ow), (kh, kw), stride, 0)?;
        debug_assert_eq!((win.oh, win.ow), (h, w));
        let out = kernels::conv_transpose2d_forward(
            self.value(input).data(),
            n,
            c,
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &win,
        );
        let value = Tensor::new(&[n, o, oh, ow], out)?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(
            value,
            &inputs,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                win,
            },
        )
    }

    /// Windowed max pooling, no padding.
    pub fn maxpool2d(&mut self, input: Var, kernel: usize, stride: usize) -> Result<Var> {
        const OP: &str = "maxpool2d";
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        if kernel > h || kernel > w {
            return Err(dim_err(OP, format!("window {kernel} larger than input {h}x{w}")));
        }
        let win = Window::new(OP, (1, h, w), (kernel, kernel), stride, 0)?;
        let (mut out, mut argmax) = kernels::maxpool_forward(self.value(input).data(), n * c, &win);
        if self.argmax_override(&mut argmax)? {
            let x = self.value(input).data();
            out = argmax.iter().map(|&i| x[i as usize]).collect();
        }
        let value = Tensor::new(&[n, c, win.oh, win.ow], out)?;
        self.push(value, &[input], Op::MaxPool { input, argmax })
    }

    /// Windowed average pooling; padded cells count toward the divisor.
    pub fn avgpool2d(&mut self, input: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "avgpool2d";
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        let win = Window::new(OP, (1, h, w), (kernel, kernel), stride, padding)?;
        let out = kernels::avgpool_forward(self.value(input).data(), n * c, &win);
        let value = Tensor::new(&[n, c, win.oh, win.ow], out)?;
        self.push(value, &[input], Op::AvgPool { input, win })
    }

    /// Windowed pooling in either mode with shared geometry.
    pub fn pool2d(&mut self, input: Var, mode: PoolMode, kernel: usize, stride: usize) -> Result<Var> {
        match mode {
            PoolMode::Avg => self.avgpool2d(input, kernel, stride, 0),
            PoolMode::Max => self.maxpool2d(input, kernel, stride),
        }
    }

    /// Per-channel mean or max over the spatial grid: `[N,C,H,W] -> [N,C]`.
    pub fn global_pool(&mut self, input: Var, mode: PoolMode) -> Result<Var> {
        const OP: &str = "global_pool";
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        if h == 0 || w == 0 {
            return Err(dim_err(OP, "empty spatial grid"));
        }
        let hw = h * w;
        let x = self.value(input).data();
        match mode {
            PoolMode::Avg => {
                let inv = T::one() / T::from_usize_lossy(hw);
                let out = x.chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
                let value = Tensor::new(&[n, c], out)?;
                self.push(value, &[input], Op::GlobalAvg { input })
            }
            PoolMode::Max => {
                let mut out = Vec::with_capacity(n * c);
                let mut argmax = Vec::with_capacity(n * c);
                for (pl, plane) in x.chunks(hw).enumerate() {
                    let mut best = 0;
                    for (i, &v) in plane.iter().enumerate() {
                        if v > plane[best] {
                            best = i;
                        }
                    }
                    out.push(plane[best]);
                    argmax.push((pl * hw + best) as u32);
                }
                if self.argmax_override(&mut argmax)? {
                    let x = self.value(input).data();
                    out = argmax.iter().map(|&i| x[i as usize]).collect();
                }
                let value = Tensor::new(&[n, c], out)?;
                self.push(value, &[input], Op::GlobalMax { input, argmax })
            }
        }
    }

    /// Affine map `[N,D] x [D,M] + [M]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "dense";
        self.check_finite_input(OP, input)?;
        let (n, d) = self.value(input).dims2(OP)?;
        let (wd, m) = self.value(weight).dims2(OP)?;
        if wd != d {
            return Err(dim_err(OP, format!("input width {d} != weight rows {wd}")));
        }
        if self.value(bias).shape() != [m] {
            return Err(dim_err(OP, format!("bias shape {:?} != [{m}]", self.value(bias).shape())));
        }
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias).data());
        }
        T::gemm(
            n,
            d,
            m,
            T::one(),
            self.value(input).data(),
            d,
            1,
            self.value(weight).data(),
            m,
            1,
            T::one(),
            &mut out,
            m,
            1,
        );
        let value = Tensor::new(&[n, m], out)?;
        self.push(value, &[input, weight, bias], Op::Dense { input, weight, bias })
    }

    /// One single-output affine unit per channel: input `[N,K,...]` is
    /// flattened to `[N,K,L]`, weight is `[K,L]`, bias `[K]`, output `[N,K]`.
    pub fn channel_dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        const OP: &str = "channel_dense";
        let shape = self.value(input).shape().to_vec();
        if shape.len() < 3 {
            return Err(dim_err(OP, format!("expected [N,K,...], got {shape:?}")));
        }
        let (n, k) = (shape[0], shape[1]);
        let l: usize = shape[2..].iter().product();
        if self.value(weight).shape() != [k, l] {
            return Err(dim_err(
                OP,
                format!("weight {:?} != [{k}, {l}]", self.value(weight).shape()),
            ));
        }
        if self.value(bias).shape() != [k] {
            return Err(dim_err(OP, format!("bias {:?} != [{k}]", self.value(bias).shape())));
        }
        let (x, wt, b) = (
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let mut out = Vec::with_capacity(n * k);
        for s in 0..n {
            for ch in 0..k {
                let xs = &x[(s * k + ch) * l..(s * k + ch + 1) * l];
                let ws = &wt[ch * l..(ch + 1) * l];
                let acc: T = xs.iter().zip(ws).map(|(&a, &w)| a * w).sum();
                out.push(acc + b[ch]);
            }
        }
        let value = Tensor::new(&[n, k], out)?;
        self.push(value, &[input, weight, bias], Op::ChannelDense { input, weight, bias })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input).data().to_vec();
        let mask = self.relu_mask(&x)?;
        let out = x.iter().zip(&mask).map(|(&v, &on)| if on { v } else { T::zero() }).collect();
        let value = Tensor::new(self.value(input).shape(), out)?;
        self.push(value, &[input], Op::Relu { input })
    }

    /// Per-channel batch normalization over `(N, H, W)` of an NCHW tensor.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        const OP: &str = "batchnorm2d";
        let (n, c, h, w) = self.value(input).dims4(OP)?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(dim_err(OP, format!("affine shape {:?} != [{c}]", self.value(p).shape())));
            }
        }
        let hw = h * w;
        let count = n * hw;
        if count == 0 {
            return Err(dim_err(OP, "empty batch"));
        }
        let eps = T::from_f64_lossy(BN_EPS);
        let x = self.value(input).data();
        let (mean, var_biased, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let inv = T::one() / T::from_usize_lossy(count);
                for ch in 0..c {
                    let mut acc = T::zero();
                    for s in 0..n {
                        acc += x[(s * c + ch) * hw..(s * c + ch + 1) * hw].iter().copied().sum();
                    }
                    mean[ch] = acc * inv;
                    let mut sq = T::zero();
                    for s in 0..n {
                        for &v in &x[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                            let d = v - mean[ch];
                            sq += d * d;
                        }
                    }
                    var[ch] = sq * inv;
                }
                let unbias = if count > 1 {
                    T::from_usize_lossy(count) / T::from_usize_lossy(count - 1)
                } else {
                    T::one()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: var.iter().map(|&v| v * unbias).collect(),
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(dim_err(OP, "running statistics length mismatch"));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for s in 0..n {
            for ch in 0..c {
                let r = (s * c + ch) * hw..(s * c + ch + 1) * hw;
                for i in r {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let training = stats.is_some();
        let var = self.push(
            value,
            &[input, gamma, beta],
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
        )?;
        Ok((var, stats))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(value, &[a, b], Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(value, &[a, b], Op::Mul { a, b })
    }

    /// Concatenates along axis 1 of `[N, C, ...]` tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "concat_channels";
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(dim_err(OP, format!("{sa:?} vs {sb:?}")));
        }
        let n = sa[0];
        let (la, lb) = (self.value(a).len() / n.max(1), self.value(b).len() / n.max(1));
        let mut data = Vec::with_capacity(self.value(a).len() + self.value(b).len());
        for s in 0..n {
            data.extend_from_slice(&self.value(a).data()[s * la..(s + 1) * la]);
            data.extend_from_slice(&self.value(b).data()[s * lb..(s + 1) * lb]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let value = Tensor::new(&shape, data)?;
        self.push(value, &[a, b], Op::ConcatChannels { a, b })
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        self.push(value, &[input], Op::Reshape { input })
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, &[input], Op::Sum { input })
    }

    /// `sum_n scores[n, class]`; with independent samples its gradient
    /// with respect to any per-sample activation is that sample's
    /// `d score_class / d activation`.
    pub fn class_score_sum(&mut self, input: Var, class: usize) -> Result<Var> {
        const OP: &str = "class_score_sum";
        let (n, m) = self.value(input).dims2(OP)?;
        if class >= m {
            return Err(dim_err(OP, format!("class {class} out of {m}")));
        }
        let d = self.value(input).data();
        let value = Tensor::scalar((0..n).map(|s| d[s * m + class]).sum());
        self.push(value, &[input], Op::ClassScoreSum { input, class })
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// max subtraction.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "softmax_cross_entropy";
        let (n, m) = self.value(logits).dims2(OP)?;
        if labels.len() != n || n == 0 {
            return Err(dim_err(OP, format!("{} labels for batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(dim_err(OP, format!("label {bad} out of {m} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * m);
        let mut loss = T::zero();
        for (s, &label) in labels.iter().enumerate() {
            let row = &z[s * m..(s + 1) * m];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let log_denom = denom.ln();
            loss += -(row[label] - mx - log_denom);
            probs.extend(row.iter().map(|&v| (v - mx).exp() / denom));
        }
        let value = Tensor::scalar(loss / T::from_usize_lossy(n));
        self.push(
            value,
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_vec(&mut self, v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let shape = self.nodes[v.0].value.shape().to_vec();
        let t = Tensor::new(&shape, g).expect("gradient shape matches value");
        self.accumulate(v, t);
    }

    /// Reverse sweep from a one-element `root`, leaving `d root / d node` in
    /// the gradient buffer of every node that requires gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage(
                "backward already ran on this tape; call zero_grad first".into(),
            ));
        }
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Err(Error::Usage("root does not depend on any gradient leaf".into()));
        }
        self.backward_done = true;
        let shape = self.value(root).shape().to_vec();
        self.grads[root.0] = Some(Tensor::ones(&shape));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(dout) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &dout)?;
            self.grads[i] = Some(dout);
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&mut self, i: usize, dout: &Tensor<T>) -> Result<()> {
        let dy = dout.data();
        // Collect input gradients first; the borrow of `self.nodes[i]` ends
        // before they are accumulated.
        let mut out: Vec<(Var, Vec<T>)> = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Conv2d {
                input,
                weight,
                bias,
                ref win,
            } => {
                let n = self.value(input).shape()[0];
                let o = self.value(weight).shape()[0];
                let need = (self.rg(input), self.rg(weight), bias.is_some_and(|b| self.rg(b)));
                let g = kernels::conv2d_backward(
                    self.value(input).data(),
                    n,
                    self.value(weight).data(),
                    o,
                    dy,
                    win,
                    need,
                );
                out.extend(g.input.map(|d| (input, d)));
                out.extend(g.weight.map(|d| (weight, d)));
                if let (Some(b), Some(d)) = (bias, g.bias) {
                    out.push((b, d));
                }
            }
            &Op::ConvTranspose2d {
                input,
                weight,
                bias,
                ref win,
            } => {
                let shape = self.value(input).shape();
                let (n, c) = (shape[0], shape[1]);
                let need = (self.rg(input), self.rg(weight), bias.is_some_and(|b| self.rg(b)));
                let g = kernels::conv_transpose2d_backward(
                    self.value(input).data(),
                    n,
                    c,
                    self.value(weight).data(),
                    dy,
                    win,
                    need,
                );
                out.extend(g.input.map(|d| (input, d)));
                out.extend(g.weight.map(|d| (weight, d)));
                if let (Some(b), Some(d)) = (bias, g.bias) {
                    out.push((b, d));
                }
            }
            Op::MaxPool { input, argmax } | Op::GlobalMax { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).len()];
                for (&at, &d) in argmax.iter().zip(dy) {
                    dx[at as usize] += d;
                }
                out.push((*input, dx));
            }
            Op::AvgPool { input, win } => {
                let (n, c, _, _) = self.value(*input).dims4("avgpool2d")?;
                out.push((*input, kernels::avgpool_backward(dy, n * c, win)));
            }
            &Op::GlobalAvg { input } => {
                let x = self.value(input);
                let (_, _, h, w) = x.dims4("global_pool")?;
                let hw = h * w;
                let inv = T::one() / T::from_usize_lossy(hw);
                let mut dx = Vec::with_capacity(x.len());
                for &d in dy {
                    dx.extend(std::iter::repeat_n(d * inv, hw));
                }
                out.push((input, dx));
            }
            &Op::Dense { input, weight, bias } => {
                let (n, d) = self.value(input).dims2("dense")?;
                let m = self.value(weight).shape()[1];
                if self.rg(input) {
                    let mut dx = vec![T::zero(); n * d];
                    // dX[N,D] = dY[N,M] * W^T[M,D]
                    T::gemm(n, m, d, T::one(), dy, m, 1, self.value(weight).data(), 1, m, T::zero(), &mut dx, d, 1);
                    out.push((input, dx));
                }
                if self.rg(weight) {
                    let mut dw = vec![T::zero(); d * m];
                    // dW[D,M] = X^T[D,N] * dY[N,M]
                    T::gemm(d, n, m, T::one(), self.value(input).data(), 1, d, dy, m, 1, T::zero(), &mut dw, m, 1);
                    out.push((weight, dw));
                }
                if self.rg(bias) {
                    let mut db = vec![T::zero(); m];
                    for row in dy.chunks(m) {
                        for (a, &b) in db.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    out.push((bias, db));
                }
            }
            &Op::ChannelDense { input, weight, bias } => {
                let shape = self.value(input).shape();
                let (n, k) = (shape[0], shape[1]);
                let l: usize = shape[2..].iter().product();
                let (x, wt) = (self.value(input).data(), self.value(weight).data());
                if self.rg(input) {
                    let mut dx = vec![T::zero(); x.len()];
                    for s in 0..n {
                        for ch in 0..k {
                            let d = dy[s * k + ch];
                            let dst = &mut dx[(s * k + ch) * l..(s * k + ch + 1) * l];
                            for (v, &w) in dst.iter_mut().zip(&wt[ch * l..(ch + 1) * l]) {
                                *v = d * w;
                            }
                        }
                    }
                    out.push((input, dx));
                }
                if self.rg(weight) {
                    let mut dw = vec![T::zero(); wt.len()];
                    for s in 0..n {
                        for ch in 0..k {
                            let d = dy[s * k + ch];
                            let xs = &x[(s * k + ch) * l..(s * k + ch + 1) * l];
                            for (v, &xv) in dw[ch * l..(ch + 1) * l].iter_mut().zip(xs) {
                                *v += d * xv;
                            }
                        }
                    }
                    out.push((weight, dw));
                }
                if self.rg(bias) {
                    let mut db = vec![T::zero(); k];
                    for row in dy.chunks(k) {
                        for (a, &b) in db.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    out.push((bias, db));
                }
            }
            &Op::Relu { input } => {
                let x = self.value(input).data();
                let dx = x
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                out.push((input, dx));
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (n, c, h, w) = self.value(*input).dims4("batchnorm2d")?;
                let hw = h * w;
                let count = T::from_usize_lossy(n * hw);
                let g = self.value(*gamma).data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                            sum_dy[ch] += dy[i];
                            sum_dy_xhat[ch] += dy[i] * xhat[i];
                        }
                    }
                }
                if self.rg(*input) {
                    let mut dx = vec![T::zero(); xhat.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let scale = g[ch] * inv_std[ch];
                            for i in (s * c + ch) * hw..(s * c + ch + 1) * hw {
                                dx[i] = if *training {
                                    scale * (dy[i] - (sum_dy[ch] + xhat[i] * sum_dy_xhat[ch]) / count)
                                } else {
                                    scale * dy[i]
                                };
                            }
                        }
                    }
                    out.push((*input, dx));
                }
                out.push((*gamma, sum_dy_xhat));
                out.push((*beta, sum_dy));
            }
            &Op::Add { a, b } => {
                out.push((a, dy.to_vec()));
                out.push((b, dy.to_vec()));
            }
            &Op::Mul { a, b } => {
                let (xa, xb) = (self.value(a).data(), self.value(b).data());
                out.push((a, dy.iter().zip(xb).map(|(&d, &v)| d * v).collect()));
                out.push((b, dy.iter().zip(xa).map(|(&d, &v)| d * v).collect()));
            }
            &Op::ConcatChannels { a, b } => {
                let n = self.value(a).shape()[0].max(1);
                let (la, lb) = (self.value(a).len() / n, self.value(b).len() / n);
                let mut da = Vec::with_capacity(la * n);
                let mut db = Vec::with_capacity(lb * n);
                for row in dy.chunks(la + lb) {
                    da.extend_from_slice(&row[..la]);
                    db.extend_from_slice(&row[la..]);
                }
                out.push((a, da));
                out.push((b, db));
            }
            &Op::Reshape { input } => out.push((input, dy.to_vec())),
            &Op::Sum { input } => {
                let len = self.value(input).len();
                out.push((input, vec![dy[0]; len]));
            }
            &Op::ClassScoreSum { input, class } => {
                let (n, m) = self.value(input).dims2("class_score_sum")?;
                let mut dx = vec![T::zero(); n * m];
                for s in 0..n {
                    dx[s * m + class] = dy[0];
                }
                out.push((input, dx));
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let n = labels.len();
                let m = probs.len() / n;
                let scale = dy[0] / T::from_usize_lossy(n);
                let mut dx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (s, &l) in labels.iter().enumerate() {
                    dx[s * m + l] -= scale;
                }
                out.push((*logits, dx));
            }
        }
        for (v, g) in out {
            self.accumulate_vec(v, g);
        }
        Ok(())
    }
}
