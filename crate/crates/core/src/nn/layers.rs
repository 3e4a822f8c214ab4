//! Parameterized building blocks: plain convolutions, batch norm, the UNet
//! double-conv and up-sampling blocks, and residual basic blocks.

use rand::Rng;

use super::params::{init, ParamId, ParamKind, ParamSet};
use super::Ctx;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{BnMode, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = init::he_normal(&[cout, cin, kernel, kernel], cin * kernel * kernel, rng);
        let weight = ps.insert(format!("{name}.weight"), ParamKind::Trainable, w)?;
        let bias = if with_bias {
            Some(ps.insert(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.bound.var(self.weight);
        let b = self.bias.map(|b| cx.bound.var(b));
        cx.tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// 2x2 stride-2 transposed convolution used for decoder up-sampling.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn build<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        // each output cell receives cin * (kernel / stride)^2 contributions
        let fan_in = (cin * kernel * kernel / (stride * stride)).max(1);
        let w = init::he_normal(&[cin, cout, kernel, kernel], fan_in, rng);
        let weight = ps.insert(format!("{name}.weight"), ParamKind::Trainable, w)?;
        let bias = ps.insert(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[cout]))?;
        Ok(Self { weight, bias, stride })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.bound.var(self.weight), cx.bound.var(self.bias));
        cx.tape.conv_transpose2d(x, w, Some(b), self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn build<T: Scalar>(ps: &mut ParamSet<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: ps.insert(format!("{name}.gamma"), ParamKind::Trainable, Tensor::ones(&[channels]))?,
            beta: ps.insert(format!("{name}.beta"), ParamKind::Trainable, Tensor::zeros(&[channels]))?,
            running_mean: ps.insert(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[channels]))?,
            running_var: ps.insert(format!("{name}.running_var"), ParamKind::Buffer, Tensor::ones(&[channels]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (cx.bound.var(self.gamma), cx.bound.var(self.beta));
        if cx.training {
            let (y, stats) = cx.tape.batchnorm2d(x, g, b, BnMode::Train)?;
            if let Some(stats) = stats {
                cx.bn_updates.push((self.running_mean, self.running_var, stats));
            }
            Ok(y)
        } else {
            let mean = cx.params.value(self.running_mean).data();
            let var = cx.params.value(self.running_var).data();
            let (y, _) = cx.tape.batchnorm2d(x, g, b, BnMode::Eval { mean, var })?;
            Ok(y)
        }
    }
}

/// Two padded 3x3 convolutions, each followed by optional batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct DoubleConv {
    pub conv1: Conv2d,
    pub bn1: Option<BatchNorm2d>,
    pub conv2: Conv2d,
    pub bn2: Option<BatchNorm2d>,
}

impl DoubleConv {
    pub fn build<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        batchnorm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let conv1 = Conv2d::build(ps, &format!("{name}.conv1"), cin, cout, 3, 1, 1, !batchnorm, rng)?;
        let bn1 = batchnorm
            .then(|| BatchNorm2d::build(ps, &format!("{name}.bn1"), cout))
            .transpose()?;
        let conv2 = Conv2d::build(ps, &format!("{name}.conv2"), cout, cout, 3, 1, 1, !batchnorm, rng)?;
        let bn2 = batchnorm
            .then(|| BatchNorm2d::build(ps, &format!("{name}.bn2"), cout))
            .transpose()?;
        Ok(Self { conv1, bn1, conv2, bn2 })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = self.conv1.forward(cx, x)?;
        if let Some(bn) = &self.bn1 {
            h = bn.forward(cx, h)?;
        }
        h = cx.tape.relu(h)?;
        h = self.conv2.forward(cx, h)?;
        if let Some(bn) = &self.bn2 {
            h = bn.forward(cx, h)?;
        }
        cx.tape.relu(h)
    }
}

/// Decoder stage: up-sample, concatenate the skip tensor, then [`DoubleConv`].
#[derive(Clone, Debug)]
pub struct UpBlock {
    pub up: ConvTranspose2d,
    pub conv: DoubleConv,
}

impl UpBlock {
    pub fn build<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        skip: usize,
        cout: usize,
        batchnorm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let up = ConvTranspose2d::build(ps, &format!("{name}.up"), cin, cin / 2, 2, 2, rng)?;
        let conv = DoubleConv::build(ps, &format!("{name}.conv"), cin / 2 + skip, cout, batchnorm, rng)?;
        Ok(Self { up, conv })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, skip: Var) -> Result<Var> {
        let u = self.up.forward(cx, x)?;
        let cat = cx.tape.concat_channels(u, skip)?;
        self.conv.forward(cx, cat)
    }
}

/// ResNet basic block: `relu(bn2(conv2(relu(bn1(conv1 x)))) + shortcut(x))`,
/// with a 1x1 projection shortcut (conv + BN) when stride or width change.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub projection: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    pub fn build<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv1 = Conv2d::build(ps, &format!("{name}.conv1"), cin, cout, 3, stride, 1, false, rng)?;
        let bn1 = BatchNorm2d::build(ps, &format!("{name}.bn1"), cout)?;
        let conv2 = Conv2d::build(ps, &format!("{name}.conv2"), cout, cout, 3, 1, 1, false, rng)?;
        let bn2 = BatchNorm2d::build(ps, &format!("{name}.bn2"), cout)?;
        let projection = if stride != 1 || cin != cout {
            let conv = Conv2d::build(ps, &format!("{name}.proj"), cin, cout, 1, stride, 0, false, rng)?;
            let bn = BatchNorm2d::build(ps, &format!("{name}.proj_bn"), cout)?;
            Some((conv, bn))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            projection,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = self.conv1.forward(cx, x)?;
        h = self.bn1.forward(cx, h)?;
        h = cx.tape.relu(h)?;
        h = self.conv2.forward(cx, h)?;
        h = self.bn2.forward(cx, h)?;
        let short = self.shortcut(cx, x)?;
        let sum = cx.tape.add(h, short)?;
        cx.tape.relu(sum)
    }

    /// Shortcut path alone (identity or projection), before the final ReLU.
    pub fn shortcut<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        match &self.projection {
            Some((conv, bn)) => {
                let s = conv.forward(cx, x)?;
                bn.forward(cx, s)
            }
            None => Ok(x),
        }
    }

    /// Zeroes the residual branch output by clearing the second BN affine.
    pub fn zero_residual_branch<T: Scalar>(&self, ps: &mut ParamSet<T>) {
        ps.value_mut(self.bn2.gamma).data_mut().fill(T::zero());
        ps.value_mut(self.bn2.beta).data_mut().fill(T::zero());
    }
}

/// Two basic blocks: `cin -> 256` at stride 2 with projection, then
/// `256 -> 256` with identity shortcut.
#[derive(Clone, Debug)]
pub struct ResidualStack {
    pub block1: BasicBlock,
    pub block2: BasicBlock,
}

impl ResidualStack {
    pub fn build<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            block1: BasicBlock::build(ps, &format!("{name}.block1"), cin, cout, 2, rng)?,
            block2: BasicBlock::build(ps, &format!("{name}.block2"), cout, cout, 1, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.block1.forward(cx, x)?;
        self.block2.forward(cx, h)
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn build<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = init::he_normal(&[fan_in, fan_out], fan_in, rng);
        Ok(Self {
            weight: ps.insert(format!("{name}.weight"), ParamKind::Trainable, w)?,
            bias: ps.insert(format!("{name}.bias"), ParamKind::Trainable, Tensor::zeros(&[fan_out]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.bound.var(self.weight), cx.bound.var(self.bias));
        cx.tape.dense(x, w, b)
    }
}
