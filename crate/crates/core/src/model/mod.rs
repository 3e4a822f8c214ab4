//! The UNet-lite + residual stack classifier with CAM, SAM and HESAM heads.
//!
//! Data flow for a `N x C x 32 x 32` input:
//!
//! ```text
//! enc1 (C->64, 32x32) -pool-> enc2 (64->128, 16x16) -pool-> enc3 (128->256, 8x8) -pool-> bottleneck 256x4x4
//! dec3 (up + enc3 skip, 8x8) -> dec2 (up + enc2 skip, 16x16) -> dec1 (up + enc1 skip, 32x32) -> 1x1 conv
//! residual stack (stride 2) -> final features 256x16x16
//! head: cam  = GAP -> dense(256 -> 2)
//!       sam  = pool(5, 2) -> 256x6x6 minor features -> per-map unit -> H (256) -> dense(256 -> 2)
//!       hesam = sam with d = global_pool(bottleneck) fused into H (sum or concat)
//! ```

mod config;
mod persist;

pub use config::{Fusion, HeadKind, ModelConfig, Pooling, FEATURE_CHANNELS, INPUT_SIZE, SUPPORTED_IN_CHANNELS};
pub use persist::{read_model, write_model, MODEL_MAGIC};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::nn::layers::{Conv2d, Dense, DoubleConv, ResidualStack, UpBlock};
use crate::nn::{apply_bn_updates, init, BoundParams, Ctx, Gradients, ParamId, ParamKind, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{PoolMode, Tape, Tensor, Var};

const ENC_WIDTHS: [usize; 3] = [64, 128, 256];

#[derive(Clone, Debug)]
enum Head {
    Cam {
        classifier: Dense,
    },
    Sam {
        beta: ParamId,
        beta_bias: ParamId,
        classifier: Dense,
    },
}

#[derive(Clone, Debug)]
struct Layers {
    enc: Vec<DoubleConv>,
    dec: Vec<UpBlock>,
    out_conv: Conv2d,
    residual: Option<ResidualStack>,
    head: Head,
}

/// Which forward behaviour to record.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running stats updated, gradients tracked.
    Train,
    /// Running statistics, no gradients.
    Eval,
    /// Running statistics with gradients tracked (Grad-CAM, checks).
    EvalWithGrad,
}

/// Tape handles of the intermediate tensors of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input: Var,
    /// Encoder output after the third down-sampling, `N x 256 x 4 x 4`.
    pub bottleneck: Var,
    /// UNet 1x1 output conv, `N x unet_out_channels x 32 x 32`.
    pub unet_out: Var,
    /// Features the head reads (`g_k`), `N x 256 x 16 x 16` with the residual stack.
    pub final_features: Var,
    /// SAM minor features (`A^k`), `N x 256 x 6 x 6`.
    pub minor_features: Option<Var>,
    /// SAM vector `H`, `N x 256`.
    pub sam_vector: Option<Var>,
    /// High-level vector `d`, `N x 256`.
    pub high_level: Option<Var>,
    /// Classifier input (`H`, `H + d`, `[H; d]` or the GAP vector).
    pub classifier_input: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamSet<T>,
    layers: Layers,
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes the network. Parameters are drawn in a fixed
    /// order, so SAM and sum-fused HESAM models built with the same seed
    /// start from identical weights.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let bn = config.unet_batchnorm;

        let mut enc = Vec::with_capacity(3);
        let mut cin = config.in_channels;
        for (i, &w) in ENC_WIDTHS.iter().enumerate() {
            enc.push(DoubleConv::build(&mut ps, &format!("unet.enc{}", i + 1), cin, w, bn, &mut rng)?);
            cin = w;
        }
        // dec3 consumes the bottleneck, dec1 produces the 32x32 map.
        let mut dec = Vec::with_capacity(3);
        let mut cur = ENC_WIDTHS[2];
        for (level, &skip) in ENC_WIDTHS.iter().enumerate().rev() {
            dec.push(UpBlock::build(&mut ps, &format!("unet.dec{}", level + 1), cur, skip, skip, bn, &mut rng)?);
            cur = skip;
        }
        let out_conv = Conv2d::build(&mut ps, "unet.out", cur, config.unet_out_channels, 1, 1, 0, true, &mut rng)?;
        let residual = config
            .use_residual_stack
            .then(|| ResidualStack::build(&mut ps, "residual", config.unet_out_channels, FEATURE_CHANNELS, &mut rng))
            .transpose()?;

        let k = config.final_channels();
        let head = match config.head {
            HeadKind::Cam => Head::Cam {
                classifier: Dense::build(&mut ps, "head.classifier", k, 2, &mut rng)?,
            },
            HeadKind::Sam | HeadKind::Hesam => {
                let l = 36;
                let beta = ps.insert("head.sam.beta", ParamKind::Trainable, init::he_normal(&[k, l], l, &mut rng))?;
                let beta_bias = ps.insert("head.sam.bias", ParamKind::Trainable, Tensor::zeros(&[k]))?;
                let fan_in = if config.head == HeadKind::Hesam && config.fusion == Fusion::Concat {
                    2 * k
                } else {
                    k
                };
                Head::Sam {
                    beta,
                    beta_bias,
                    classifier: Dense::build(&mut ps, "head.classifier", fan_in, 2, &mut rng)?,
                }
            }
        };

        Ok(Self {
            config,
            params: ps,
            layers: Layers {
                enc,
                dec,
                out_conv,
                residual,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn residual_stack(&self) -> Option<&ResidualStack> {
        self.layers.residual.as_ref()
    }

    /// Classifier weight `[inputs, 2]` and bias `[2]` (`omega` or `gamma`).
    pub fn classifier(&self) -> (&Tensor<T>, &Tensor<T>) {
        let c = match &self.layers.head {
            Head::Cam { classifier } | Head::Sam { classifier, .. } => classifier,
        };
        (self.params.value(c.weight), self.params.value(c.bias))
    }

    pub fn classifier_mut(&mut self) -> (&mut Tensor<T>, ParamId) {
        let c = match &self.layers.head {
            Head::Cam { classifier } | Head::Sam { classifier, .. } => classifier.clone(),
        };
        (self.params.value_mut(c.weight), c.bias)
    }

    /// Per-map SAM unit weights `beta` `[256, 36]` and biases `[256]`.
    pub fn sam_units(&self) -> Option<(&Tensor<T>, &Tensor<T>)> {
        match &self.layers.head {
            Head::Sam { beta, beta_bias, .. } => Some((self.params.value(*beta), self.params.value(*beta_bias))),
            Head::Cam { .. } => None,
        }
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    /// Records the full forward pass for an already-bound input.
    pub fn forward(&self, cx: &mut Ctx<'_, T>, input: Var) -> Result<ForwardTrace> {
        let shape = cx.tape.value(input).shape().to_vec();
        let want = [self.config.in_channels, INPUT_SIZE, INPUT_SIZE];
        if shape.len() != 4 || shape[1..] != want {
            return Err(dim_err(
                "model",
                format!("expected N x {want:?} input, got {shape:?}"),
            ));
        }
        let mut skips = Vec::with_capacity(3);
        let mut h = input;
        for block in &self.layers.enc {
            h = block.forward(cx, h)?;
            skips.push(h);
            h = cx.tape.maxpool2d(h, 2, 2)?;
        }
        let bottleneck = h;
        for (block, skip) in self.layers.dec.iter().zip(skips.iter().rev()) {
            h = block.forward(cx, h, *skip)?;
        }
        let unet_out = self.layers.out_conv.forward(cx, h)?;
        let final_features = match &self.layers.residual {
            Some(stack) => stack.forward(cx, unet_out)?,
            None => unet_out,
        };
        let high_level = if self.config.use_hf_branch {
            let d = cx.tape.global_pool(bottleneck, self.config.hf_pool.mode())?;
            Some(if self.config.zero_high_level {
                let zeros = Tensor::zeros(cx.tape.value(d).shape());
                cx.tape.constant(zeros)
            } else {
                d
            })
        } else {
            None
        };

        let (minor_features, sam_vector, classifier_input, logits) = match self.config.head {
            HeadKind::Cam => {
                let (pooled, logits) = self.forward_cam_head(cx, final_features)?;
                (None, None, pooled, logits)
            }
            HeadKind::Sam => {
                let out = self.forward_sam_head(cx, final_features)?;
                (Some(out.minor), Some(out.sam_vector), out.sam_vector, out.logits)
            }
            HeadKind::Hesam => {
                let d = high_level.ok_or_else(|| Error::Config("hesam without high-level branch".into()))?;
                let out = self.forward_hesam(cx, final_features, d)?;
                (Some(out.minor), Some(out.sam_vector), out.fused, out.logits)
            }
        };
        Ok(ForwardTrace {
            input,
            bottleneck,
            unet_out,
            final_features,
            minor_features,
            sam_vector,
            high_level,
            classifier_input,
            logits,
        })
    }

    fn sam_parts(&self) -> Result<(ParamId, ParamId, &Dense)> {
        match &self.layers.head {
            Head::Sam {
                beta,
                beta_bias,
                classifier,
            } => Ok((*beta, *beta_bias, classifier)),
            Head::Cam { .. } => Err(Error::Usage("model has a cam head".into())),
        }
    }

    fn sam_vector(&self, cx: &mut Ctx<'_, T>, g: Var) -> Result<(Var, Var)> {
        let (beta, beta_bias, _) = self.sam_parts()?;
        let (_, c, _, _) = cx.tape.value(g).dims4("sam_head")?;
        if c != cx.params.value(beta).shape()[0] {
            return Err(dim_err("sam_head", format!("{c} feature maps for {} SAM units", cx.params.value(beta).shape()[0])));
        }
        let (k, s) = self.config.minor_window();
        let minor = cx.tape.pool2d(g, self.config.fcf_pool.mode(), k, s)?;
        let h = cx.tape.channel_dense(minor, cx.bound.var(beta), cx.bound.var(beta_bias))?;
        Ok((minor, h))
    }

    /// Minor features, SAM vector `H` and logits `S' = gamma^T H + b`.
    pub fn forward_sam_head(&self, cx: &mut Ctx<'_, T>, g: Var) -> Result<SamOutput> {
        let (_, _, classifier) = self.sam_parts()?;
        let (minor, sam_vector) = self.sam_vector(cx, g)?;
        let logits = classifier.forward(cx, sam_vector)?;
        Ok(SamOutput {
            minor,
            sam_vector,
            logits,
        })
    }

    /// Logits `gamma^T (H + d) + b`, or a 512-input classifier over `[H; d]`.
    pub fn forward_hesam(&self, cx: &mut Ctx<'_, T>, g: Var, d: Var) -> Result<HesamOutput> {
        let (_, _, classifier) = self.sam_parts()?;
        let (minor, sam_vector) = self.sam_vector(cx, g)?;
        let fused = match self.config.fusion {
            Fusion::Sum => {
                let (hs, ds) = (cx.tape.value(sam_vector).shape(), cx.tape.value(d).shape());
                if hs != ds {
                    return Err(dim_err("hesam", format!("sum fusion of {hs:?} and {ds:?}")));
                }
                cx.tape.add(sam_vector, d)?
            }
            Fusion::Concat => cx.tape.concat_channels(sam_vector, d)?,
        };
        let logits = classifier.forward(cx, fused)?;
        Ok(HesamOutput {
            minor,
            sam_vector,
            fused,
            logits,
        })
    }

    /// GAP vector and logits `omega^T mean(g) + b`.
    pub fn forward_cam_head(&self, cx: &mut Ctx<'_, T>, g: Var) -> Result<(Var, Var)> {
        let Head::Cam { classifier } = &self.layers.head else {
            return Err(Error::Usage("model does not have a cam head".into()));
        };
        let pooled = cx.tape.global_pool(g, PoolMode::Avg)?;
        let logits = classifier.forward(cx, pooled)?;
        Ok((pooled, logits))
    }

    /// Binds parameters and the input on `tape` and records a forward pass.
    /// In [`Mode::Train`] running batch-norm statistics are updated.
    pub fn run(&mut self, tape: &mut Tape<T>, input: &Tensor<T>, mode: Mode) -> Result<(ForwardTrace, BoundParams)> {
        let with_grad = mode != Mode::Eval;
        let bound = self.params.bind(tape, with_grad);
        let x = tape.constant(input.clone());
        let mut cx = Ctx::new(tape, &self.params, &bound, mode == Mode::Train);
        let trace = self.forward(&mut cx, x)?;
        let updates = std::mem::take(&mut cx.bn_updates);
        apply_bn_updates(&mut self.params, updates);
        Ok((trace, bound))
    }

    /// Forward pass without side effects (running statistics, no gradients).
    pub fn run_eval(&self, tape: &mut Tape<T>, input: &Tensor<T>, with_grad: bool) -> Result<(ForwardTrace, BoundParams)> {
        let bound = self.params.bind(tape, with_grad);
        let x = tape.constant(input.clone());
        let mut cx = Ctx::new(tape, &self.params, &bound, false);
        let trace = self.forward(&mut cx, x)?;
        Ok((trace, bound))
    }

    /// Eval-mode logits `[N, 2]`.
    pub fn predict_logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let (trace, _) = self.run_eval(&mut tape, input, false)?;
        Ok(tape.value(trace.logits).clone())
    }

    /// Training-mode cross-entropy and its parameter gradients.
    pub fn loss_and_grads(&mut self, input: &Tensor<T>, labels: &[usize]) -> Result<(T, Gradients<T>)> {
        let mut tape = Tape::new();
        let (trace, bound) = self.run(&mut tape, input, Mode::Train)?;
        let loss = tape.softmax_cross_entropy(trace.logits, labels)?;
        let value = tape.value(loss).data()[0];
        tape.backward(loss)?;
        Ok((value, bound.gradients(&tape)))
    }

    /// Trainable parameter count of a named module.
    ///
    /// Selectors: `all`, `unet`, `encoder`, `decoder`, `residual`, `sam`
    /// (the per-map units), `classifier`, `head`; the empty selector counts
    /// nothing.
    pub fn count_params(&self, selector: &str) -> Result<usize> {
        let prefix = match selector {
            "" => return Ok(0),
            "all" => "",
            "unet" => "unet.",
            "encoder" => "unet.enc",
            "decoder" => "unet.dec",
            "residual" => "residual.",
            "sam" => "head.sam.",
            "classifier" => "head.classifier.",
            "head" => "head.",
            other => return Err(Error::Usage(format!("unknown module selector {other:?}"))),
        };
        Ok(self.params.count_trainable(prefix))
    }
}

/// Trainable parameters of a single standard dense layer mapping the
/// flattened `channels x minor_len` minor features to `channels` outputs,
/// the alternative the per-map SAM units replace.
pub fn dense_alternative_params(channels: usize, minor_len: usize) -> usize {
    let mut ps = ParamSet::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Dense::build(&mut ps, "dense_alternative", channels * minor_len, channels, &mut rng)
        .expect("fresh parameter set");
    ps.count_trainable("")
}

#[derive(Clone, Copy, Debug)]
pub struct SamOutput {
    pub minor: Var,
    pub sam_vector: Var,
    pub logits: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct HesamOutput {
    pub minor: Var,
    pub sam_vector: Var,
    pub fused: Var,
    pub logits: Var,
}
