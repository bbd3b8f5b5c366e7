//! The residual encoder-decoder denoiser.
//!
//! The network F predicts the noise component of its input; the denoised
//! image is `x − F(x)`. Encoder layers are stride-1 same-padding
//! convolutions with ReLU; decoder layers are transposed convolutions that
//! add the mirrored encoder activation (skip connection) before their ReLU.
//! The final decoder layer has no skip and no ReLU so it can emit a signed
//! residual, and it is built with all-zero weights: a freshly constructed
//! model is exactly the identity denoiser.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, TensorId};

/// Topology and initialization parameters of a [`RedModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct RedConfig {
    /// Total conv + deconv layers, split evenly between encoder and decoder.
    pub num_layers: usize,
    /// Feature channels per hidden layer.
    pub channels: usize,
    /// Odd kernel extent.
    pub kernel_size: usize,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for RedConfig {
    fn default() -> Self {
        RedConfig {
            num_layers: 8,
            channels: 32,
            kernel_size: 3,
            seed: 0,
        }
    }
}

impl RedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 || self.num_layers % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "num_layers must be even and >= 2, got {}",
                self.num_layers
            )));
        }
        if self.channels < 1 {
            return Err(Error::InvalidConfig("channels must be >= 1".into()));
        }
        if self.kernel_size < 1 || self.kernel_size % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "kernel_size must be odd and >= 1, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    fn half(&self) -> usize {
        self.num_layers / 2
    }
}

/// Kernel + bias pair of one layer.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub kernels: Tensor,
    pub bias: Tensor,
}

/// The denoising network F plus its configuration.
#[derive(Clone, Debug)]
pub struct RedModel {
    config: RedConfig,
    /// Conv layers; kernels are `[C_out, C_in, k, k]`.
    encoder: Vec<ConvParams>,
    /// Transposed-conv layers; kernels are `[C_in, C_out, k, k]`.
    decoder: Vec<ConvParams>,
}

/// Tape ids of one registered model, in [`RedModel::parameters`] order.
pub struct ModelHandles {
    encoder: Vec<(TensorId, TensorId)>,
    decoder: Vec<(TensorId, TensorId)>,
}

impl ModelHandles {
    /// Flat id list matching [`RedModel::parameters`] ordering.
    pub fn param_ids(&self) -> Vec<TensorId> {
        self.encoder
            .iter()
            .chain(self.decoder.iter())
            .flat_map(|&(k, b)| [k, b])
            .collect()
    }
}

/// Forward outputs: the predicted noise and the denoised image.
pub struct ForwardOut {
    pub residual: TensorId,
    pub denoised: TensorId,
}

impl RedModel {
    /// Builds a model with seeded uniform weights scaled by `1/sqrt(fan_in)`,
    /// zero biases, and an all-zero final decoder layer.
    pub fn build(config: RedConfig) -> Result<RedModel> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (c, k, half) = (config.channels, config.kernel_size, config.half());

        let mut draw = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            Tensor::from_vec(shape, data).expect("valid kernel shape")
        };

        let mut encoder = Vec::with_capacity(half);
        for layer in 0..half {
            let c_in = if layer == 0 { 1 } else { c };
            encoder.push(ConvParams {
                kernels: draw(&[c, c_in, k, k], c_in * k * k),
                bias: Tensor::zeros(&[c]),
            });
        }
        let mut decoder = Vec::with_capacity(half);
        for layer in 0..half {
            let c_out = if layer == half - 1 { 1 } else { c };
            decoder.push(if layer == half - 1 {
                // Identity start: F(x) = 0 until training moves it.
                ConvParams {
                    kernels: Tensor::zeros(&[c, c_out, k, k]),
                    bias: Tensor::zeros(&[c_out]),
                }
            } else {
                ConvParams {
                    kernels: draw(&[c, c_out, k, k], c * k * k),
                    bias: Tensor::zeros(&[c_out]),
                }
            });
        }
        Ok(RedModel {
            config,
            encoder,
            decoder,
        })
    }

    /// Reassembles a model from a config and parameter tensors in
    /// [`RedModel::parameters`] order (checkpoint loading).
    pub fn from_parameters(config: RedConfig, params: Vec<Tensor>) -> Result<RedModel> {
        config.validate()?;
        let half = config.half();
        if params.len() != 4 * half {
            return Err(Error::LengthMismatch {
                expected: 4 * half,
                got: params.len(),
            });
        }
        let mut model = RedModel::build(config)?;
        {
            let expected: Vec<&Tensor> = model.parameters();
            for (have, want) in params.iter().zip(&expected) {
                if have.shape() != want.shape() {
                    return Err(Error::ShapeMismatch(format!(
                        "checkpoint tensor shape {:?}, model expects {:?}",
                        have.shape(),
                        want.shape()
                    )));
                }
            }
        }
        for (slot, value) in model.parameters_mut().into_iter().zip(params) {
            *slot = value;
        }
        Ok(model)
    }

    pub fn config(&self) -> &RedConfig {
        &self.config
    }

    /// Flat parameter list: encoder kernels/bias pairs, then decoder pairs.
    /// Ordering is stable across calls.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.encoder
            .iter()
            .chain(self.decoder.iter())
            .flat_map(|p| [&p.kernels, &p.bias])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder
            .iter_mut()
            .chain(self.decoder.iter_mut())
            .flat_map(|p| [&mut p.kernels, &mut p.bias])
            .collect()
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|t| t.numel()).sum()
    }

    /// Adds `deltas` elementwise to the parameters, in the same order as
    /// [`RedModel::parameters`].
    pub fn apply_update(&mut self, deltas: &[Tensor]) -> Result<()> {
        let mut params = self.parameters_mut();
        if deltas.len() != params.len() {
            return Err(Error::LengthMismatch {
                expected: params.len(),
                got: deltas.len(),
            });
        }
        for (param, delta) in params.iter_mut().zip(deltas) {
            if param.shape() != delta.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "update shape {:?} vs parameter {:?}",
                    delta.shape(),
                    param.shape()
                )));
            }
            for (p, d) in param.data_mut().iter_mut().zip(delta.data()) {
                *p += d;
            }
        }
        Ok(())
    }

    /// Registers all parameters on a tape as gradient targets.
    pub fn register(&self, tape: &mut Tape) -> ModelHandles {
        let reg = |tape: &mut Tape, layers: &[ConvParams]| {
            layers
                .iter()
                .map(|p| (tape.param(p.kernels.clone()), tape.param(p.bias.clone())))
                .collect()
        };
        ModelHandles {
            encoder: reg(tape, &self.encoder),
            decoder: reg(tape, &self.decoder),
        }
    }

    /// Registers all parameters as constants (inference, no gradients).
    pub fn register_frozen(&self, tape: &mut Tape) -> ModelHandles {
        let reg = |tape: &mut Tape, layers: &[ConvParams]| {
            layers
                .iter()
                .map(|p| {
                    (
                        tape.constant(p.kernels.clone()),
                        tape.constant(p.bias.clone()),
                    )
                })
                .collect()
        };
        ModelHandles {
            encoder: reg(tape, &self.encoder),
            decoder: reg(tape, &self.decoder),
        }
    }

    /// Runs the network on a registered tape: `x` must be a `[1, H, W]`
    /// tensor id with `H, W >= kernel_size`.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        handles: &ModelHandles,
        x: TensorId,
    ) -> Result<ForwardOut> {
        let (c, h, w) = tape.value(x).chw()?;
        let k = self.config.kernel_size;
        if c != 1 {
            return Err(Error::ShapeMismatch(format!(
                "denoiser input must have 1 channel, got {c}"
            )));
        }
        if h < k || w < k {
            return Err(Error::ShapeMismatch(format!(
                "input {h}x{w} smaller than kernel {k}"
            )));
        }
        let pad = (k - 1) / 2;
        let half = self.config.half();

        let mut enc_out = Vec::with_capacity(half);
        let mut cur = x;
        for &(kernels, bias) in &handles.encoder {
            let conv = tape.conv2d(cur, kernels, bias, 1, pad)?;
            cur = tape.relu(conv);
            enc_out.push(cur);
        }
        for (j, &(kernels, bias)) in handles.decoder.iter().enumerate() {
            let deconv = tape.conv2d_transposed(cur, kernels, bias, 1, pad)?;
            if j + 1 == half {
                cur = deconv; // signed residual head: no skip, no ReLU
            } else {
                // mirror pairing: decoder j takes encoder half-1-j's output
                let skip = enc_out[half - 2 - j];
                let summed = tape.add(deconv, skip)?;
                cur = tape.relu(summed);
            }
        }
        let residual = cur;
        let denoised = tape.sub(x, residual)?;
        Ok(ForwardOut { residual, denoised })
    }

    /// Convenience forward on a fresh tape without gradients; returns the
    /// (residual, denoised) tensors by value.
    pub fn forward_image(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let handles = self.register_frozen(&mut tape);
        let mut input = x.clone();
        input.requires_grad = false;
        let xid = tape.leaf(input);
        let out = self.forward_with(&mut tape, &handles, xid)?;
        Ok((
            tape.value(out.residual).clone(),
            tape.value(out.denoised).clone(),
        ))
    }
}
