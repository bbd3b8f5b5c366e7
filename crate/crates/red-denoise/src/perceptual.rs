//! Fixed feature extractor and the joint pixel + feature-space objective.
//!
//! The extractor is a bias-free stack of stride-2 convolutions with ReLU,
//! seeded once and never trained; it stands in for a pretrained loss
//! network. The perceptual term is the squared Euclidean distance between
//! the tapped feature maps of two images, normalized by the feature map's
//! spatial area (width·height, channel count deliberately excluded).
//!
//! Stride-2 stages first crop even extents down by one row/column so that
//! the convolution's exact-division output contract holds at every stage;
//! the resulting extents halve exactly: 64 → 32 → 16 → 8.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{rtf1_from_bytes, rtf1_to_bytes};
use crate::tensor::{conv_out_extent, Tape, Tensor, TensorId};

/// Seed of the default extractor. All trainers and evaluators share one
/// fixed feature space unless a config overrides it.
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x0fea_0701;

const STAGE_CHANNELS: [usize; 3] = [16, 32, 64];
const STAGE_KERNEL: usize = 3;
const STAGE_STRIDE: usize = 2;

const WEIGHTS_MAGIC: &str = "REDPHI1";

/// Immutable convolutional stack providing the feature map for the
/// perceptual loss.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    /// Stage kernels, each `[C_out, C_in, k, k]`; no biases by construction.
    stages: Vec<Tensor>,
    tap_index: usize,
}

impl FeatureExtractor {
    /// Builds the default 3-stage extractor (16/32/64 channels, kernel 3,
    /// stride 2) from a seed, tapping the last stage.
    pub fn seeded(seed: u64) -> Self {
        FeatureExtractor::with_tap(seed, STAGE_CHANNELS.len() - 1)
            .expect("default tap index is valid")
    }

    pub fn with_tap(seed: u64, tap_index: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(STAGE_CHANNELS.len());
        let mut c_in = 1;
        for &c_out in &STAGE_CHANNELS {
            let fan_in = c_in * STAGE_KERNEL * STAGE_KERNEL;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n = c_out * c_in * STAGE_KERNEL * STAGE_KERNEL;
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            stages.push(
                Tensor::from_vec(&[c_out, c_in, STAGE_KERNEL, STAGE_KERNEL], data)
                    .expect("valid stage shape"),
            );
            c_in = c_out;
        }
        Self::from_stages(stages, tap_index)
    }

    fn from_stages(stages: Vec<Tensor>, tap_index: usize) -> Result<Self> {
        if tap_index >= stages.len() {
            return Err(Error::InvalidConfig(format!(
                "tap_index {tap_index} out of range for {} stages",
                stages.len()
            )));
        }
        let mut c_in = 1;
        for (i, s) in stages.iter().enumerate() {
            let shape = s.shape();
            if shape.len() != 4 || shape[1] != c_in || shape[2] % 2 == 0 || shape[2] != shape[3] {
                return Err(Error::InvalidConfig(format!(
                    "stage {i} kernel shape {shape:?} invalid (want [C_out, {c_in}, k, k], k odd)"
                )));
            }
            c_in = shape[0];
        }
        Ok(FeatureExtractor { stages, tap_index })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn tap_index(&self) -> usize {
        self.tap_index
    }

    pub fn stage_kernels(&self, i: usize) -> &Tensor {
        &self.stages[i]
    }

    /// Writes stage weights as a manifest header plus RTF1 blobs.
    pub fn save_weights(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let mut header = format!(
            "{WEIGHTS_MAGIC}\nstages={}\ntap={}\n",
            self.stages.len(),
            self.tap_index
        );
        for (i, s) in self.stages.iter().enumerate() {
            let dims: Vec<String> = s.shape().iter().map(|e| e.to_string()).collect();
            header.push_str(&format!("stage{i}={}\n", dims.join(",")));
        }
        header.push('\n');
        out.extend_from_slice(header.as_bytes());
        for s in &self.stages {
            out.extend_from_slice(&rtf1_to_bytes(s));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Loads externally produced stage weights (same layout as
    /// [`FeatureExtractor::save_weights`]).
    pub fn from_weight_file(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: &str| Error::format("extractor weights", path, reason);
        let header_end = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| bad("missing blank line after header"))?;
        let header =
            std::str::from_utf8(&bytes[..header_end]).map_err(|_| bad("non-UTF8 header"))?;
        let mut lines = header.lines();
        if lines.next() != Some(WEIGHTS_MAGIC) {
            return Err(Error::VersionMismatch);
        }
        let mut stages_count = None;
        let mut tap = None;
        let mut shapes: Vec<(usize, Vec<usize>)> = Vec::new();
        for line in lines {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad("header line is not key=value"))?;
            match key {
                "stages" => stages_count = value.parse().ok(),
                "tap" => tap = value.parse().ok(),
                k if k.starts_with("stage") => {
                    let idx: usize = k[5..].parse().map_err(|_| bad("bad stage index"))?;
                    let dims: Option<Vec<usize>> =
                        value.split(',').map(|d| d.trim().parse().ok()).collect();
                    shapes.push((idx, dims.ok_or_else(|| bad("bad stage shape"))?));
                }
                _ => return Err(bad(&format!("unknown header key {key}"))),
            }
        }
        let stages_count: usize = stages_count.ok_or_else(|| bad("missing stages count"))?;
        let tap: usize = tap.ok_or_else(|| bad("missing tap index"))?;
        if shapes.len() != stages_count {
            return Err(bad("stage shape count disagrees with stages="));
        }
        shapes.sort_by_key(|&(i, _)| i);

        let mut offset = header_end + 2;
        let mut stages = Vec::with_capacity(stages_count);
        for (i, declared) in shapes {
            let (tensor, used) = rtf1_from_bytes(&bytes[offset..], path)?;
            if tensor.shape() != declared.as_slice() {
                return Err(bad(&format!(
                    "stage {i} shape {:?} disagrees with manifest {declared:?}",
                    tensor.shape()
                )));
            }
            stages.push(tensor);
            offset += used;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after stage tensors"));
        }
        Self::from_stages(stages, tap)
    }

    /// Registers the tapped stages on a tape and applies them to `image`:
    /// per stage, crop-to-odd, stride-2 convolution (zero bias), ReLU.
    /// Gradients flow to the image, never to the stage weights.
    pub fn apply(&self, tape: &mut Tape, image: TensorId) -> Result<TensorId> {
        let (c, _, _) = tape.value(image).chw()?;
        if c != 1 {
            return Err(Error::ShapeMismatch(format!(
                "extractor input must have 1 channel, got {c}"
            )));
        }
        let mut cur = image;
        for (i, stage) in self.stages.iter().take(self.tap_index + 1).enumerate() {
            let k = stage.shape()[2];
            let pad = (k - 1) / 2;
            let (_, h, w) = tape.value(cur).chw()?;
            // odd extent keeps (H + 2p − k) divisible by the stride of 2
            let (ch, cw) = (h - (h + 1) % 2, w - (w + 1) % 2);
            let small = |extent: usize| {
                conv_out_extent(extent, k, STAGE_STRIDE, pad).map_or(true, |e| e == 0)
            };
            if ch == 0 || cw == 0 || small(ch) || small(cw) {
                return Err(Error::ImageTooSmall(format!(
                    "stage {i} input {h}x{w} collapses to an empty feature map"
                )));
            }
            if (ch, cw) != (h, w) {
                cur = tape.crop(cur, ch, cw)?;
            }
            let zero_bias = tape.constant(Tensor::zeros(&[stage.shape()[0]]));
            let weights = tape.constant(stage.clone());
            let conv = tape.conv2d(cur, weights, zero_bias, STAGE_STRIDE, pad)?;
            cur = tape.relu(conv);
        }
        Ok(cur)
    }

    /// Convenience: extracts the tapped feature map of a plain image.
    pub fn extract_features(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut input = image.clone();
        input.requires_grad = false;
        let id = tape.leaf(input);
        let features = self.apply(&mut tape, id)?;
        Ok(tape.value(features).clone())
    }
}

/// Squared Euclidean distance between tapped feature maps, normalized by
/// the feature map's spatial area.
pub fn perceptual_loss(
    tape: &mut Tape,
    phi: &FeatureExtractor,
    denoised: TensorId,
    target: TensorId,
) -> Result<TensorId> {
    if tape.value(denoised).shape() != tape.value(target).shape() {
        return Err(Error::ShapeMismatch(format!(
            "perceptual loss inputs {:?} vs {:?}",
            tape.value(denoised).shape(),
            tape.value(target).shape()
        )));
    }
    let fd = phi.apply(tape, denoised)?;
    let ft = phi.apply(tape, target)?;
    let (_, fh, fw) = tape.value(fd).chw()?;
    let diff = tape.sub(fd, ft)?;
    let ss = tape.sum_squares(diff);
    Ok(tape.scale(ss, 1.0 / (fh * fw) as f64))
}

/// Tape ids of the joint objective and its logged parts.
pub struct JointLoss {
    pub total: TensorId,
    pub mse: TensorId,
    pub perceptual: TensorId,
}

/// `total = mse(denoised, target) + lambda_p · perceptual(denoised, target)`.
pub fn joint_loss(
    tape: &mut Tape,
    phi: &FeatureExtractor,
    denoised: TensorId,
    target: TensorId,
    lambda_p: f64,
) -> Result<JointLoss> {
    if lambda_p < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "lambda_p must be >= 0, got {lambda_p}"
        )));
    }
    let mse = tape.mse_loss(denoised, target)?;
    let perceptual = perceptual_loss(tape, phi, denoised, target)?;
    let weighted = tape.scale(perceptual, lambda_p);
    let total = tape.add(mse, weighted)?;
    Ok(JointLoss {
        total,
        mse,
        perceptual,
    })
}
