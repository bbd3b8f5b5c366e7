//! Patch-based optimization of the denoiser under the joint loss,
//! checkpointing, and run history.
//!
//! Determinism contract: a (config, seed) pair fully determines the final
//! model bit for bit. All randomness flows from `TrainConfig::seed` through
//! one master stream; batch patches may be evaluated on worker threads but
//! gradients are reduced in a fixed patch order, so the thread count never
//! changes the result.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{fnv1a64, parse_kv, rtf1_from_bytes, rtf1_to_bytes, Manifest};
use crate::perceptual::{joint_loss, FeatureExtractor, DEFAULT_EXTRACTOR_SEED};
use crate::red_model::{RedConfig, RedModel};
use crate::tensor::{Tape, Tensor};

const CHECKPOINT_MAGIC: &[u8; 6] = b"RDCK1\n";

/// Training hyperparameters. The file form is `key=value` lines with the
/// same names as the fields (plus `num_layers`/`layers`, `channels`,
/// `kernel_size`, `model_seed` for the embedded model config).
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    pub patch_size: usize,
    pub patches_per_image: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda_p: f64,
    /// Iterations trained with the perceptual weight forced to zero before
    /// the joint objective takes over.
    pub warmup_iterations: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub extractor_seed: u64,
    pub red: RedConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            manifest: PathBuf::new(),
            patch_size: 32,
            patches_per_image: 16,
            batch_size: 8,
            iterations: 2000,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            lambda_p: 0.1,
            warmup_iterations: 0,
            seed: 0,
            checkpoint_every: 500,
            extractor_seed: DEFAULT_EXTRACTOR_SEED,
            red: RedConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.red.validate()?;
        if self.manifest.as_os_str().is_empty() {
            return Err(Error::InvalidConfig("manifest path is required".into()));
        }
        if self.patch_size < self.red.kernel_size {
            return Err(Error::InvalidConfig(format!(
                "patch_size {} smaller than kernel_size {}",
                self.patch_size, self.red.kernel_size
            )));
        }
        if self.batch_size < 1 || self.iterations < 1 || self.patches_per_image < 1 {
            return Err(Error::InvalidConfig(
                "batch_size, iterations and patches_per_image must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::InvalidConfig("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig("adam_eps must be > 0".into()));
        }
        if self.lambda_p < 0.0 {
            return Err(Error::InvalidConfig("lambda_p must be >= 0".into()));
        }
        if self.checkpoint_every < 1 {
            return Err(Error::InvalidConfig("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }

    /// Parses the key=value config format. `manifest_base` resolves a
    /// relative manifest path.
    pub fn parse(text: &str, manifest_base: &Path) -> Result<TrainConfig> {
        let pairs =
            parse_kv(text).map_err(|reason| Error::InvalidConfig(format!("config: {reason}")))?;
        let mut config = TrainConfig::default();
        let mut model_seed: Option<u64> = None;
        for (key, value) in pairs {
            let number = || -> Result<f64> {
                value
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad value for {key}: {value}")))
            };
            match key.as_str() {
                "manifest" => config.manifest = manifest_base.join(&value),
                "patch_size" => config.patch_size = number()? as usize,
                "patches_per_image" => config.patches_per_image = number()? as usize,
                "batch_size" => config.batch_size = number()? as usize,
                "iterations" => config.iterations = number()? as usize,
                "learning_rate" => config.learning_rate = number()?,
                "adam_beta1" => config.adam_beta1 = number()?,
                "adam_beta2" => config.adam_beta2 = number()?,
                "adam_eps" => config.adam_eps = number()?,
                "lambda_p" => config.lambda_p = number()?,
                "warmup_iterations" => config.warmup_iterations = number()? as usize,
                "seed" => config.seed = number()? as u64,
                "checkpoint_every" => config.checkpoint_every = number()? as usize,
                "extractor_seed" => config.extractor_seed = number()? as u64,
                "num_layers" | "layers" => config.red.num_layers = number()? as usize,
                "channels" => config.red.channels = number()? as usize,
                "kernel_size" => config.red.kernel_size = number()? as usize,
                "model_seed" => model_seed = Some(number()? as u64),
                other => return Err(Error::InvalidConfig(format!("unknown config key {other}"))),
            }
        }
        config.red.seed = model_seed.unwrap_or(config.seed);
        config.validate()?;
        Ok(config)
    }
}

/// One logged training iteration. `lambda_p` is the weight in effect at
/// that iteration (zero during warmup), so
/// `total == mse + lambda_p · perceptual` holds exactly for every record.
#[derive(Clone, Copy, Debug)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub total: f64,
    pub mse: f64,
    pub perceptual: f64,
    pub lambda_p: f64,
}

#[derive(Clone, Debug)]
pub struct CheckpointRecord {
    pub iteration: usize,
    pub file: String,
    pub seconds: f64,
}

/// Loss trajectory, checkpoint log, and the hash of the sampled patch
/// position sequence (equal across runs that saw identical data order).
#[derive(Clone, Debug, Default)]
pub struct RunHistory {
    pub records: Vec<HistoryRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub patch_hash: u64,
}

impl RunHistory {
    /// Tab-separated rendering; checkpoint wall-clock lines are comments so
    /// the record table stays machine-readable.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "#patch_positions_hash\t{:016x}\n",
            self.patch_hash
        ));
        out.push_str("iteration\ttotal\tmse\tperceptual\tlambda_p\n");
        for r in &self.records {
            out.push_str(&format!(
                "{}\t{:e}\t{:e}\t{:e}\t{}\n",
                r.iteration, r.total, r.mse, r.perceptual, r.lambda_p
            ));
        }
        for c in &self.checkpoints {
            out.push_str(&format!(
                "#checkpoint\t{}\t{}\t{:.3}\n",
                c.iteration, c.file, c.seconds
            ));
        }
        out
    }
}

/// Axis-aligned patch pairs cut from identical positions of the noisy and
/// clean images, at seeded uniform-random offsets.
pub fn extract_patches(
    noisy: &Tensor,
    clean: &Tensor,
    patch_size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<(Tensor, Tensor)>> {
    Ok(extract_patches_at(noisy, clean, patch_size, count, seed)?
        .into_iter()
        .map(|(n, c, _)| (n, c))
        .collect())
}

type PatchWithPosition = (Tensor, Tensor, (usize, usize));

fn extract_patches_at(
    noisy: &Tensor,
    clean: &Tensor,
    patch_size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<PatchWithPosition>> {
    if noisy.shape() != clean.shape() {
        return Err(Error::ShapeMismatch(format!(
            "patch extraction: noisy {:?} vs clean {:?}",
            noisy.shape(),
            clean.shape()
        )));
    }
    let (c, h, w) = noisy.chw()?;
    if c != 1 {
        return Err(Error::ShapeMismatch(format!(
            "patch extraction expects single-channel images, got {c}"
        )));
    }
    if patch_size > h || patch_size > w {
        return Err(Error::PatchTooLarge {
            patch: patch_size,
            image: h.min(w),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cut = |img: &Tensor, row: usize, col: usize| {
        let mut data = Vec::with_capacity(patch_size * patch_size);
        for y in 0..patch_size {
            let at = (row + y) * w + col;
            data.extend_from_slice(&img.data()[at..at + patch_size]);
        }
        Tensor::from_vec(&[1, patch_size, patch_size], data).expect("valid patch shape")
    };
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let row = rng.random_range(0..=h - patch_size);
        let col = rng.random_range(0..=w - patch_size);
        out.push((cut(noisy, row, col), cut(clean, row, col), (row, col)));
    }
    Ok(out)
}

/// Worker thread cap: `RED_DENOISE_THREADS`, defaulting to the number of
/// processors.
pub fn worker_threads() -> usize {
    std::env::var("RED_DENOISE_THREADS")
        .ok()
        .and_then(|s| s.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl AdamState {
    fn new(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// Bias-corrected Adam deltas (already negated for `apply_update`).
    fn deltas(&mut self, grads: &[Vec<f64>], config: &TrainConfig) -> Vec<Vec<f64>> {
        self.t += 1;
        let (b1, b2) = (config.adam_beta1, config.adam_beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        grads
            .iter()
            .enumerate()
            .map(|(k, g)| {
                let (m, v) = (&mut self.m[k], &mut self.v[k]);
                g.iter()
                    .enumerate()
                    .map(|(j, &gj)| {
                        m[j] = b1 * m[j] + (1.0 - b1) * gj;
                        v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                        let m_hat = m[j] / bc1;
                        let v_hat = v[j] / bc2;
                        -config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps)
                    })
                    .collect()
            })
            .collect()
    }
}

struct PatchResult {
    grads: Vec<Vec<f64>>,
    total: f64,
    mse: f64,
    perceptual: f64,
}

/// Forward + backward of one patch; gradients in `parameters()` order.
fn eval_patch(
    model: &RedModel,
    phi: &FeatureExtractor,
    noisy: &Tensor,
    clean: &Tensor,
    lambda_p: f64,
) -> Result<PatchResult> {
    let mut tape = Tape::new();
    let handles = model.register(&mut tape);
    let x = tape.constant(noisy.clone());
    let y = tape.constant(clean.clone());
    let out = model.forward_with(&mut tape, &handles, x)?;
    let (total_id, mse_id, per_value);
    if lambda_p > 0.0 {
        let jl = joint_loss(&mut tape, phi, out.denoised, y, lambda_p)?;
        total_id = jl.total;
        mse_id = jl.mse;
        per_value = tape.value(jl.perceptual).data()[0];
    } else {
        // warmup / pixel-only phase: skip the extractor entirely
        let mse = tape.mse_loss(out.denoised, y)?;
        total_id = mse;
        mse_id = mse;
        per_value = 0.0;
    }
    let total = tape.value(total_id).data()[0];
    let mse = tape.value(mse_id).data()[0];
    tape.backward(total_id)?;
    let grads = handles
        .param_ids()
        .into_iter()
        .map(|id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(id).numel()])
        })
        .collect();
    Ok(PatchResult {
        grads,
        total,
        mse,
        perceptual: per_value,
    })
}

/// Evaluates a batch of patches (possibly on worker threads) and reduces
/// gradients in fixed patch order.
fn eval_batch(
    model: &RedModel,
    phi: &FeatureExtractor,
    patches: &[&(Tensor, Tensor)],
    lambda_p: f64,
    threads: usize,
) -> Result<PatchResult> {
    let results: Vec<Result<PatchResult>> = if threads <= 1 || patches.len() <= 1 {
        patches
            .iter()
            .map(|(n, c)| eval_patch(model, phi, n, c, lambda_p))
            .collect()
    } else {
        let workers = threads.min(patches.len());
        let mut slots: Vec<Option<Result<PatchResult>>> =
            (0..patches.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let mut handles = Vec::with_capacity(workers);
            for worker in 0..workers {
                let patches = &patches;
                handles.push(scope.spawn(move || {
                    let mut mine = Vec::new();
                    let mut i = worker;
                    while i < patches.len() {
                        let (n, c) = patches[i];
                        mine.push((i, eval_patch(model, phi, n, c, lambda_p)));
                        i += workers;
                    }
                    mine
                }));
            }
            for handle in handles {
                for (slot, result) in handle.join().expect("patch worker panicked") {
                    slots[slot] = Some(result);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("slot filled")).collect()
    };

    let scale = 1.0 / patches.len() as f64;
    let mut combined: Option<PatchResult> = None;
    for result in results {
        let r = result?;
        match &mut combined {
            None => combined = Some(r),
            Some(acc) => {
                for (a, g) in acc.grads.iter_mut().zip(&r.grads) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                acc.total += r.total;
                acc.mse += r.mse;
                acc.perceptual += r.perceptual;
            }
        }
    }
    let mut acc = combined.expect("non-empty batch");
    for g in &mut acc.grads {
        for x in g.iter_mut() {
            *x *= scale;
        }
    }
    acc.total *= scale;
    acc.mse *= scale;
    acc.perceptual *= scale;
    Ok(acc)
}

/// Trains a model from scratch on the config's manifest. Checkpoints land
/// in `out_dir` every `checkpoint_every` iterations and at completion
/// (`model_final.rdck`), with the history beside them as `history.tsv`.
///
/// A non-finite loss aborts with [`Error::Diverged`]; checkpoints already
/// written stay on disk.
pub fn train(config: &TrainConfig, out_dir: &Path) -> Result<(RedModel, RunHistory)> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest = Manifest::read(&config.manifest)?;
    if manifest.entries.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "manifest {} lists no pairs",
            config.manifest.display()
        )));
    }

    let started = Instant::now();
    let phi = FeatureExtractor::seeded(config.extractor_seed);
    let mut model = RedModel::build(config.red.clone())?;
    let threads = worker_threads();

    // master stream: per-image patch seeds, then the batch sampler seed
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let patch_seeds: Vec<u64> = (0..manifest.entries.len())
        .map(|_| master.random())
        .collect();
    let batch_seed: u64 = master.random();

    let mut pool: Vec<(Tensor, Tensor)> = Vec::new();
    let mut position_bytes: Vec<u8> = Vec::new();
    for (i, &patch_seed) in patch_seeds.iter().enumerate() {
        let (clean, noisy) = manifest.load_pair(i)?;
        for (n, c, (row, col)) in extract_patches_at(
            &noisy,
            &clean,
            config.patch_size,
            config.patches_per_image,
            patch_seed,
        )? {
            position_bytes.extend_from_slice(&(i as u64).to_le_bytes());
            position_bytes.extend_from_slice(&(row as u64).to_le_bytes());
            position_bytes.extend_from_slice(&(col as u64).to_le_bytes());
            pool.push((n, c));
        }
    }

    let param_sizes: Vec<usize> = model.parameters().iter().map(|t| t.numel()).collect();
    let param_shapes: Vec<Vec<usize>> = model
        .parameters()
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    let mut adam = AdamState::new(&param_sizes);
    let mut rng_batch = ChaCha8Rng::seed_from_u64(batch_seed);
    let mut history = RunHistory::default();

    let save = |model: &RedModel,
                iteration: usize,
                name: String,
                history: &mut RunHistory|
     -> Result<()> {
        let path = out_dir.join(&name);
        save_checkpoint(model, &path)?;
        history.checkpoints.push(CheckpointRecord {
            iteration,
            file: name,
            seconds: started.elapsed().as_secs_f64(),
        });
        Ok(())
    };

    for iteration in 1..=config.iterations {
        let batch: Vec<&(Tensor, Tensor)> = (0..config.batch_size)
            .map(|_| {
                let idx = rng_batch.random_range(0..pool.len());
                position_bytes.extend_from_slice(&(idx as u64).to_le_bytes());
                &pool[idx]
            })
            .collect();
        let lambda_p = if iteration <= config.warmup_iterations {
            0.0
        } else {
            config.lambda_p
        };
        let result = eval_batch(&model, &phi, &batch, lambda_p, threads)?;
        if !result.total.is_finite() {
            history.patch_hash = fnv1a64(&position_bytes);
            let _ = std::fs::write(out_dir.join("history.tsv"), history.to_tsv());
            return Err(Error::Diverged { iteration });
        }
        history.records.push(HistoryRecord {
            iteration,
            total: result.total,
            mse: result.mse,
            perceptual: result.perceptual,
            lambda_p,
        });

        let deltas_raw = adam.deltas(&result.grads, config);
        let deltas: Vec<Tensor> = deltas_raw
            .into_iter()
            .zip(&param_shapes)
            .map(|(d, shape)| Tensor::from_vec(shape, d).expect("delta matches param shape"))
            .collect();
        model.apply_update(&deltas)?;

        if iteration % config.checkpoint_every == 0 && iteration != config.iterations {
            save(
                &model,
                iteration,
                format!("checkpoint_{iteration:06}.rdck"),
                &mut history,
            )?;
        }
    }
    save(
        &model,
        config.iterations,
        "model_final.rdck".to_string(),
        &mut history,
    )?;
    history.patch_hash = fnv1a64(&position_bytes);
    std::fs::write(out_dir.join("history.tsv"), history.to_tsv())
        .map_err(|e| Error::io(out_dir.join("history.tsv"), e))?;
    Ok((model, history))
}

// ── Checkpoints ─────────────────────────────────────────────────────

/// RDCK1 layout: 6-byte magic `RDCK1\n`, u32 config block length, the
/// config as key=value UTF-8, u32 parameter count, each parameter as an
/// RTF1 blob in `parameters()` order, and a trailing FNV-1a 64 checksum of
/// all preceding bytes.
pub fn save_checkpoint(model: &RedModel, path: &Path) -> Result<()> {
    let config = model.config();
    let block = format!(
        "num_layers={}\nchannels={}\nkernel_size={}\nseed={}\n",
        config.num_layers, config.channels, config.kernel_size, config.seed
    );
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(block.len() as u32).to_le_bytes());
    bytes.extend_from_slice(block.as_bytes());
    let params = model.parameters();
    bytes.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        bytes.extend_from_slice(&rtf1_to_bytes(p));
    }
    let checksum = fnv1a64(&bytes);
    bytes.extend_from_slice(&checksum.to_le_bytes());
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<RedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= CHECKPOINT_MAGIC.len() && &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC
    {
        return Err(Error::VersionMismatch);
    }
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 + 8 {
        return Err(Error::ChecksumMismatch);
    }
    let (payload, stored) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(stored.try_into().unwrap());
    if fnv1a64(payload) != stored {
        return Err(Error::ChecksumMismatch);
    }

    let bad = |reason: &str| Error::format("checkpoint", path, reason);
    let mut offset = CHECKPOINT_MAGIC.len();
    let block_len = u32::from_le_bytes(payload[offset..offset + 4].try_into().unwrap()) as usize;
    offset += 4;
    if payload.len() < offset + block_len + 4 {
        return Err(bad("config block overruns file"));
    }
    let block = std::str::from_utf8(&payload[offset..offset + block_len])
        .map_err(|_| bad("config block is not UTF-8"))?;
    offset += block_len;

    let mut config = RedConfig::default();
    for (key, value) in parse_kv(block).map_err(|r| bad(&r))? {
        let parsed: u64 = value
            .parse()
            .map_err(|_| bad(&format!("bad value for {key}")))?;
        match key.as_str() {
            "num_layers" => config.num_layers = parsed as usize,
            "channels" => config.channels = parsed as usize,
            "kernel_size" => config.kernel_size = parsed as usize,
            "seed" => config.seed = parsed,
            other => return Err(bad(&format!("unknown config key {other}"))),
        }
    }

    let count = u32::from_le_bytes(payload[offset..offset + 4].try_into().unwrap()) as usize;
    offset += 4;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let (tensor, used) = rtf1_from_bytes(&payload[offset..], path)?;
        params.push(tensor);
        offset += used;
    }
    if offset != payload.len() {
        return Err(bad("trailing bytes after parameters"));
    }
    RedModel::from_parameters(config, params)
}
