//! Image quality metrics (RMSE, PSNR, SSIM) and dataset-level evaluation.
//!
//! SSIM uses 8×8 non-overlapping blocks with the standard constants
//! `C1 = (0.01·peak)²`, `C2 = (0.03·peak)²` and population (divide by n)
//! block statistics; trailing rows/columns that do not fill a block are
//! ignored. PSNR reports `+inf` for identical images; report rows carry
//! that through as the string `inf`.

use crate::error::{Error, Result};
use crate::io::Manifest;
use crate::tensor::Tensor;

const SSIM_BLOCK: usize = 8;

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Root of the mean squared difference.
pub fn rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape(a, b, "rmse")?;
    let acc: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok((acc / a.numel() as f64).sqrt())
}

/// Peak signal-to-noise ratio in dB: `10·log10(peak² / mse)`.
/// Returns `+inf` when the images are identical.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    check_same_shape(a, b, "psnr")?;
    if !(peak > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "peak must be > 0, got {peak}"
        )));
    }
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean structural similarity over 8×8 non-overlapping blocks.
pub fn ssim(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    check_same_shape(a, b, "ssim")?;
    let (ca, h, w) = a.chw()?;
    if ca != 1 {
        return Err(Error::ShapeMismatch(format!(
            "ssim expects single-channel images, got {ca} channels"
        )));
    }
    if h < SSIM_BLOCK || w < SSIM_BLOCK {
        return Err(Error::SizeTooSmall {
            got: h.min(w),
            min: SSIM_BLOCK,
        });
    }
    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let (da, db) = (a.data(), b.data());
    let per_block = (SSIM_BLOCK * SSIM_BLOCK) as f64;

    let mut total = 0.0;
    let mut blocks = 0usize;
    for by in 0..h / SSIM_BLOCK {
        for bx in 0..w / SSIM_BLOCK {
            let mut sum_a = 0.0;
            let mut sum_b = 0.0;
            for y in 0..SSIM_BLOCK {
                let row = (by * SSIM_BLOCK + y) * w + bx * SSIM_BLOCK;
                for x in 0..SSIM_BLOCK {
                    sum_a += da[row + x];
                    sum_b += db[row + x];
                }
            }
            let mu_a = sum_a / per_block;
            let mu_b = sum_b / per_block;
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for y in 0..SSIM_BLOCK {
                let row = (by * SSIM_BLOCK + y) * w + bx * SSIM_BLOCK;
                for x in 0..SSIM_BLOCK {
                    let ea = da[row + x] - mu_a;
                    let eb = db[row + x] - mu_b;
                    var_a += ea * ea;
                    var_b += eb * eb;
                    cov += ea * eb;
                }
            }
            var_a /= per_block;
            var_b /= per_block;
            cov /= per_block;
            total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            blocks += 1;
        }
    }
    Ok(total / blocks as f64)
}

/// SSIM/RMSE/PSNR of one image against its reference, at peak 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub ssim: f64,
    pub rmse: f64,
    pub psnr_db: f64,
}

pub fn measure(image: &Tensor, reference: &Tensor) -> Result<Metrics> {
    Ok(Metrics {
        ssim: ssim(image, reference, 1.0)?,
        rmse: rmse(image, reference)?,
        psnr_db: psnr(image, reference, 1.0)?,
    })
}

/// One manifest entry's evaluation: denoised-vs-clean and noisy-vs-clean,
/// or the per-record failure that prevented it.
#[derive(Clone, Debug)]
pub struct PairRecord {
    pub id: String,
    pub denoised: Option<Metrics>,
    pub noisy: Option<Metrics>,
    pub error: Option<String>,
}

/// Per-metric mean and population standard deviation.
#[derive(Clone, Copy, Debug)]
pub struct Aggregate {
    pub mean: Metrics,
    pub std: Metrics,
}

fn aggregate(values: &[Metrics]) -> Option<Aggregate> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean_of = |f: fn(&Metrics) -> f64| values.iter().map(f).sum::<f64>() / n;
    let mean = Metrics {
        ssim: mean_of(|m| m.ssim),
        rmse: mean_of(|m| m.rmse),
        psnr_db: mean_of(|m| m.psnr_db),
    };
    let std_of = |f: fn(&Metrics) -> f64, mu: f64| {
        (values
            .iter()
            .map(|m| (f(m) - mu) * (f(m) - mu))
            .sum::<f64>()
            / n)
            .sqrt()
    };
    let std = Metrics {
        ssim: std_of(|m| m.ssim, mean.ssim),
        rmse: std_of(|m| m.rmse, mean.rmse),
        psnr_db: std_of(|m| m.psnr_db, mean.psnr_db),
    };
    Some(Aggregate { mean, std })
}

/// Evaluation of a whole manifest, in manifest order.
#[derive(Clone, Debug)]
pub struct QualityReport {
    pub model_id: String,
    pub manifest_id: String,
    pub records: Vec<PairRecord>,
    pub denoised_agg: Option<Aggregate>,
    pub noisy_agg: Option<Aggregate>,
}

/// Runs `denoise` over every manifest pair and measures both the denoised
/// and the untouched noisy image against the clean reference. Denoised
/// output is clamped to [0, 1] before measurement. Per-record failures are
/// recorded in the report rather than aborting the run.
pub fn evaluate(
    manifest: &Manifest,
    model_id: &str,
    mut denoise: impl FnMut(&Tensor) -> Result<Tensor>,
) -> QualityReport {
    let mut records = Vec::with_capacity(manifest.entries.len());
    for index in 0..manifest.entries.len() {
        let id = manifest.entry_id(index);
        let outcome = (|| -> Result<(Metrics, Metrics)> {
            let (clean, noisy) = manifest.load_pair(index)?;
            let mut denoised = denoise(&noisy)?;
            for v in denoised.data_mut() {
                *v = v.clamp(0.0, 1.0);
            }
            Ok((measure(&denoised, &clean)?, measure(&noisy, &clean)?))
        })();
        records.push(match outcome {
            Ok((denoised, noisy)) => PairRecord {
                id,
                denoised: Some(denoised),
                noisy: Some(noisy),
                error: None,
            },
            Err(e) => PairRecord {
                id,
                denoised: None,
                noisy: None,
                error: Some(e.to_string()),
            },
        });
    }
    let denoised_agg = aggregate(
        &records
            .iter()
            .filter_map(|r| r.denoised)
            .collect::<Vec<_>>(),
    );
    let noisy_agg = aggregate(&records.iter().filter_map(|r| r.noisy).collect::<Vec<_>>());
    QualityReport {
        model_id: model_id.to_string(),
        manifest_id: String::new(),
        records,
        denoised_agg,
        noisy_agg,
    }
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

impl QualityReport {
    /// Tab-separated rendering: `#model`/`#manifest` headers, one line per
    /// record and kind (`<id>.denoised`, `<id>.noisy`), `#failed` comment
    /// lines for broken records, and `#mean.*` / `#std.*` footers.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("#model\t{}\n", self.model_id));
        out.push_str(&format!("#manifest\t{}\n", self.manifest_id));
        out.push_str("id\tssim\trmse\tpsnr_db\n");
        let row = |out: &mut String, id: &str, m: &Metrics| {
            out.push_str(&format!(
                "{id}\t{}\t{}\t{}\n",
                fmt_metric(m.ssim),
                fmt_metric(m.rmse),
                fmt_metric(m.psnr_db)
            ));
        };
        for r in &self.records {
            if let Some(e) = &r.error {
                out.push_str(&format!("#failed\t{}\t{}\n", r.id, e));
                continue;
            }
            if let Some(m) = &r.denoised {
                row(&mut out, &format!("{}.denoised", r.id), m);
            }
            if let Some(m) = &r.noisy {
                row(&mut out, &format!("{}.noisy", r.id), m);
            }
        }
        for (label, agg) in [("denoised", &self.denoised_agg), ("noisy", &self.noisy_agg)] {
            if let Some(a) = agg {
                row(&mut out, &format!("#mean.{label}"), &a.mean);
                row(&mut out, &format!("#std.{label}"), &a.std);
            }
        }
        out
    }
}
