//! Synthetic phantoms and the low-dose acquisition pipeline:
//! parallel-beam projection, Poisson photon statistics, and filtered
//! back projection.
//!
//! Geometry: pixel (row y, col x) sits at continuous coordinates (x, y);
//! the rotation center is ((N−1)/2, (N−1)/2). Projection angles are
//! uniform in [0, π), detector spacing is one pixel. Phantom intensities
//! scale with 1/N so that line integrals stay within a few mean free
//! paths at any image size; this keeps the photon model well-conditioned
//! across the dose range used here.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Distinct RNG stream for photon noise inside [`make_pair`].
const NOISE_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Smallest supported phantom edge length.
pub const MIN_PHANTOM_SIZE: usize = 32;

/// One additive ellipse of a phantom.
#[derive(Clone, Debug)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub axes: (f64, f64),
    pub angle: f64,
    pub intensity: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (sin, cos) = self.angle.sin_cos();
        let u = (dx * cos + dy * sin) / self.axes.0;
        let v = (-dx * sin + dy * cos) / self.axes.1;
        u * u + v * v <= 1.0
    }
}

/// Ground-truth image: attenuation values in [0, 1] plus the ellipses
/// that generated them.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub image: Tensor,
    pub ellipses: Vec<Ellipse>,
}

/// Projection-domain data: one row per view angle, one column per detector.
#[derive(Clone, Debug)]
pub struct Sinogram {
    pub data: Tensor,
    pub views: usize,
    pub detectors: usize,
}

impl Sinogram {
    pub fn new(data: Tensor, views: usize, detectors: usize) -> Result<Self> {
        if data.shape() != [views, detectors] {
            return Err(Error::BadGeometry(format!(
                "sinogram data {:?} vs declared {views}x{detectors}",
                data.shape()
            )));
        }
        Ok(Sinogram {
            data,
            views,
            detectors,
        })
    }
}

/// Detector count that covers the full image diagonal.
pub fn detectors_for(size: usize) -> usize {
    (size as f64 * std::f64::consts::SQRT_2).ceil() as usize
}

/// Generates a random phantom: one large background ellipse plus 3–8
/// interior ellipses with distinct intensities, clamped to [0, 1].
pub fn make_phantom(seed: u64, size: usize) -> Result<Phantom> {
    if size < MIN_PHANTOM_SIZE {
        return Err(Error::SizeTooSmall {
            got: size,
            min: MIN_PHANTOM_SIZE,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f64;
    let c = (n - 1.0) / 2.0;
    // Attenuation scales with 1/N so line integrals are size-invariant;
    // the factor puts the longest paths near six mean free paths, which
    // keeps every ray well-measured at the doses used here while leaving
    // the low-dose reconstructions visibly noisy.
    let unit = 1.9 / n;

    let mut ellipses = Vec::new();
    let bg = Ellipse {
        center: (
            c + rng.random_range(-0.02..0.02) * n,
            c + rng.random_range(-0.02..0.02) * n,
        ),
        axes: (
            rng.random_range(0.36..0.46) * n,
            rng.random_range(0.34..0.44) * n,
        ),
        angle: rng.random_range(0.0..std::f64::consts::PI),
        intensity: rng.random_range(2.4..3.0) * unit,
    };
    let (bg_center, bg_axes) = (bg.center, bg.axes);
    ellipses.push(bg);

    let count = rng.random_range(3..=8);
    for _ in 0..count {
        let center = (
            bg_center.0 + rng.random_range(-0.55..0.55) * bg_axes.0,
            bg_center.1 + rng.random_range(-0.55..0.55) * bg_axes.1,
        );
        let magnitude = rng.random_range(0.5..2.5) * unit;
        let sign = if rng.random_range(0.0..1.0) < 0.35 {
            -1.0
        } else {
            1.0
        };
        ellipses.push(Ellipse {
            center,
            axes: (
                rng.random_range(0.04..0.16) * n,
                rng.random_range(0.04..0.16) * n,
            ),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            intensity: sign * magnitude,
        });
    }

    let mut data = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut v = 0.0;
            for e in &ellipses {
                if e.contains(x as f64, y as f64) {
                    v += e.intensity;
                }
            }
            data[y * size + x] = v.clamp(0.0, 1.0);
        }
    }
    Ok(Phantom {
        image: Tensor::from_vec(&[1, size, size], data)?,
        ellipses,
    })
}

fn bilinear(data: &[f64], n: usize, px: f64, py: f64) -> f64 {
    let x0 = px.floor();
    let y0 = py.floor();
    let fx = px - x0;
    let fy = py - y0;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let mut acc = 0.0;
    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
        let y = y0 + dy;
        if y < 0 || y >= n as isize || wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
            let x = x0 + dx;
            if x < 0 || x >= n as isize || wx == 0.0 {
                continue;
            }
            acc += wy * wx * data[y as usize * n + x as usize];
        }
    }
    acc
}

/// Parallel-beam Radon transform: line integrals by bilinear sampling at
/// unit steps along each ray; samples outside the image contribute 0.
pub fn radon(image: &Tensor, views: usize, detectors: usize) -> Result<Sinogram> {
    let (c, h, w) = image.chw()?;
    if c != 1 || h != w {
        return Err(Error::BadGeometry(format!(
            "radon expects a square single-channel image, got {c}x{h}x{w}"
        )));
    }
    let n = h;
    if views < 1 {
        return Err(Error::BadGeometry("views must be >= 1".into()));
    }
    if detectors < n {
        return Err(Error::BadGeometry(format!(
            "detectors {detectors} < image extent {n}"
        )));
    }
    let center = (n as f64 - 1.0) / 2.0;
    let det_center = (detectors as f64 - 1.0) / 2.0;
    let half_span = (n as f64 * std::f64::consts::SQRT_2 / 2.0).ceil() as i64 + 1;
    let data = image.data();

    let mut sino = vec![0.0; views * detectors];
    for v in 0..views {
        let theta = v as f64 * std::f64::consts::PI / views as f64;
        let (sin, cos) = theta.sin_cos();
        for d in 0..detectors {
            let s = d as f64 - det_center;
            let (ox, oy) = (center + s * cos, center + s * sin);
            let mut acc = 0.0;
            for t in -half_span..=half_span {
                let t = t as f64;
                acc += bilinear(data, n, ox - t * sin, oy + t * cos);
            }
            sino[v * detectors + d] = acc;
        }
    }
    Sinogram::new(
        Tensor::from_vec(&[views, detectors], sino)?,
        views,
        detectors,
    )
}

/// Applies the transmission photon model per ray: expected count
/// `I = N0·exp(−p)`, a Poisson draw clamped to at least one photon, and
/// the re-log `p' = −ln(c/N0)`.
pub fn simulate_low_dose(sino: &Sinogram, photons: f64, seed: u64) -> Result<Sinogram> {
    if !(photons > 0.0) {
        return Err(Error::BadGeometry(format!(
            "photon count must be positive, got {photons}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy: Vec<f64> = sino
        .data
        .data()
        .iter()
        .map(|&p| {
            let expected = photons * (-p).exp();
            let count = Poisson::new(expected)
                .map(|d| d.sample(&mut rng))
                .unwrap_or(0.0)
                .max(1.0);
            -(count / photons).ln()
        })
        .collect();
    Sinogram::new(
        Tensor::from_vec(&[sino.views, sino.detectors], noisy)?,
        sino.views,
        sino.detectors,
    )
}

/// Ram-Lak filtering of one projection row: zero-pad, multiply the DFT by
/// |f| (cycles per sample), inverse-transform, truncate.
struct RampFilter {
    len: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    ramp: Vec<f64>,
}

impl RampFilter {
    fn new(detectors: usize) -> Self {
        let len = (2 * detectors).next_power_of_two();
        let step = 2.0 * std::f64::consts::PI / len as f64;
        let cos = (0..len).map(|j| (step * j as f64).cos()).collect();
        let sin = (0..len).map(|j| (step * j as f64).sin()).collect();
        let ramp = (0..len)
            .map(|k| k.min(len - k) as f64 / len as f64)
            .collect();
        RampFilter {
            len,
            cos,
            sin,
            ramp,
        }
    }

    fn apply(&self, row: &[f64]) -> Vec<f64> {
        let len = self.len;
        // forward DFT of the zero-padded row
        let mut re = vec![0.0; len];
        let mut im = vec![0.0; len];
        for k in 0..len {
            let mut acc_re = 0.0;
            let mut acc_im = 0.0;
            for (m, &g) in row.iter().enumerate() {
                let j = (k * m) % len;
                acc_re += g * self.cos[j];
                acc_im -= g * self.sin[j];
            }
            re[k] = acc_re * self.ramp[k];
            im[k] = acc_im * self.ramp[k];
        }
        // inverse DFT, real part of the first `row.len()` samples
        let scale = 1.0 / len as f64;
        (0..row.len())
            .map(|m| {
                let mut acc = 0.0;
                for k in 0..len {
                    let j = (k * m) % len;
                    acc += re[k] * self.cos[j] - im[k] * self.sin[j];
                }
                acc * scale
            })
            .collect()
    }
}

/// Filtered back projection without the output clamp.
pub fn fbp_raw(sino: &Sinogram, size: usize) -> Result<Tensor> {
    if sino.detectors < size {
        return Err(Error::BadGeometry(format!(
            "{} detectors cannot reconstruct a {size}px image",
            sino.detectors
        )));
    }
    let filter = RampFilter::new(sino.detectors);
    let rows = sino.data.data();
    let filtered: Vec<Vec<f64>> = (0..sino.views)
        .map(|v| filter.apply(&rows[v * sino.detectors..(v + 1) * sino.detectors]))
        .collect();

    let center = (size as f64 - 1.0) / 2.0;
    let det_center = (sino.detectors as f64 - 1.0) / 2.0;
    let view_weight = std::f64::consts::PI / sino.views as f64;
    let trig: Vec<(f64, f64)> = (0..sino.views)
        .map(|v| (v as f64 * std::f64::consts::PI / sino.views as f64).sin_cos())
        .collect();

    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 - center;
        for x in 0..size {
            let fx = x as f64 - center;
            let mut acc = 0.0;
            for (v, &(sin, cos)) in trig.iter().enumerate() {
                let u = fx * cos + fy * sin + det_center;
                if u < 0.0 || u > (sino.detectors - 1) as f64 {
                    continue;
                }
                let u0 = u.floor();
                let frac = u - u0;
                let i0 = u0 as usize;
                let row = &filtered[v];
                let sample = if frac == 0.0 {
                    row[i0]
                } else {
                    row[i0] * (1.0 - frac) + row[i0 + 1] * frac
                };
                acc += sample;
            }
            out[y * size + x] = acc * view_weight;
        }
    }
    Tensor::from_vec(&[1, size, size], out)
}

/// Filtered back projection; the reconstruction is clamped to [0, 1.5]
/// (small headroom above the phantom range for overshoot).
pub fn fbp(sino: &Sinogram, size: usize) -> Result<Tensor> {
    let mut recon = fbp_raw(sino, size)?;
    for v in recon.data_mut() {
        *v = v.clamp(0.0, 1.5);
    }
    Ok(recon)
}

/// Produces a (clean, noisy) training pair: the clean phantom and the
/// low-dose reconstruction of it, both clamped to [0, 1].
pub fn make_pair(seed: u64, size: usize, views: usize, photons: f64) -> Result<(Tensor, Tensor)> {
    let phantom = make_phantom(seed, size)?;
    let sino = radon(&phantom.image, views, detectors_for(size))?;
    let noisy_sino = simulate_low_dose(&sino, photons, seed ^ NOISE_SEED_SALT)?;
    let mut noisy = fbp(&noisy_sino, size)?;
    for v in noisy.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok((phantom.image, noisy))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mse(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.numel() as f64
    }

    fn psnr_db(a: &Tensor, b: &Tensor) -> f64 {
        10.0 * (1.0 / mse(a, b)).log10()
    }

    #[test]
    fn phantom_is_deterministic_and_in_range() {
        let a = make_phantom(42, 64).unwrap();
        let b = make_phantom(42, 64).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.image), bits(&b.image));
        assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn phantom_has_multiple_interior_levels() {
        for seed in [0, 1, 2, 3, 4] {
            let p = make_phantom(seed, 64).unwrap();
            let mut levels: Vec<u64> = p
                .image
                .data()
                .iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| (v * 1e9).round() as u64)
                .collect();
            levels.sort_unstable();
            levels.dedup();
            assert!(levels.len() >= 2, "seed {seed}: {} levels", levels.len());
        }
    }

    #[test]
    fn phantom_rejects_tiny_sizes() {
        assert!(matches!(
            make_phantom(0, 31),
            Err(Error::SizeTooSmall { got: 31, min: 32 })
        ));
    }

    #[test]
    fn radon_of_zero_image_is_zero() {
        let img = Tensor::zeros(&[1, 40, 40]);
        let sino = radon(&img, 30, 60).unwrap();
        assert!(sino.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn radon_central_ray_matches_disk_chord() {
        let n = 128;
        let c = (n as f64 - 1.0) / 2.0;
        let r = 0.3 * n as f64;
        let a = 0.04;
        let mut data = vec![0.0; n * n];
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 - c, y as f64 - c);
                if dx * dx + dy * dy <= r * r {
                    data[y * n + x] = a;
                }
            }
        }
        let img = Tensor::from_vec(&[1, n, n], data).unwrap();
        let detectors = 181; // odd => central detector passes through center
        let sino = radon(&img, 4, detectors).unwrap();
        let expected = 2.0 * r * a;
        for v in 0..4 {
            let got = sino.data.data()[v * detectors + detectors / 2];
            let rel = (got - expected).abs() / expected;
            assert!(rel < 0.02, "view {v}: {got} vs {expected} (rel {rel})");
        }
    }

    #[test]
    fn radon_is_linear() {
        let u = make_phantom(5, 48).unwrap().image;
        let w = make_phantom(6, 48).unwrap().image;
        let sum = Tensor::from_vec(
            &[1, 48, 48],
            u.data().iter().zip(w.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        let su = radon(&u, 40, 70).unwrap();
        let sw = radon(&w, 40, 70).unwrap();
        let ssum = radon(&sum, 40, 70).unwrap();
        for ((a, b), c) in su
            .data
            .data()
            .iter()
            .zip(sw.data.data())
            .zip(ssum.data.data())
        {
            assert!((a + b - c).abs() < 1e-9);
        }
    }

    #[test]
    fn radon_rejects_bad_geometry() {
        let img = Tensor::zeros(&[1, 40, 40]);
        assert!(matches!(radon(&img, 0, 60), Err(Error::BadGeometry(_))));
        assert!(matches!(radon(&img, 10, 39), Err(Error::BadGeometry(_))));
    }

    #[test]
    fn huge_dose_approaches_noiseless_projections() {
        let phantom = make_phantom(7, 64).unwrap();
        let sino = radon(&phantom.image, 90, detectors_for(64)).unwrap();
        let noisy = simulate_low_dose(&sino, 1e12, 3).unwrap();
        let max_dev = sino
            .data
            .data()
            .iter()
            .zip(noisy.data.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0f64, f64::max);
        assert!(max_dev < 1e-3, "max |p' - p| = {max_dev}");
    }

    #[test]
    fn zero_ray_noise_matches_poisson_delta_method() {
        // p = 0, N0 = 1e4: E[p'] ≈ 0, std ≈ 1/sqrt(N0) = 0.01
        let n = 100_000;
        let flat = Sinogram::new(Tensor::zeros(&[n / 500, 500]), n / 500, 500).unwrap();
        let noisy = simulate_low_dose(&flat, 1e4, 11).unwrap();
        let vals = noisy.data.data();
        let mean: f64 = vals.iter().sum::<f64>() / n as f64;
        let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        assert!(mean.abs() < 5e-4, "mean {mean}");
        assert!((std - 0.01).abs() / 0.01 < 0.2, "std {std}");
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let phantom = make_phantom(8, 48).unwrap();
        let sino = radon(&phantom.image, 30, detectors_for(48)).unwrap();
        let a = simulate_low_dose(&sino, 1e4, 5).unwrap();
        let b = simulate_low_dose(&sino, 1e4, 5).unwrap();
        let bits = |s: &Sinogram| {
            s.data
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn noise_variance_decreases_with_dose() {
        for seed in [1, 2, 3] {
            let phantom = make_phantom(seed, 48).unwrap();
            let sino = radon(&phantom.image, 30, detectors_for(48)).unwrap();
            let var_at = |n0: f64| {
                let noisy = simulate_low_dose(&sino, n0, seed ^ 0xa5).unwrap();
                noisy
                    .data
                    .data()
                    .iter()
                    .zip(sino.data.data())
                    .map(|(q, p)| (q - p) * (q - p))
                    .sum::<f64>()
                    / sino.data.numel() as f64
            };
            let (v3, v4, v5) = (var_at(1e3), var_at(1e4), var_at(1e5));
            assert!(v3 > v4 && v4 > v5, "seed {seed}: {v3} {v4} {v5}");
        }
    }

    #[test]
    fn fbp_round_trip_recovers_phantom_interior() {
        let n = 128;
        let phantom = make_phantom(9, n).unwrap();
        let sino = radon(&phantom.image, 180, detectors_for(n)).unwrap();
        let recon = fbp(&sino, n).unwrap();
        let c = (n as f64 - 1.0) / 2.0;
        let r = n as f64 / 2.0 - 1.0;
        let mut acc = 0.0;
        let mut count = 0usize;
        for y in 0..n {
            for x in 0..n {
                let (dx, dy) = (x as f64 - c, y as f64 - c);
                if dx * dx + dy * dy <= r * r {
                    let d = recon.data()[y * n + x] - phantom.image.data()[y * n + x];
                    acc += d * d;
                    count += 1;
                }
            }
        }
        let rmse = (acc / count as f64).sqrt();
        assert!(rmse < 0.05, "interior RMSE {rmse}");
    }

    #[test]
    fn fbp_of_zero_sinogram_is_zero() {
        let sino = Sinogram::new(Tensor::zeros(&[20, 60]), 20, 60).unwrap();
        let recon = fbp(&sino, 40).unwrap();
        assert!(recon.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fbp_raw_is_linear_in_the_sinogram() {
        let phantom = make_phantom(10, 48).unwrap();
        let sino = radon(&phantom.image, 60, detectors_for(48)).unwrap();
        let doubled = Sinogram::new(
            Tensor::from_vec(
                &[60, detectors_for(48)],
                sino.data.data().iter().map(|&v| 2.0 * v).collect(),
            )
            .unwrap(),
            60,
            detectors_for(48),
        )
        .unwrap();
        let r1 = fbp_raw(&sino, 48).unwrap();
        let r2 = fbp_raw(&doubled, 48).unwrap();
        for (a, b) in r1.data().iter().zip(r2.data()) {
            assert!((2.0 * a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn make_pair_near_noiseless_at_huge_dose() {
        let (clean, noisy) = make_pair(12, 64, 120, 1e12).unwrap();
        let db = psnr_db(&noisy, &clean);
        assert!(db > 30.0, "PSNR {db} dB");
        assert!(noisy.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn make_pair_noise_grows_as_dose_drops() {
        let (clean, noisy_lo) = make_pair(13, 64, 120, 1e3).unwrap();
        let (_, noisy_hi) = make_pair(13, 64, 120, 1e5).unwrap();
        assert!(psnr_db(&noisy_lo, &clean) < psnr_db(&noisy_hi, &clean));
    }

    #[test]
    fn make_pair_is_deterministic() {
        let (c1, n1) = make_pair(14, 64, 90, 1e4).unwrap();
        let (c2, n2) = make_pair(14, 64, 90, 1e4).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&c1), bits(&c2));
        assert_eq!(bits(&n1), bits(&n2));
    }
}
