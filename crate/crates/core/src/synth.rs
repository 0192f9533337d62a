//! Synthetic landscape generator and label-corruption oracles.
//!
//! Stands in for satellite imagery plus a true plantation extent: the truth
//! map is a thresholded smoothed noise field, the image draws per-class
//! spectral signatures with Gaussian noise, and the corruption operators
//! reproduce the coarse-label and class-conditional-flip noise regimes.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::raster::{Dtype, Raster, Samples};
use crate::{Error, Result};

/// Per-class spectral signature: one mean and noise sigma per band.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpectra {
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// Recipe for one synthetic landscape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// Spatial correlation length: box-blur radius applied to the noise
    /// field before thresholding.
    pub blob_scale: usize,
    /// Signatures for class 0 and class 1.
    pub class_spectra: [ClassSpectra; 2],
    pub seed: u64,
}

impl LandscapeSpec {
    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::Validation("landscape dims must be positive".into()));
        }
        if self.blob_scale == 0 {
            return Err(Error::Validation("blob_scale must be >= 1".into()));
        }
        for (i, s) in self.class_spectra.iter().enumerate() {
            if s.mean.len() != self.bands || s.sigma.len() != self.bands {
                return Err(Error::Validation(format!(
                    "class {i} spectra must list {} bands",
                    self.bands
                )));
            }
            if s.sigma.iter().any(|&v| v < 0.0) {
                return Err(Error::Validation("sigma must be non-negative".into()));
            }
        }
        if self.class_spectra[0].mean == self.class_spectra[1].mean {
            return Err(Error::Validation(
                "class spectra must differ in at least one band mean".into(),
            ));
        }
        Ok(())
    }
}

/// Generates (image, truth): truth is seeded noise box-blurred at
/// `blob_scale` and thresholded at its median (so classes split ~50/50),
/// and the image draws each pixel's bands from its class signature.
pub fn generate(spec: &LandscapeSpec) -> Result<(Raster, Raster)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let n = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let field: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let blurred = box_blur(&field, h, w, spec.blob_scale);
    let mut sorted = blurred.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite field"));
    let median = sorted[n / 2];
    let truth: Vec<u8> = blurred.iter().map(|&v| u8::from(v > median)).collect();

    let mut image = vec![0f32; spec.bands * n];
    for b in 0..spec.bands {
        for i in 0..n {
            let class = truth[i] as usize;
            let spectra = &spec.class_spectra[class];
            let noise = standard_normal(&mut rng);
            image[b * n + i] = (spectra.mean[b] + spectra.sigma[b] * noise) as f32;
        }
    }

    let image = Raster::from_f32(w, h, spec.bands, image)?;
    let truth = Raster::from_u8(w, h, truth)?;
    Ok((image, truth))
}

/// Box-Muller draw; two uniforms per sample keeps the stream layout simple
/// and deterministic.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Separable box blur with truncated windows at the borders.
fn box_blur(field: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut rows = vec![0f64; field.len()];
    for y in 0..h {
        let src = &field[y * w..(y + 1) * w];
        let dst = &mut rows[y * w..(y + 1) * w];
        for x in 0..w as isize {
            let lo = (x - r).max(0) as usize;
            let hi = ((x + r) as usize).min(w - 1);
            let sum: f64 = src[lo..=hi].iter().sum();
            dst[x as usize] = sum / (hi - lo + 1) as f64;
        }
    }
    let mut out = vec![0f64; field.len()];
    for y in 0..h as isize {
        let lo = (y - r).max(0) as usize;
        let hi = ((y + r) as usize).min(h - 1);
        for x in 0..w {
            let mut sum = 0.0;
            for yy in lo..=hi {
                sum += rows[yy * w + x];
            }
            out[y as usize * w + x] = sum / (hi - lo + 1) as f64;
        }
    }
    out
}

fn require_binary(labels: &Raster) -> Result<&[u8]> {
    if labels.dtype() != Dtype::U8 || labels.bands() != 1 {
        return Err(Error::InvalidArgument(
            "labels must be a single-band U8 raster".into(),
        ));
    }
    let v = labels.as_u8()?;
    if v.iter().any(|&x| x > 1) {
        return Err(Error::Validation("label values must be in {0, 1}".into()));
    }
    Ok(v)
}

/// Majority vote over factor x factor blocks (tie goes to class 0), then
/// nearest-neighbor re-expansion to the original dims. Simulates a coarse
/// historical product over fine pixels.
pub fn coarsen_labels(truth: &Raster, factor: usize) -> Result<Raster> {
    if factor == 0 {
        return Err(Error::InvalidArgument("coarsen factor must be >= 1".into()));
    }
    let values = require_binary(truth)?;
    if factor == 1 {
        return Ok(truth.clone());
    }
    let (h, w) = truth.dims();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "dims {h}x{w} are not divisible by factor {factor}"
        )));
    }
    let block = factor * factor;
    let mut out = vec![0u8; h * w];
    for by in (0..h).step_by(factor) {
        for bx in (0..w).step_by(factor) {
            let mut ones = 0usize;
            for y in by..by + factor {
                for x in bx..bx + factor {
                    ones += values[y * w + x] as usize;
                }
            }
            let vote = u8::from(2 * ones > block);
            for y in by..by + factor {
                out[y * w + bx..y * w + bx + factor].fill(vote);
            }
        }
    }
    Raster::new(
        truth.width(),
        truth.height(),
        1,
        truth.geotransform(),
        truth.nodata(),
        Samples::U8(out),
    )
}

/// Class-conditional flip noise: each 0-pixel flips with probability `r01`,
/// each 1-pixel with `r10`, independently and seeded. Rates are capped below
/// 0.5 so the implied transition matrix stays diagonally dominant.
pub fn flip_noise(labels: &Raster, r01: f64, r10: f64, seed: u64) -> Result<Raster> {
    for (name, r) in [("r01", r01), ("r10", r10)] {
        if !(0.0..0.5).contains(&r) {
            return Err(Error::InvalidArgument(format!(
                "flip rate {name} must be in [0, 0.5), got {r}"
            )));
        }
    }
    let values = require_binary(labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out: Vec<u8> = values
        .iter()
        .map(|&v| {
            let u: f64 = rng.gen();
            match v {
                0 if u < r01 => 1,
                1 if u < r10 => 0,
                v => v,
            }
        })
        .collect();
    Raster::new(
        labels.width(),
        labels.height(),
        1,
        labels.geotransform(),
        labels.nodata(),
        Samples::U8(out),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo_spec() -> LandscapeSpec {
        LandscapeSpec {
            height: 64,
            width: 64,
            bands: 3,
            blob_scale: 4,
            class_spectra: [
                ClassSpectra {
                    mean: vec![0.1, 0.2, 0.3],
                    sigma: vec![0.05; 3],
                },
                ClassSpectra {
                    mean: vec![0.4, 0.1, 0.6],
                    sigma: vec![0.05; 3],
                },
            ],
            seed: 9,
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let (i1, t1) = generate(&demo_spec()).unwrap();
        let (i2, t2) = generate(&demo_spec()).unwrap();
        assert_eq!(i1, i2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn median_threshold_balances_classes() {
        let mut spec = demo_spec();
        spec.height = 96;
        spec.width = 96;
        spec.blob_scale = 1;
        let (_, truth) = generate(&spec).unwrap();
        let n = (96 * 96) as f64;
        let ones = truth.as_u8().unwrap().iter().filter(|&&v| v == 1).count() as f64;
        assert!((ones / n - 0.5).abs() <= 1.0 / n.sqrt());
    }

    #[test]
    fn zero_sigma_classes_are_recoverable_by_nearest_mean() {
        let mut spec = demo_spec();
        for s in &mut spec.class_spectra {
            s.sigma = vec![0.0; 3];
        }
        let (image, truth) = generate(&spec).unwrap();
        let v = image.as_f32().unwrap();
        let t = truth.as_u8().unwrap();
        let n = 64 * 64;
        for i in 0..n {
            let dist = |class: usize| -> f64 {
                (0..3)
                    .map(|b| {
                        let d = v[b * n + i] as f64 - spec.class_spectra[class].mean[b];
                        d * d
                    })
                    .sum()
            };
            let nearest = u8::from(dist(1) < dist(0));
            assert_eq!(nearest, t[i]);
        }
    }

    #[test]
    fn distinct_spectra_required() {
        let mut spec = demo_spec();
        spec.class_spectra[1] = spec.class_spectra[0].clone();
        assert!(matches!(generate(&spec), Err(Error::Validation(_))));
    }

    #[test]
    fn coarsen_factor_one_is_identity() {
        let labels = Raster::from_u8(4, 4, vec![0, 1].repeat(8)).unwrap();
        assert_eq!(coarsen_labels(&labels, 1).unwrap(), labels);
    }

    #[test]
    fn coarsen_majority_block() {
        // 10x10 block with 51 ones -> labeled 1 everywhere after re-expansion.
        let mut data = vec![0u8; 100];
        for v in data.iter_mut().take(51) {
            *v = 1;
        }
        let labels = Raster::from_u8(10, 10, data).unwrap();
        let coarse = coarsen_labels(&labels, 10).unwrap();
        assert!(coarse.as_u8().unwrap().iter().all(|&v| v == 1));
    }

    #[test]
    fn coarsen_checkerboard_ties_to_zero() {
        let data: Vec<u8> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as u8).collect();
        let labels = Raster::from_u8(4, 4, data).unwrap();
        let coarse = coarsen_labels(&labels, 2).unwrap();
        assert!(coarse.as_u8().unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn coarsen_is_idempotent() {
        let (_, truth) = generate(&demo_spec()).unwrap();
        let once = coarsen_labels(&truth, 8).unwrap();
        let twice = coarsen_labels(&once, 8).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn coarsen_rejects_indivisible_dims() {
        let labels = Raster::from_u8(5, 5, vec![0; 25]).unwrap();
        assert!(matches!(
            coarsen_labels(&labels, 2),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn flip_zero_rates_is_identity() {
        let (_, truth) = generate(&demo_spec()).unwrap();
        assert_eq!(flip_noise(&truth, 0.0, 0.0, 5).unwrap(), truth);
    }

    #[test]
    fn flip_rejects_half_or_more() {
        let labels = Raster::from_u8(2, 2, vec![1; 4]).unwrap();
        assert!(matches!(
            flip_noise(&labels, 0.0, 0.5, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn flip_rates_match_binomial_bounds() {
        // 10^6 pixels, half each class; empirical rates within 3 sigma.
        let n = 1000 * 1000;
        let data: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let labels = Raster::from_u8(1000, 1000, data.clone()).unwrap();
        let noisy = flip_noise(&labels, 0.3, 0.1, 1234).unwrap();
        let nv = noisy.as_u8().unwrap();
        let mut flips01 = 0usize;
        let mut flips10 = 0usize;
        for (a, b) in data.iter().zip(nv) {
            match (a, b) {
                (0, 1) => flips01 += 1,
                (1, 0) => flips10 += 1,
                _ => {}
            }
        }
        let half = (n / 2) as f64;
        for (count, rate) in [(flips01, 0.3), (flips10, 0.1)] {
            let mean = half * rate;
            let sd = (half * rate * (1.0 - rate)).sqrt();
            let dev = (count as f64 - mean).abs();
            assert!(dev <= 3.0 * sd, "flips {count} vs mean {mean} (3sd {})", 3.0 * sd);
        }
    }
}
