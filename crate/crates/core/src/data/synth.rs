//! Seeded synthetic surface-defect images.
//!
//! Normal samples are band-limited noise over a smooth illumination ramp.
//! Defect samples add either a scratch (random-walk polyline) or a blob
//! (rotated anisotropic Gaussian) and carry its ground-truth mask.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{quantize, resize_bilinear_image, Dataset, GrayImage, Mask, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub n_normal: usize,
    pub n_defect: usize,
    pub size: usize,
    pub seed: u64,
    /// Standard deviation of the band-limited texture.
    pub texture: f64,
    /// Peak-to-peak amplitude of the illumination ramp.
    pub illumination: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub scratch_width_min: usize,
    pub scratch_width_max: usize,
    pub blob_probability: f64,
    pub max_mask_fraction: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_normal: 400,
            n_defect: 60,
            size: 64,
            seed: 0,
            texture: 0.06,
            illumination: 0.2,
            contrast_min: 0.2,
            contrast_max: 0.5,
            scratch_width_min: 1,
            scratch_width_max: 3,
            blob_probability: 0.5,
            max_mask_fraction: 0.15,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_normal == 0 || self.n_defect == 0 {
            return Err(Error::Config("generator needs at least one sample of each class".into()));
        }
        if self.size < 8 {
            return Err(Error::Config(format!("image size {} is below 8", self.size)));
        }
        if !(0.0 < self.contrast_min && self.contrast_min <= self.contrast_max && self.contrast_max <= 1.0) {
            return Err(Error::Config("contrast range must satisfy 0 < min <= max <= 1".into()));
        }
        if self.scratch_width_min == 0 || self.scratch_width_min > self.scratch_width_max {
            return Err(Error::Config("scratch width range must satisfy 1 <= min <= max".into()));
        }
        Ok(())
    }
}

/// A generated sample plus the defect-free background it was drawn on.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub sample: Sample,
    pub background: GrayImage,
}

pub fn synthesize(params: &SynthParams) -> Result<Vec<SynthSample>> {
    params.validate()?;
    let total = params.n_normal + params.n_defect;
    (0..total)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(i as u64);
            let defect = i >= params.n_normal;
            let id = if defect {
                format!("defect_{:04}", i - params.n_normal)
            } else {
                format!("normal_{i:04}")
            };
            let background = background(params, &mut rng);
            let (image, gt_mask) = if defect {
                let (img, mask) = add_defect(params, &background, &mut rng);
                (img, Some(mask))
            } else {
                (background.clone(), None)
            };
            Ok(SynthSample {
                sample: Sample {
                    id,
                    image: requantize(&image),
                    label: u8::from(defect),
                    gt_mask,
                },
                background: requantize(&background),
            })
        })
        .collect()
}

/// Generate a dataset directory (manifest, images, masks) under `out`.
pub fn generate_synthetic(params: &SynthParams, out: &Path) -> Result<Dataset> {
    let samples = synthesize(params)?.into_iter().map(|s| s.sample).collect();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dataset = Dataset {
        split: "synthetic".into(),
        samples,
        generator: Some(params.clone()),
    };
    dataset.save(out)?;
    Ok(dataset)
}

fn requantize(img: &GrayImage) -> GrayImage {
    GrayImage {
        height: img.height,
        width: img.width,
        values: img.values.iter().map(|&v| quantize(v as f64) as f32 / 255.0).collect(),
    }
}

fn noise_field(size: usize, grid: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let coarse = GrayImage {
        height: grid,
        width: grid,
        values: (0..grid * grid).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect(),
    };
    resize_bilinear_image(&coarse, size, size)
        .values
        .into_iter()
        .map(f64::from)
        .collect()
}

fn background(params: &SynthParams, rng: &mut ChaCha8Rng) -> GrayImage {
    let n = params.size;
    let base = rng.gen_range(0.4..0.6);
    let theta = rng.gen_range(0.0..std::f64::consts::TAU);
    let amp = rng.gen_range(0.0..params.illumination);
    let coarse = noise_field(n, (n / 8).max(2), rng);
    let fine = noise_field(n, (n / 4).max(2), rng);
    let (c, s) = (theta.cos(), theta.sin());
    let values = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64 / n as f64 - 0.5, (i % n) as f64 / n as f64 - 0.5);
            let ramp = amp * (x * c + y * s);
            let grain = 0.01 * rng.sample::<f64, _>(StandardNormal);
            let v = base + ramp + params.texture * (0.8 * coarse[i] + 0.6 * fine[i]) + grain;
            v.clamp(0.0, 1.0) as f32
        })
        .collect();
    GrayImage {
        height: n,
        width: n,
        values,
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Per-pixel defect profile in `[0, 1]` and its mask.
fn scratch(params: &SynthParams, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = params.size as f64;
    let mut pts = vec![(rng.gen_range(0.15 * n..0.85 * n), rng.gen_range(0.15 * n..0.85 * n))];
    let mut heading = rng.gen_range(0.0..std::f64::consts::TAU);
    for _ in 0..rng.gen_range(3..=6) {
        heading += rng.gen_range(-0.5..0.5);
        let step = n * rng.gen_range(0.05..0.12);
        let &(x, y) = pts.last().expect("non-empty");
        pts.push(((x + step * heading.cos()).clamp(1.0, n - 1.0), (y + step * heading.sin()).clamp(1.0, n - 1.0)));
    }
    let half = rng.gen_range(params.scratch_width_min..=params.scratch_width_max) as f64 / 2.0;
    let size = params.size;
    let mut profile = vec![0.0; size * size];
    let mut mask = vec![0u8; size * size];
    for i in 0..size * size {
        let p = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
        let d = pts
            .windows(2)
            .map(|w| segment_distance(p, w[0], w[1]))
            .fold(f64::INFINITY, f64::min);
        if d <= half {
            profile[i] = 1.0;
            mask[i] = 1;
        }
    }
    (profile, mask)
}

fn blob(params: &SynthParams, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = params.size as f64;
    let scale = n / 64.0;
    let (cx, cy) = (rng.gen_range(0.15 * n..0.85 * n), rng.gen_range(0.15 * n..0.85 * n));
    let (sa, sb) = (rng.gen_range(1.5..4.5) * scale, rng.gen_range(1.5..4.5) * scale);
    let phi = rng.gen_range(0.0..std::f64::consts::PI);
    let (c, s) = (phi.cos(), phi.sin());
    let size = params.size;
    let mut profile = vec![0.0; size * size];
    let mut mask = vec![0u8; size * size];
    for i in 0..size * size {
        let (dx, dy) = ((i % size) as f64 + 0.5 - cx, (i / size) as f64 + 0.5 - cy);
        let (u, v) = ((dx * c + dy * s) / sa, (-dx * s + dy * c) / sb);
        let g = (-0.5 * (u * u + v * v)).exp();
        profile[i] = g;
        mask[i] = u8::from(g >= 0.5);
    }
    (profile, mask)
}

/// Draw defects until one meets the size and contrast requirements.
fn add_defect(params: &SynthParams, bg: &GrayImage, rng: &mut ChaCha8Rng) -> (GrayImage, Mask) {
    let pixels = params.size * params.size;
    let bg_q = requantize(bg);
    loop {
        let (profile, bits) = if rng.gen_bool(params.blob_probability) {
            blob(params, rng)
        } else {
            scratch(params, rng)
        };
        let count = bits.iter().filter(|&&b| b == 1).count();
        if count == 0 || count as f64 > params.max_mask_fraction * pixels as f64 {
            continue;
        }
        let magnitude = rng.gen_range(params.contrast_min..=params.contrast_max);
        let contrast = if rng.gen_bool(0.5) { magnitude } else { -magnitude };
        let img = GrayImage {
            height: bg.height,
            width: bg.width,
            values: bg
                .values
                .iter()
                .zip(&profile)
                .map(|(&v, &p)| (v as f64 + contrast * p).clamp(0.0, 1.0) as f32)
                .collect(),
        };
        let img_q = requantize(&img);
        let diff: f64 = (0..pixels)
            .filter(|&i| bits[i] == 1)
            .map(|i| (img_q.values[i] - bg_q.values[i]).abs() as f64)
            .sum::<f64>()
            / count as f64;
        if diff >= 0.1 {
            let mask = Mask {
                height: params.size,
                width: params.size,
                bits,
            };
            return (img, mask);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_distance_cases() {
        assert_eq!(segment_distance((0.0, 1.0), (-1.0, 0.0), (1.0, 0.0)), 1.0);
        assert_eq!(segment_distance((3.0, 0.0), (-1.0, 0.0), (1.0, 0.0)), 2.0);
        assert_eq!(segment_distance((0.0, 2.0), (0.0, 0.0), (0.0, 0.0)), 2.0);
    }

    #[test]
    fn rejects_empty_class() {
        let p = SynthParams {
            n_defect: 0,
            ..SynthParams::default()
        };
        assert!(synthesize(&p).is_err());
    }
}
