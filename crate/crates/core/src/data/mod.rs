//! Images, masks, datasets on disk, the synthetic generator, checkpoints and
//! heatmap rendering.

mod checkpoint;
mod pgm;
mod render;
mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ops, Op, Scalar, Tensor};

pub use checkpoint::{
    file_digest, load_checkpoint, read_checkpoint, save_checkpoint, warm_start_from_checkpoint, CheckpointManifest,
    ParamEntry, PriorSection, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use pgm::{decode_pnm, encode_pgm, read_pnm, write_pgm, Raster};
pub use render::render_heatmap_overlay;
pub use synth::{generate_synthetic, synthesize, SynthParams, SynthSample};

/// Grayscale image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape {
                op: "image",
                lhs: vec![height, width],
                rhs: vec![values.len()],
            });
        }
        Ok(GrayImage { height, width, values })
    }

    pub fn from_raster(r: &Raster) -> Self {
        GrayImage {
            height: r.height,
            width: r.width,
            values: r.levels.iter().map(|&l| l as f32 / 255.0).collect(),
        }
    }

    pub fn to_raster(&self) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            levels: self.values.iter().map(|&v| quantize(v as f64)).collect(),
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// `[1, 1, H, W]` tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, 1, self.height, self.width],
            self.values.iter().map(|&v| T::of(v as f64)).collect(),
        )
        .expect("image dims")
    }

    /// Per-image standardized tensor fed to the network.
    pub fn input_tensor<T: Scalar>(&self) -> Tensor<T> {
        let n = self.values.len() as f64;
        let mean = self.values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let scale = 1.0 / var.sqrt().max(1e-3);
        Tensor::new(
            vec![1, 1, self.height, self.width],
            self.values.iter().map(|&v| T::of((v as f64 - mean) * scale)).collect(),
        )
        .expect("image dims")
    }
}

/// `round(v * 255)` after clamping to `[0, 1]`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary mask, one byte per pixel holding 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != height * width || bits.iter().any(|&b| b > 1) {
            return Err(Error::Format(format!("mask must hold {} values in {{0, 1}}", height * width)));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    /// Nonzero levels are foreground.
    pub fn from_raster(r: &Raster) -> Self {
        Mask {
            height: r.height,
            width: r.width,
            bits: r.levels.iter().map(|&l| u8::from(l > 0)).collect(),
        }
    }

    /// Levels 0 and 255.
    pub fn to_raster(&self) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            levels: self.bits.iter().map(|&b| b * 255).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &Mask) -> Result<f64> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape {
                op: "iou",
                lhs: vec![self.height, self.width],
                rhs: vec![other.height, other.width],
            });
        }
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a & b) as usize;
            union += (a | b) as usize;
        }
        Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
    }

    /// Nearest-neighbour resampling at pixel centres.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        let pick = |o: usize, out: usize, inp: usize| ((2 * o + 1) * inp / (2 * out)).min(inp - 1);
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = pick(y, height, self.height);
            for x in 0..width {
                bits.push(self.bits[sy * self.width + pick(x, width, self.width)]);
            }
        }
        Mask { height, width, bits }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, 1, self.height, self.width],
            self.bits.iter().map(|&b| T::of(b as f64)).collect(),
        )
        .expect("mask dims")
    }
}

/// Bilinear resampling with the same align-corners-false mapping as the
/// network's resize primitive.
pub fn resize_bilinear_image(img: &GrayImage, height: usize, width: usize) -> GrayImage {
    assert!(height > 0 && width > 0, "resize target must be at least 1x1");
    if (height, width) == (img.height, img.width) {
        return img.clone();
    }
    let t: Tensor<f64> = img.to_tensor();
    let out = ops::forward(&Op::BilinearResize { height, width }, &[&t]).expect("finite image");
    GrayImage {
        height,
        width,
        values: out.data().iter().map(|&v| v as f32).collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    /// 0 normal, 1 defect.
    pub label: u8,
    pub gt_mask: Option<Mask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub samples: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SynthParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub samples: Vec<Sample>,
    pub generator: Option<SynthParams>,
}

impl Dataset {
    /// Load `manifest.json` and every file it references.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(Error::MissingFile(manifest_path));
        }
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", manifest_path.display())))?;
        let mut seen = HashSet::new();
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for entry in &manifest.samples {
            if !seen.insert(entry.id.clone()) {
                return Err(Error::Format(format!("duplicate sample id {}", entry.id)));
            }
            if entry.label > 1 {
                return Err(Error::Format(format!("sample {} has label {}", entry.id, entry.label)));
            }
            let image = GrayImage::from_raster(&read_pnm(&dir.join(&entry.image))?);
            let gt_mask = match &entry.mask {
                Some(rel) => {
                    let m = Mask::from_raster(&read_pnm(&dir.join(rel))?);
                    if (m.height, m.width) != (image.height, image.width) {
                        return Err(Error::Format(format!("mask of {} does not match its image size", entry.id)));
                    }
                    if entry.label == 0 && m.count() > 0 {
                        return Err(Error::Format(format!("normal sample {} has a non-empty mask", entry.id)));
                    }
                    Some(m)
                }
                None => None,
            };
            samples.push(Sample {
                id: entry.id.clone(),
                image,
                label: entry.label,
                gt_mask,
            });
        }
        Ok(Dataset {
            split: manifest.split,
            samples,
            generator: manifest.generator,
        })
    }

    /// Write `manifest.json`, `images/<id>.pgm` and `masks/<id>.pgm`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "masks"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let mut entries = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let image = format!("images/{}.pgm", s.id);
            write_pgm(&dir.join(&image), &s.image.to_raster())?;
            let mask = match &s.gt_mask {
                Some(m) if s.label == 1 => {
                    let rel = format!("masks/{}.pgm", s.id);
                    write_pgm(&dir.join(&rel), &m.to_raster())?;
                    Some(rel)
                }
                _ => None,
            };
            entries.push(ManifestEntry {
                id: s.id.clone(),
                image,
                label: s.label,
                mask,
            });
        }
        let manifest = DatasetManifest {
            split: self.split.clone(),
            samples: entries,
            generator: self.generator.clone(),
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    /// Every image resized to `height x width`; masks follow by nearest neighbour.
    pub fn resized(&self, height: usize, width: usize) -> Dataset {
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                id: s.id.clone(),
                image: resize_bilinear_image(&s.image, height, width),
                label: s.label,
                gt_mask: s.gt_mask.as_ref().map(|m| {
                    if (m.height, m.width) == (height, width) {
                        m.clone()
                    } else {
                        m.resize_nearest(height, width)
                    }
                }),
            })
            .collect();
        Dataset {
            split: self.split.clone(),
            samples,
            generator: self.generator.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn defect_count(&self) -> usize {
        self.samples.iter().filter(|s| s.label == 1).count()
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    if !path.exists() {
        return Err(Error::MissingFile(PathBuf::from(path)));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_downsample_samples_centres() {
        let bits: Vec<u8> = (0..16).map(|i| u8::from(i % 4 == 1 || i % 4 == 3)).collect();
        let m = Mask::new(4, 4, bits).unwrap();
        let small = m.resize_nearest(2, 2);
        assert_eq!(small.bits, vec![1, 1, 1, 1]);
    }

    #[test]
    fn iou_extremes() {
        let a = Mask::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        let b = Mask::new(1, 4, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(a.iou(&a).unwrap(), 1.0);
        assert_eq!(a.iou(&b).unwrap(), 0.0);
        assert_eq!(Mask::empty(1, 4).iou(&Mask::empty(1, 4)).unwrap(), 1.0);
    }

    #[test]
    fn quantize_rounds_and_clamps() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(-1.0), 0);
        assert_eq!(quantize(2.0), 255);
    }
}
