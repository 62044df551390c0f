//! Stage-1 knowledge: saliency priors, Otsu pseudo-labels and their store.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{quantize, read_json, read_pnm, write_json, write_pgm, Dataset, Mask, Raster};
use crate::error::{Error, Result};
use crate::explain::{explain, ExplainerSpec, SaliencyMap};
use crate::nn::{DefectNet, Mode, PriorModel, DEFECT_CLASS};
use crate::tensor::{Scalar, Tensor};

/// Counts of the 256 intensity levels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Histogram256 {
    counts: [u64; 256],
}

impl Histogram256 {
    pub fn from_counts(counts: [u64; 256]) -> Self {
        Histogram256 { counts }
    }

    pub fn from_levels(levels: &[u8]) -> Self {
        let mut counts = [0u64; 256];
        for &l in levels {
            counts[l as usize] += 1;
        }
        Histogram256 { counts }
    }

    pub fn counts(&self) -> &[u64; 256] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Largest pixel count for which the exact integer comparison cannot overflow.
const OTSU_MAX_TOTAL: u64 = 1 << 28;

/// Level `t` maximizing the between-class variance of `{v <= t}` and
/// `{v > t}`; the smallest such `t` on ties, and the occupied level itself
/// when only one level is occupied.
///
/// Up to a positive constant the variance is `D^2 / (n0 n1)` with
/// `D = s0 N - S n0`, compared exactly in integers.
pub fn otsu_threshold(hist: &Histogram256) -> Result<u8> {
    let n = hist.total();
    if n == 0 {
        return Err(Error::Contract("otsu_threshold on an empty histogram".into()));
    }
    if n > OTSU_MAX_TOTAL {
        return Err(Error::Contract(format!("histogram total {n} exceeds {OTSU_MAX_TOTAL}")));
    }
    let s_total: u64 = hist.counts.iter().enumerate().map(|(v, &c)| v as u64 * c).sum();
    // (quotient, remainder, divisor) of the best D^2 / (n0 n1) so far
    let mut best: Option<(u8, u128, u128, u128)> = None;
    let (mut n0, mut s0) = (0u64, 0u64);
    for t in 0..256usize {
        n0 += hist.counts[t];
        s0 += t as u64 * hist.counts[t];
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let d = (s0 as i128 * n as i128 - s_total as i128 * n0 as i128).unsigned_abs();
        let q = n0 as u128 * n1 as u128;
        let d2 = d * d;
        let (a, r) = (d2 / q, d2 % q);
        let better = match best {
            None => true,
            Some((_, ba, br, bq)) => a > ba || (a == ba && r * bq > br * q),
        };
        if better {
            best = Some((t as u8, a, r, q));
        }
    }
    Ok(match best {
        Some((t, ..)) => t,
        None => hist.counts.iter().position(|&c| c > 0).expect("non-empty") as u8,
    })
}

/// Quantized levels of a saliency map, `round(v * 255)`.
pub fn saliency_levels(map: &SaliencyMap) -> Vec<u8> {
    map.values.iter().map(|&v| quantize(v)).collect()
}

/// Otsu binarization of the quantized map, with the threshold used.
pub fn pseudo_label_with_threshold(map: &SaliencyMap) -> (Mask, u8) {
    let levels = saliency_levels(map);
    let t = otsu_threshold(&Histogram256::from_levels(&levels)).expect("maps are non-empty");
    let bits = levels.iter().map(|&l| u8::from(l > t)).collect();
    (
        Mask {
            height: map.height,
            width: map.width,
            bits,
        },
        t,
    )
}

pub fn make_pseudo_label(map: &SaliencyMap) -> Mask {
    pseudo_label_with_threshold(map).0
}

/// Saliency of `net` for the defect class on image `x`.
pub fn saliency_for<T: Scalar>(
    net: &DefectNet<T>,
    x: &Tensor<T>,
    prior: Option<&Tensor<T>>,
    spec: &ExplainerSpec,
) -> Result<SaliencyMap> {
    let trace = net.forward(x, prior)?;
    explain(&trace, spec, DEFECT_CLASS)
}

/// Dequantized prior channel `level / 255` as a `[1, 1, H, W]` tensor.
pub fn dequantize<T: Scalar>(levels: &[u8], height: usize, width: usize) -> Tensor<T> {
    Tensor::new(
        vec![1, 1, height, width],
        levels.iter().map(|&l| T::of(l as f64 / 255.0)).collect(),
    )
    .expect("prior dims")
}

impl<T: Scalar> PriorModel<T> {
    /// The prior channel for `x`, quantized exactly as a stored prior is.
    pub fn prior_for(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let map = saliency_for(&self.net, x, None, &self.explainer)?;
        Ok(dequantize(&saliency_levels(&map), map.height, map.width))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorEntry {
    pub id: String,
    /// 8-bit saliency levels, row-major.
    pub saliency: Vec<u8>,
    pub mask: Mask,
    pub threshold: u8,
}

impl PriorEntry {
    pub fn prior_tensor<T: Scalar>(&self) -> Tensor<T> {
        dequantize(&self.saliency, self.mask.height, self.mask.width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    saliency: String,
    mask: String,
    threshold: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StoreIndex {
    explainer: ExplainerSpec,
    checkpoint_digest: String,
    height: usize,
    width: usize,
    entries: Vec<IndexEntry>,
}

/// Per-sample saliency priors and pseudo-labels produced by one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorStore {
    pub explainer: ExplainerSpec,
    pub checkpoint_digest: String,
    pub height: usize,
    pub width: usize,
    entries: Vec<PriorEntry>,
    index: HashMap<String, usize>,
}

impl PriorStore {
    pub fn new(
        explainer: ExplainerSpec,
        checkpoint_digest: String,
        height: usize,
        width: usize,
        entries: Vec<PriorEntry>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if (e.mask.height, e.mask.width) != (height, width) || e.saliency.len() != height * width {
                return Err(Error::Format(format!("prior {} is not {height}x{width}", e.id)));
            }
            if index.insert(e.id.clone(), i).is_some() {
                return Err(Error::Format(format!("sample id collision: {}", e.id)));
            }
        }
        Ok(PriorStore {
            explainer,
            checkpoint_digest,
            height,
            width,
            entries,
            index,
        })
    }

    pub fn entries(&self) -> &[PriorEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&PriorEntry> {
        self.index.get(id).map(|&i| &self.entries[i])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Error unless every sample of `dataset` has a prior.
    pub fn check_covers(&self, dataset: &Dataset) -> Result<()> {
        match dataset.samples.iter().find(|s| self.get(&s.id).is_none()) {
            Some(s) => Err(Error::Format(format!("no prior for sample {}", s.id))),
            None => Ok(()),
        }
    }

    /// Write `index.json`, `<id>.sal.pgm` and `<id>.mask.pgm` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let saliency = format!("{}.sal.pgm", e.id);
            let mask = format!("{}.mask.pgm", e.id);
            write_pgm(
                &dir.join(&saliency),
                &Raster {
                    height: self.height,
                    width: self.width,
                    levels: e.saliency.clone(),
                },
            )?;
            write_pgm(&dir.join(&mask), &e.mask.to_raster())?;
            entries.push(IndexEntry {
                id: e.id.clone(),
                saliency,
                mask,
                threshold: e.threshold,
            });
        }
        let index = StoreIndex {
            explainer: self.explainer.clone(),
            checkpoint_digest: self.checkpoint_digest.clone(),
            height: self.height,
            width: self.width,
            entries,
        };
        write_json(&dir.join("index.json"), &index)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index: StoreIndex = read_json(&dir.join("index.json"))?;
        let mut entries = Vec::with_capacity(index.entries.len());
        for e in index.entries {
            let sal = read_pnm(&dir.join(&e.saliency))?;
            let mask = read_pnm(&dir.join(&e.mask))?;
            if mask.levels.iter().any(|&l| l != 0 && l != 255) {
                return Err(Error::Format(format!("{}: mask levels must be 0 or 255", e.mask)));
            }
            if (sal.height, sal.width) != (mask.height, mask.width) {
                return Err(Error::Format(format!("prior {}: mask and saliency sizes differ", e.id)));
            }
            entries.push(PriorEntry {
                id: e.id,
                saliency: sal.levels,
                mask: Mask::from_raster(&mask),
                threshold: e.threshold,
            });
        }
        PriorStore::new(index.explainer, index.checkpoint_digest, index.height, index.width, entries)
    }
}

/// Saliency map and pseudo-label of every sample, computed in parallel and
/// collected in dataset order.
pub fn extract_priors(
    model: &DefectNet<f32>,
    dataset: &Dataset,
    spec: &ExplainerSpec,
    checkpoint_digest: &str,
) -> Result<PriorStore> {
    if model.mode() != Mode::Baseline {
        return Err(Error::Contract("priors come from a baseline network".into()));
    }
    let (height, width) = (model.config().height, model.config().width);
    let entries = dataset
        .samples
        .par_iter()
        .map(|s| {
            let map = saliency_for(model, &s.image.input_tensor(), None, spec)?.with_id(&s.id);
            let (mask, threshold) = pseudo_label_with_threshold(&map);
            Ok(PriorEntry {
                id: s.id.clone(),
                saliency: saliency_levels(&map),
                mask,
                threshold,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PriorStore::new(spec.clone(), checkpoint_digest.to_string(), height, width, entries)
}
