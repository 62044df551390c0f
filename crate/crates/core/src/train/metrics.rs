use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::explain::{explain, ExplainerKind, ExplainerSpec};
use crate::nn::{DefectNet, Mode, DEFECT_CLASS};
use crate::prior::make_pseudo_label;
use crate::tensor::ops::sigmoid;

/// Sum over positives, in descending-score order, of `precision@rank / P`.
/// Equal scores keep their input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "average_precision",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::Contract("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub defects: usize,
    /// `None` when the split has no defect sample.
    pub ap: Option<f64>,
    /// Fraction of samples with `sigmoid(logit) > 0.5` matching the label.
    pub accuracy: f64,
    /// Mean IoU of Otsu-binarized saliency against ground truth over defect
    /// samples with masks.
    pub mean_iou: Option<f64>,
    pub explainer: ExplainerSpec,
}

struct Scored {
    score: f64,
    label: bool,
    iou: Option<f64>,
}

/// Defect probability, accuracy, AP and saliency IoU over `dataset`.
/// Guided networks build each prior with their embedded stage-1 model.
pub fn evaluate(model: &DefectNet<f32>, dataset: &Dataset, spec: Option<&ExplainerSpec>) -> Result<Metrics> {
    let spec = spec.cloned().unwrap_or_else(|| ExplainerSpec::new(ExplainerKind::LayerCam));
    if model.mode() == Mode::Guided && model.prior_model.is_none() {
        return Err(Error::Contract("guided network has no prior model to build priors with".into()));
    }
    let scored = dataset
        .samples
        .par_iter()
        .map(|s| {
            let x = s.image.input_tensor::<f32>();
            let prior = match &model.prior_model {
                Some(pm) if model.mode() == Mode::Guided => Some(pm.prior_for(&x)?),
                _ => None,
            };
            let trace = model.explain_forward(&x, prior.as_ref())?;
            let iou = match (&s.gt_mask, s.label) {
                (Some(gt), 1) => {
                    let map = explain(&trace, &spec, DEFECT_CLASS)?;
                    Some(make_pseudo_label(&map).iou(gt)?)
                }
                _ => None,
            };
            Ok(Scored {
                score: sigmoid(trace.logit()),
                label: s.label == 1,
                iou,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = scored.iter().map(|s| s.label).collect();
    let defects = labels.iter().filter(|&&l| l).count();
    let correct = scored.iter().filter(|s| (s.score > 0.5) == s.label).count();
    let ious: Vec<f64> = scored.iter().filter_map(|s| s.iou).collect();
    Ok(Metrics {
        samples: scored.len(),
        defects,
        ap: if defects > 0 {
            Some(average_precision(&scores, &labels)?)
        } else {
            None
        },
        accuracy: if scored.is_empty() {
            0.0
        } else {
            correct as f64 / scored.len() as f64
        },
        mean_iou: (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64),
        explainer: spec,
    })
}
