use crate::data::Mask;
use crate::error::{Error, Result};
use crate::tensor::ops::{bce_term, sigmoid};
use crate::tensor::{Scalar, Tensor};

/// Segmentation weight at epoch `k` of `k_epoch`: `1 - k / k_epoch`.
pub fn lambda_at(k: usize, k_epoch: usize) -> Result<f64> {
    if k_epoch == 0 || k > k_epoch {
        return Err(Error::Contract(format!("epoch {k} outside 0..={k_epoch}")));
    }
    Ok(1.0 - k as f64 / k_epoch as f64)
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape {
            op: "bce",
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    let sum: f64 = pred.iter().zip(target).map(|(&p, &y)| bce_term(p, y)).sum();
    Ok(sum / pred.len() as f64)
}

/// Pixelwise bce of `sigmoid(seg_logits)` against `pseudo`, which is first
/// nearest-neighbour resampled to the logit resolution.
pub fn seg_loss<T: Scalar>(seg_logits: &Tensor<T>, pseudo: &Mask) -> Result<f64> {
    let (_, c, h, w) = seg_logits.dims4("seg_loss")?;
    if c != 1 {
        return Err(Error::Shape {
            op: "seg_loss",
            lhs: vec![1],
            rhs: vec![c],
        });
    }
    let target = pseudo.resize_nearest(h, w);
    let p: Vec<f64> = seg_logits.data().iter().map(|&z| sigmoid(z.as_f64())).collect();
    let y: Vec<f64> = target.bits.iter().map(|&b| b as f64).collect();
    bce(&p, &y)
}

/// `lambda * l_seg + (1 - lambda) * l_cls`.
pub fn total_loss(l_seg: f64, l_cls: f64, lambda: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Contract(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(lambda * l_seg + (1.0 - lambda) * l_cls)
}
