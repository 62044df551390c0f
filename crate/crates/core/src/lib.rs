//! Saliency-prior guided training for surface defect classification.
//!
//! Stage 1 trains a plain convolutional classifier and turns its saliency
//! maps (Grad-CAM, LayerCAM, FullGrad) into stored priors and Otsu
//! pseudo-labels. Stage 2 retrains the network with the prior injected as an
//! extra feature channel and a segmentation loss whose weight decays linearly
//! over the epochs.

pub mod data;
pub mod error;
pub mod explain;
pub mod nn;
pub mod prior;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
