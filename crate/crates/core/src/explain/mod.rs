//! Saliency maps from a [`ForwardTrace`]: Grad-CAM, LayerCAM and FullGrad.
//!
//! Every explainer reads only the trace: probed activations, the input, the
//! bias probes and one backward pass from the class score. Maps are returned
//! at input resolution, min-max normalized to `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ForwardTrace;
use crate::tensor::{ops, GradientSet, NodeId, Op, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainerKind {
    GradCam,
    LayerCam,
    FullGrad,
}

impl ExplainerKind {
    pub fn cli_name(self) -> &'static str {
        match self {
            ExplainerKind::GradCam => "gradcam",
            ExplainerKind::LayerCam => "layercam",
            ExplainerKind::FullGrad => "fullgrad",
        }
    }
}

impl fmt::Display for ExplainerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for ExplainerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "gradcam" => Ok(ExplainerKind::GradCam),
            "layercam" => Ok(ExplainerKind::LayerCam),
            "fullgrad" => Ok(ExplainerKind::FullGrad),
            _ => Err(Error::Config(format!("unknown explainer {s:?}; expected gradcam, layercam or fullgrad"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Max,
}

/// Which explainer to run and over which backbone stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainerSpec {
    pub kind: ExplainerKind,
    /// Stage indices for the CAM kinds; `None` means the default (every
    /// stage for LayerCAM, the deepest for Grad-CAM).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    #[serde(default)]
    pub fusion: Fusion,
}

impl ExplainerSpec {
    pub fn new(kind: ExplainerKind) -> Self {
        ExplainerSpec {
            kind,
            layers: None,
            fusion: Fusion::Max,
        }
    }

    pub fn with_layers(mut self, layers: Vec<usize>) -> Self {
        self.layers = Some(layers);
        self
    }

    /// Concrete stage list for a trace with `stages` probed activations.
    pub fn resolve_layers(&self, stages: usize) -> Result<Vec<usize>> {
        let layers = match (&self.layers, self.kind) {
            (Some(l), _) => l.clone(),
            (None, ExplainerKind::LayerCam) => (0..stages).collect(),
            (None, _) => vec![stages.saturating_sub(1)],
        };
        if layers.is_empty() {
            return Err(Error::Config("explainer layer selection is empty".into()));
        }
        if let Some(bad) = layers.iter().find(|&&l| l >= stages) {
            return Err(Error::Contract(format!("layer {bad} is not probed (trace has {stages} stages)")));
        }
        Ok(layers)
    }
}

/// Spatial attribution at input resolution with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub explainer: ExplainerKind,
    pub sample_id: Option<String>,
    pub class: usize,
}

impl SaliencyMap {
    /// Normalize `raw` into a map.
    pub fn from_raw(height: usize, width: usize, raw: &[f64], explainer: ExplainerKind, class: usize) -> Self {
        assert_eq!(raw.len(), height * width);
        SaliencyMap {
            height,
            width,
            values: postprocess_saliency(raw),
            explainer,
            sample_id: None,
            class,
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.sample_id = Some(id.into());
        self
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// `[1, 1, H, W]` tensor of the values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![1, 1, self.height, self.width],
            self.values.iter().map(|&v| T::of(v)).collect(),
        )
        .expect("map dims")
    }
}

/// Min-max rescale to `[0, 1]`; a constant array maps to all zeros.
pub fn postprocess_saliency(raw: &[f64]) -> Vec<f64> {
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if raw.is_empty() || hi <= lo {
        return vec![0.0; raw.len()];
    }
    let span = hi - lo;
    raw.iter().map(|&v| (v - lo) / span).collect()
}

/// Absolute value followed by min-max rescale.
fn psi(raw: &[f64]) -> Vec<f64> {
    postprocess_saliency(&raw.iter().map(|v| v.abs()).collect::<Vec<_>>())
}

fn upsample(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if (h, w) == (out_h, out_w) {
        return map.to_vec();
    }
    let t = Tensor::new(vec![1, 1, h, w], map.to_vec()).expect("map dims");
    ops::forward(
        &Op::BilinearResize {
            height: out_h,
            width: out_w,
        },
        &[&t],
    )
    .expect("finite resize")
    .into_data()
}

/// Sum a `[1, C, h, w]` tensor over channels.
fn channel_sum(x: &[f64], channels: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; hw];
    for c in 0..channels {
        for (o, v) in out.iter_mut().zip(&x[c * hw..(c + 1) * hw]) {
            *o += v;
        }
    }
    out
}

struct LayerView {
    channels: usize,
    h: usize,
    w: usize,
    act: Vec<f64>,
    grad: Vec<f64>,
}

fn layer_view<T: Scalar>(trace: &ForwardTrace<T>, grads: &GradientSet<T>, layer: usize) -> Result<LayerView> {
    let id: NodeId = *trace
        .activations
        .get(layer)
        .ok_or_else(|| Error::Contract(format!("layer {layer} is not probed")))?;
    let act = trace.value(id);
    let grad = grads
        .get(id)
        .ok_or_else(|| Error::Contract(format!("layer {layer} activation has no probe")))?;
    let (n, channels, h, w) = act.dims4("explain")?;
    if n != 1 {
        return Err(Error::Contract("explainers take single-sample traces".into()));
    }
    Ok(LayerView {
        channels,
        h,
        w,
        act: act.to_f64_vec(),
        grad: grad.to_f64_vec(),
    })
}

/// Channel weights are spatial means of the gradient; map = ReLU(sum_k w_k A_k).
pub fn grad_cam<T: Scalar>(trace: &ForwardTrace<T>, class: usize, layer: usize) -> Result<SaliencyMap> {
    let grads = trace.class_gradients(class)?;
    let v = layer_view(trace, &grads, layer)?;
    let hw = v.h * v.w;
    let mut cam = vec![0.0; hw];
    for k in 0..v.channels {
        let g = &v.grad[k * hw..(k + 1) * hw];
        let weight = g.iter().sum::<f64>() / hw as f64;
        for (c, a) in cam.iter_mut().zip(&v.act[k * hw..(k + 1) * hw]) {
            *c += weight * a;
        }
    }
    cam.iter_mut().for_each(|c| *c = c.max(0.0));
    let (ih, iw) = trace.input_shape();
    let up = upsample(&cam, v.h, v.w, ih, iw);
    Ok(SaliencyMap::from_raw(ih, iw, &up, ExplainerKind::GradCam, class))
}

/// Per layer: ReLU(sum_k ReLU(G_k) * A_k), normalized and upsampled; layers
/// fused by elementwise max and renormalized.
pub fn layer_cam<T: Scalar>(trace: &ForwardTrace<T>, class: usize, layers: &[usize]) -> Result<SaliencyMap> {
    if layers.is_empty() {
        return Err(Error::Contract("layer_cam needs at least one layer".into()));
    }
    let grads = trace.class_gradients(class)?;
    let (ih, iw) = trace.input_shape();
    let mut fused = vec![0.0f64; ih * iw];
    for &layer in layers {
        let v = layer_view(trace, &grads, layer)?;
        let hw = v.h * v.w;
        let mut cam = vec![0.0; hw];
        for k in 0..v.channels {
            let g = &v.grad[k * hw..(k + 1) * hw];
            let a = &v.act[k * hw..(k + 1) * hw];
            for ((c, &gi), &ai) in cam.iter_mut().zip(g).zip(a) {
                *c += gi.max(0.0) * ai;
            }
        }
        cam.iter_mut().for_each(|c| *c = c.max(0.0));
        let up = upsample(&postprocess_saliency(&cam), v.h, v.w, ih, iw);
        for (f, u) in fused.iter_mut().zip(up) {
            *f = f.max(u);
        }
    }
    Ok(SaliencyMap::from_raw(ih, iw, &fused, ExplainerKind::LayerCam, class))
}

/// Input-gradient term plus one term per bias, each through `|.|` and a
/// min-max rescale, upsampled, summed and normalized.
pub fn full_grad<T: Scalar>(trace: &ForwardTrace<T>, class: usize) -> Result<SaliencyMap> {
    if trace.biases.is_empty() {
        return Err(Error::Contract("full_grad needs bias probes".into()));
    }
    let grads = trace.class_gradients(class)?;
    let x = trace.value(trace.input);
    let gx = grads
        .get(trace.input)
        .ok_or_else(|| Error::Contract("full_grad needs the input probed".into()))?;
    let (_, cin, ih, iw) = x.dims4("full_grad")?;
    let input_term: Vec<f64> = x
        .data()
        .iter()
        .zip(gx.data())
        .map(|(&xi, &gi)| (xi * gi).as_f64())
        .collect();
    let mut total = channel_sum(&psi(&input_term), cin, ih * iw);

    for probe in &trace.biases {
        let g = grads
            .get(probe.preact)
            .ok_or_else(|| Error::Contract(format!("bias probe {} has no gradient", probe.name)))?;
        let b = trace.value(probe.bias).to_f64_vec();
        if probe.spatial {
            let (_, c, h, w) = g.dims4("full_grad")?;
            let hw = h * w;
            let contrib: Vec<f64> = g
                .data()
                .iter()
                .enumerate()
                .map(|(i, &gi)| gi.as_f64() * b[i / hw % c])
                .collect();
            let map = channel_sum(&psi(&contrib), c, hw);
            for (t, u) in total.iter_mut().zip(upsample(&map, h, w, ih, iw)) {
                *t += u;
            }
        } else {
            let contrib: Vec<f64> = g
                .data()
                .iter()
                .enumerate()
                .map(|(i, &gi)| gi.as_f64() * b[i % b.len()])
                .collect();
            let level: f64 = psi(&contrib).iter().sum();
            total.iter_mut().for_each(|t| *t += level);
        }
    }
    Ok(SaliencyMap::from_raw(ih, iw, &total, ExplainerKind::FullGrad, class))
}

/// `|f_c(x) - (sum_i g_i x_i + sum_k g_k b_k)| / max(|f_c(x)|, 1e-12)`, on raw
/// (unprocessed) terms.
pub fn completeness_residual<T: Scalar>(trace: &ForwardTrace<T>, class: usize) -> Result<f64> {
    let f = trace.class_score(class)?;
    let grads = trace.class_gradients(class)?;
    let dot = |a: &Tensor<T>, b: &Tensor<T>| -> f64 {
        a.data().iter().zip(b.data()).map(|(&x, &y)| x.as_f64() * y.as_f64()).sum()
    };
    let mut total = dot(trace.value(trace.input), grads.of(trace.input));
    for probe in &trace.biases {
        total += dot(trace.value(probe.bias), grads.of(probe.bias));
    }
    Ok((f - total).abs() / f.abs().max(1e-12))
}

/// Run the explainer described by `spec`.
pub fn explain<T: Scalar>(trace: &ForwardTrace<T>, spec: &ExplainerSpec, class: usize) -> Result<SaliencyMap> {
    let stages = trace.activations.len();
    match spec.kind {
        ExplainerKind::GradCam => {
            let layers = spec.resolve_layers(stages)?;
            if layers.len() != 1 {
                return Err(Error::Config("grad_cam takes exactly one layer".into()));
            }
            grad_cam(trace, class, layers[0])
        }
        ExplainerKind::LayerCam => layer_cam(trace, class, &spec.resolve_layers(stages)?),
        ExplainerKind::FullGrad => full_grad(trace, class),
    }
}
