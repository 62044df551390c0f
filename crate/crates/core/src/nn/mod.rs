//! Backbone classifier and the prior-guided defect network.
//!
//! Backbone: `B` stages of conv3x3 -> leaky ReLU -> maxpool 2x2. `F(x)` is the
//! last stage output. The classifier head maps `GAP(F(x))` through one hidden
//! dense layer (`head.feat`) to a single defect logit (`head.decision`).
//!
//! In guided mode the prior map is resized to `F(x)`'s resolution and
//! appended as an extra channel; a small segmentation branch turns that into
//! a one-channel logit map whose sigmoid is max- and average-pooled, detached,
//! and concatenated with the `head.feat` features before the decision layer.

mod trace;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::ExplainerSpec;
use crate::tensor::{NodeId, Scalar, Tape, Tensor};

pub use trace::{BiasProbe, ForwardTrace};

/// Index of the defect class; the single logit scores this class.
pub const DEFECT_CLASS: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    /// Output channels of each backbone stage.
    pub widths: Vec<usize>,
    pub slope: f64,
    /// Number of conv3x3 layers in the segmentation branch.
    pub seg_depth: usize,
    pub seg_width: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            height: 64,
            width: 64,
            in_channels: 1,
            widths: vec![16, 32, 64, 64],
            slope: 0.01,
            seg_depth: 2,
            seg_width: 32,
            hidden: 32,
            classes: 2,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.height, self.width, self.in_channels, self.seg_width, self.hidden];
        if dims.contains(&0) || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("all dimensions must be positive: {self:?}")));
        }
        if self.classes != 2 {
            return Err(Error::Config(format!("binary task expects 2 classes, got {}", self.classes)));
        }
        if !(self.slope >= 0.0 && self.slope < 1.0) {
            return Err(Error::Config(format!("leaky slope {} outside [0, 1)", self.slope)));
        }
        let (h, w) = self.feature_size();
        if h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "{}x{} input vanishes after {} pooling stages",
                self.height,
                self.width,
                self.widths.len()
            )));
        }
        Ok(())
    }

    /// Spatial size of `F(x)`.
    pub fn feature_size(&self) -> (usize, usize) {
        self.widths
            .iter()
            .fold((self.height, self.width), |(h, w), _| (h / 2, w / 2))
    }

    /// Spatial size of each stage's activation map (before pooling).
    pub fn stage_sizes(&self) -> Vec<(usize, usize)> {
        let mut size = (self.height, self.width);
        self.widths
            .iter()
            .map(|_| {
                let s = size;
                size = (size.0 / 2, size.1 / 2);
                s
            })
            .collect()
    }

    pub fn feature_channels(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Guided,
}

/// Stage-1 network plus the explainer that turns it into priors; carried by a
/// guided network so it can build its own prior at inference time.
#[derive(Clone, Debug)]
pub struct PriorModel<T: Scalar = f32> {
    pub net: DefectNet<T>,
    pub explainer: ExplainerSpec,
}

#[derive(Clone, Debug)]
struct Layout {
    backbone: Vec<(usize, usize)>,
    feat: (usize, usize),
    seg: Vec<(usize, usize)>,
    seg_out: Option<(usize, usize)>,
    decision: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct DefectNet<T: Scalar = f32> {
    config: ArchConfig,
    mode: Mode,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
    layout: Layout,
    pub prior_model: Option<Box<PriorModel<T>>>,
}

fn param_shapes(config: &ArchConfig, mode: Mode) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut cin = config.in_channels;
    for (i, &w) in config.widths.iter().enumerate() {
        out.push((format!("backbone.conv{i}.weight"), vec![w, cin, 3, 3]));
        out.push((format!("backbone.conv{i}.bias"), vec![w]));
        cin = w;
    }
    out.push(("head.feat.weight".into(), vec![config.hidden, cin]));
    out.push(("head.feat.bias".into(), vec![config.hidden]));
    let mut decision_in = config.hidden;
    if mode == Mode::Guided {
        let mut sin = cin + 1;
        for j in 0..config.seg_depth {
            out.push((format!("seg.conv{j}.weight"), vec![config.seg_width, sin, 3, 3]));
            out.push((format!("seg.conv{j}.bias"), vec![config.seg_width]));
            sin = config.seg_width;
        }
        out.push(("seg.out.weight".into(), vec![1, sin, 1, 1]));
        out.push(("seg.out.bias".into(), vec![1]));
        decision_in += 2;
    }
    out.push(("head.decision.weight".into(), vec![1, decision_in]));
    out.push(("head.decision.bias".into(), vec![1]));
    out
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl<T: Scalar> DefectNet<T> {
    /// He-normal weights, zero biases; every parameter draws from its own
    /// stream keyed by name, so shared parameters agree across modes.
    pub fn init(config: ArchConfig, seed: u64, mode: Mode) -> Result<Self> {
        config.validate()?;
        let shapes = param_shapes(&config, mode);
        let values = shapes
            .iter()
            .map(|(name, shape)| {
                if name.ends_with(".bias") {
                    return Tensor::zeros(shape);
                }
                let fan_in: usize = shape[1..].iter().product();
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(fnv1a(name));
                Tensor::from_fn(shape, |_| T::of(normal.sample(&mut rng)))
            })
            .collect();
        Self::from_parts(config, mode, shapes.into_iter().map(|(n, _)| n).collect(), values)
    }

    fn from_parts(config: ArchConfig, mode: Mode, names: Vec<String>, values: Vec<Tensor<T>>) -> Result<Self> {
        let index: HashMap<String, usize> = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let find = |name: &str| index[name];
        let pair = |prefix: &str| (find(&format!("{prefix}.weight")), find(&format!("{prefix}.bias")));
        let layout = Layout {
            backbone: (0..config.widths.len()).map(|i| pair(&format!("backbone.conv{i}"))).collect(),
            feat: pair("head.feat"),
            seg: if mode == Mode::Guided {
                (0..config.seg_depth).map(|j| pair(&format!("seg.conv{j}"))).collect()
            } else {
                Vec::new()
            },
            seg_out: (mode == Mode::Guided).then(|| pair("seg.out")),
            decision: pair("head.decision"),
        };
        Ok(DefectNet {
            config,
            mode,
            names,
            values,
            index,
            layout,
            prior_model: None,
        })
    }

    /// Build a network from a full, named parameter table.
    pub fn from_params(config: ArchConfig, mode: Mode, params: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config, mode);
        let mut given: HashMap<String, Tensor<T>> = HashMap::new();
        for (name, value) in params {
            if !expected.iter().any(|(n, _)| *n == name) {
                return Err(Error::Format(format!("unknown parameter {name}")));
            }
            given.insert(name, value);
        }
        let mut names = Vec::new();
        let mut values = Vec::new();
        for (name, shape) in expected {
            let value = given
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if value.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "load",
                    lhs: shape,
                    rhs: value.shape().to_vec(),
                });
            }
            names.push(name);
            values.push(value);
        }
        Self::from_parts(config, mode, names, values)
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn is_seg_param(name: &str) -> bool {
        name.starts_with("seg.")
    }

    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let &i = self
            .index
            .get(name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        if self.values[i].shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_param",
                lhs: self.values[i].shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[i] = value;
        Ok(())
    }

    /// Copy every same-named, same-shaped parameter from `other`.
    /// Returns the names of `other`'s parameters that were not copied.
    pub fn warm_start_from(&mut self, other: &DefectNet<T>) -> Vec<String> {
        let mut skipped = Vec::new();
        for (name, value) in other.params() {
            match self.index.get(name) {
                Some(&i) if self.values[i].shape() == value.shape() => self.values[i] = value.clone(),
                _ => skipped.push(name.to_string()),
            }
        }
        skipped
    }

    pub fn cast<U: Scalar>(&self) -> DefectNet<U> {
        DefectNet {
            config: self.config.clone(),
            mode: self.mode,
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
            layout: self.layout.clone(),
            prior_model: self.prior_model.as_ref().map(|p| {
                Box::new(PriorModel {
                    net: p.net.cast(),
                    explainer: p.explainer.clone(),
                })
            }),
        }
    }

    fn check_image(&self, x: &Tensor<T>, what: &'static str) -> Result<()> {
        let want = [1, if what == "prior" { 1 } else { self.config.in_channels }, self.config.height, self.config.width];
        if x.shape() != want {
            return Err(Error::Shape {
                op: what,
                lhs: want.to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Baseline forward pass: logits from the pooled backbone features.
    pub fn classifier_forward(&self, x: &Tensor<T>) -> Result<ForwardTrace<T>> {
        if self.mode != Mode::Baseline {
            return Err(Error::Contract("classifier_forward needs a baseline network".into()));
        }
        self.forward(x, None)
    }

    /// Guided forward pass with the prior map injected as an extra channel.
    pub fn defectnet_forward(&self, x: &Tensor<T>, prior: Option<&Tensor<T>>) -> Result<ForwardTrace<T>> {
        if self.mode != Mode::Guided {
            return Err(Error::Contract("defectnet_forward needs a guided network".into()));
        }
        self.forward(x, prior)
    }

    /// Forward pass for either mode. `x` is `[1, C, H, W]`; `prior`, required
    /// in guided mode, is `[1, 1, H, W]`.
    pub fn forward(&self, x: &Tensor<T>, prior: Option<&Tensor<T>>) -> Result<ForwardTrace<T>> {
        self.build(x, prior, true)
    }

    /// Same values as [`forward`](Self::forward), but the pooled
    /// segmentation features stay attached, so attributions of the score
    /// also run through the segmentation branch.
    pub fn explain_forward(&self, x: &Tensor<T>, prior: Option<&Tensor<T>>) -> Result<ForwardTrace<T>> {
        self.build(x, prior, false)
    }

    fn build(&self, x: &Tensor<T>, prior: Option<&Tensor<T>>, detach: bool) -> Result<ForwardTrace<T>> {
        self.check_image(x, "input")?;
        let prior = match (self.mode, prior) {
            (Mode::Guided, None) => return Err(Error::Contract("guided forward requires a prior map".into())),
            (Mode::Guided, Some(p)) => {
                self.check_image(p, "prior")?;
                Some(p)
            }
            (Mode::Baseline, _) => None,
        };

        let slope = self.config.slope;
        let mut tape = Tape::new();
        let input = tape.input(x.clone())?;
        tape.probe(input);
        let params: Vec<NodeId> = self
            .values
            .iter()
            .map(|v| tape.param(v.clone()))
            .collect::<Result<_>>()?;
        let mut biases = Vec::new();
        let conv_layer = |tape: &mut Tape<T>, x: NodeId, (w, b): (usize, usize), pad: usize, biases: &mut Vec<BiasProbe>| {
            let z = tape.conv2d(x, params[w], Some(params[b]), 1, pad)?;
            tape.probe(z);
            biases.push(BiasProbe {
                name: self.names[b].clone(),
                bias: params[b],
                preact: z,
                spatial: true,
            });
            Ok::<NodeId, Error>(z)
        };

        let mut activations = Vec::new();
        let mut preacts = Vec::new();
        let mut h = input;
        for &layer in &self.layout.backbone {
            let z = conv_layer(&mut tape, h, layer, 1, &mut biases)?;
            let a = tape.leaky_relu(z, slope)?;
            tape.probe(a);
            preacts.push(z);
            activations.push(a);
            h = tape.maxpool2d(a, 2, 2)?;
        }
        let features = h;

        let pooled = tape.global_avg_pool(features)?;
        let (fw, fb) = self.layout.feat;
        let feat_pre = tape.dense(pooled, params[fw], Some(params[fb]))?;
        tape.probe(feat_pre);
        biases.push(BiasProbe {
            name: self.names[fb].clone(),
            bias: params[fb],
            preact: feat_pre,
            spatial: false,
        });
        let feat = tape.leaky_relu(feat_pre, slope)?;

        let mut seg_logits = None;
        let mut prior_node = None;
        let mut decision_in = feat;
        if let Some(prior) = prior {
            let (fh, fwid) = self.config.feature_size();
            let p = tape.input(prior.clone())?;
            prior_node = Some(p);
            let p_small = tape.bilinear_resize(p, fh, fwid)?;
            let mut s = tape.concat(&[features, p_small], 1)?;
            for &layer in &self.layout.seg {
                let z = conv_layer(&mut tape, s, layer, 1, &mut biases)?;
                s = tape.leaky_relu(z, slope)?;
            }
            let logits_map = conv_layer(&mut tape, s, self.layout.seg_out.expect("guided layout"), 0, &mut biases)?;
            seg_logits = Some(logits_map);
            let prob = tape.sigmoid(logits_map)?;
            let gmp = tape.global_max_pool(prob)?;
            let gap = tape.global_avg_pool(prob)?;
            let (gmp, gap) = if detach {
                (tape.stop_gradient(gmp)?, tape.stop_gradient(gap)?)
            } else {
                (gmp, gap)
            };
            decision_in = tape.concat(&[gmp, gap, feat], 1)?;
        }

        let (dw, db) = self.layout.decision;
        let logits = tape.dense(decision_in, params[dw], Some(params[db]))?;
        tape.probe(logits);
        biases.push(BiasProbe {
            name: self.names[db].clone(),
            bias: params[db],
            preact: logits,
            spatial: false,
        });
        let score = tape.sum(logits)?;

        Ok(ForwardTrace {
            tape,
            input,
            prior: prior_node,
            activations,
            preacts,
            biases,
            params,
            features,
            logits,
            score,
            seg_logits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchConfig {
        ArchConfig {
            height: 16,
            width: 16,
            widths: vec![4, 6],
            seg_width: 5,
            hidden: 4,
            ..ArchConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = DefectNet::<f32>::init(tiny(), 3, Mode::Guided).unwrap();
        let b = DefectNet::<f32>::init(tiny(), 3, Mode::Guided).unwrap();
        let c = DefectNet::<f32>::init(tiny(), 4, Mode::Guided).unwrap();
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn baseline_registry_shares_backbone_names() {
        let base = DefectNet::<f32>::init(tiny(), 1, Mode::Baseline).unwrap();
        let guided = DefectNet::<f32>::init(tiny(), 1, Mode::Guided).unwrap();
        for name in base.param_names().iter().filter(|n| n.starts_with("backbone.")) {
            assert!(guided.param(name).is_some());
            assert_eq!(base.param(name), guided.param(name), "{name}");
        }
        assert!(base.param_names().iter().all(|n| guided.param(n).is_some()));
        assert!(guided.param_names().len() > base.param_names().len());
        let seg_in = guided.param("seg.conv0.weight").unwrap().shape()[1];
        assert_eq!(seg_in, tiny().feature_channels() + 1);
    }

    #[test]
    fn degenerate_spatial_size_rejected() {
        let cfg = ArchConfig {
            height: 4,
            width: 64,
            widths: vec![8, 8, 8],
            ..ArchConfig::default()
        };
        assert!(matches!(DefectNet::<f32>::init(cfg, 0, Mode::Baseline), Err(Error::Config(_))));
    }

    #[test]
    fn guided_forward_needs_prior() {
        let net = DefectNet::<f64>::init(tiny(), 0, Mode::Guided).unwrap();
        let x = Tensor::zeros(&[1, 1, 16, 16]);
        assert!(matches!(net.forward(&x, None), Err(Error::Contract(_))));
        assert!(net.classifier_forward(&x).is_err());
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let net = DefectNet::<f64>::init(tiny(), 0, Mode::Baseline).unwrap();
        let x = Tensor::zeros(&[1, 1, 15, 16]);
        assert!(matches!(net.forward(&x, None), Err(Error::Shape { .. })));
    }

    #[test]
    fn warm_start_copies_shared_parameters() {
        let base = DefectNet::<f32>::init(tiny(), 5, Mode::Baseline).unwrap();
        let mut guided = DefectNet::<f32>::init(tiny(), 6, Mode::Guided).unwrap();
        let seg_before = guided.param("seg.conv0.weight").unwrap().clone();
        let skipped = guided.warm_start_from(&base);
        assert_eq!(skipped, vec!["head.decision.weight".to_string()]);
        assert_eq!(guided.param("backbone.conv1.weight"), base.param("backbone.conv1.weight"));
        assert_eq!(guided.param("seg.conv0.weight").unwrap(), &seg_before);
    }
}
