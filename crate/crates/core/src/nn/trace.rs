use crate::error::{Error, Result};
use crate::tensor::{GradientSet, NodeId, Scalar, Tape, Tensor};

/// A bias parameter together with the node it is added into.
#[derive(Clone, Debug)]
pub struct BiasProbe {
    pub name: String,
    pub bias: NodeId,
    /// The pre-activation the bias feeds; its gradient is the per-position bias gradient.
    pub preact: NodeId,
    /// Conv biases are spatial; dense-layer biases are not.
    pub spatial: bool,
}

/// One recorded forward pass: the tape plus the probed nodes explainers need.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Scalar = f32> {
    pub tape: Tape<T>,
    pub input: NodeId,
    pub prior: Option<NodeId>,
    /// Post-activation map of every backbone stage, shallow to deep.
    pub activations: Vec<NodeId>,
    pub preacts: Vec<NodeId>,
    pub biases: Vec<BiasProbe>,
    /// Parameter nodes in registry order.
    pub params: Vec<NodeId>,
    /// `F(x)`, the backbone output.
    pub features: NodeId,
    pub logits: NodeId,
    /// Scalar sum of the logits; the defect-class score.
    pub score: NodeId,
    pub seg_logits: Option<NodeId>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        self.tape.value(id)
    }

    /// Defect logit.
    pub fn logit(&self) -> f64 {
        self.tape.value(self.score).item().as_f64()
    }

    /// Score of `class`: the defect logit for class 1, its negation for class 0.
    pub fn class_score(&self, class: usize) -> Result<f64> {
        Ok(self.logit() * class_sign(class)?)
    }

    /// Gradients of the class score with respect to every param and probe.
    pub fn class_gradients(&self, class: usize) -> Result<GradientSet<T>> {
        self.tape.backward_seeded(self.score, T::of(class_sign(class)?))
    }

    pub fn input_shape(&self) -> (usize, usize) {
        let s = self.tape.value(self.input).shape();
        (s[2], s[3])
    }
}

fn class_sign(class: usize) -> Result<f64> {
    match class {
        0 => Ok(-1.0),
        1 => Ok(1.0),
        _ => Err(Error::Contract(format!("class index {class} out of range for a binary head"))),
    }
}

impl<T: Scalar> ForwardTrace<T> {
    /// Trace over a hand-built tape whose `score` node is the class-1 score.
    /// Probes the input, every activation and every bias pre-activation.
    pub fn from_tape(
        mut tape: Tape<T>,
        input: NodeId,
        activations: Vec<NodeId>,
        biases: Vec<BiasProbe>,
        score: NodeId,
    ) -> Self {
        tape.probe(input);
        activations.iter().for_each(|&a| tape.probe(a));
        biases.iter().for_each(|b| tape.probe(b.preact));
        let params = tape.params().collect();
        let features = activations.last().copied().unwrap_or(input);
        ForwardTrace {
            tape,
            input,
            prior: None,
            activations,
            preacts: biases.iter().map(|b| b.preact).collect(),
            biases,
            params,
            features,
            logits: score,
            score,
            seg_logits: None,
        }
    }
}
