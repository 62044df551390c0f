//! Gradient checking of recorded tapes against central finite differences.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_difference_gradient, NodeId, NodeRole, Op, Tape, Tensor};
use crate::error::{Error, Result};

impl Tape<f64> {
    /// Overwrite a leaf value; interior nodes go stale until [`Tape::replay`].
    pub fn replace_leaf(&mut self, id: NodeId, value: Tensor<f64>) -> Result<()> {
        if self.role(id) == NodeRole::Interior || self.value(id).shape() != value.shape() {
            return Err(Error::Contract(format!("{id:?} is not a leaf of shape {:?}", value.shape())));
        }
        self.set_leaf_unchecked(id, value);
        Ok(())
    }

    /// Smallest distance of any piecewise-linear primitive from a kink:
    /// activation inputs from zero, pooling windows from a tie.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for i in 0..self.len() {
            let id = NodeId::from_index(i);
            let Some(op) = self.op(id) else { continue };
            let inputs = self.inputs_of(id);
            match op {
                Op::Relu | Op::LeakyRelu { .. } => {
                    for v in self.value(inputs[0]).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::MaxPool2d { kernel, stride } => {
                    let x = self.value(inputs[0]);
                    let [n, c, h, w] = x.shape()[..] else { continue };
                    let (ho, wo) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
                    for p in 0..n * c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let window: Vec<f64> = (0..kernel * kernel)
                                    .map(|k| {
                                        let (ky, kx) = (k / kernel, k % kernel);
                                        x.data()[p * h * w + (oy * stride + ky) * w + ox * stride + kx]
                                    })
                                    .collect();
                                margin = margin.min(top_two_gap(&window));
                            }
                        }
                    }
                }
                Op::GlobalMaxPool => {
                    let x = self.value(inputs[0]);
                    let hw = x.shape()[2] * x.shape()[3];
                    for plane in x.data().chunks(hw) {
                        margin = margin.min(top_two_gap(plane));
                    }
                }
                _ => {}
            }
        }
        margin
    }
}

fn top_two_gap(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::INFINITY;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[0] - sorted[1]
}

/// `||a - b|| / max(||a||, ||b||, floor)`.
pub fn relative_error(a: &Tensor<f64>, b: &Tensor<f64>, floor: f64) -> f64 {
    let norm = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a.data()).max(norm(b.data())).max(floor)
}

/// Largest relative error, over every param of `tape`, between the backward
/// pass and central differences of step `h` computed by replaying the tape
/// with detached values held fixed.
pub fn max_param_error(tape: &Tape<f64>, loss: NodeId, h: f64) -> Result<f64> {
    let analytic = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    let params: Vec<NodeId> = tape.params().collect();
    for p in params {
        let mut scratch = tape.clone();
        let numeric = finite_difference_gradient(
            |v| {
                scratch.set_leaf_unchecked(p, v.clone());
                scratch
                    .replay_detached()
                    .map(|vals| vals[loss.index()].item())
                    .unwrap_or(f64::NAN)
            },
            tape.value(p),
            h,
        );
        worst = worst.max(relative_error(analytic.of(p), &numeric, 1e-6));
    }
    Ok(worst)
}

/// Primitives a random graph may exercise.
pub const PRIMITIVES: [&str; 18] = [
    "add",
    "mul",
    "matmul",
    "conv2d",
    "dense",
    "leaky_relu",
    "relu",
    "sigmoid",
    "maxpool2d",
    "global_avg_pool",
    "global_max_pool",
    "concat",
    "bilinear_upsample",
    "sum",
    "mean",
    "scale",
    "stop_gradient",
    "bce_with_logits",
];

/// A random small image-to-scalar graph over random params, drawn so that no
/// piecewise-linear primitive sits within `margin` of a kink.
pub fn random_graph(seed: u64, margin: f64) -> Result<(Tape<f64>, NodeId)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let (tape, loss) = draw_graph(&mut rng)?;
        if tape.kink_margin() >= margin {
            return Ok((tape, loss));
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn draw_graph(rng: &mut ChaCha8Rng) -> Result<(Tape<f64>, NodeId)> {
    let mut tape = Tape::new();
    let mut c = rng.gen_range(1..=2);
    let mut h = rng.gen_range(4..=6);
    let mut w = rng.gen_range(4..=6);
    let mut x = tape.param(rand_tensor(rng, &[1, c, h, w]))?;

    let mut stages = vec!["conv", "act", "pool", "resize", "binary", "concat", "detach", "scale"];
    stages.shuffle(rng);
    stages.truncate(rng.gen_range(2..=5));
    for stage in stages {
        match stage {
            "conv" => {
                let cout = rng.gen_range(1..=3);
                let stride = rng.gen_range(1..=2);
                let k = rng.gen_range(1..=3usize).min(h).min(w);
                let pad = rng.gen_range(0..=1);
                let wk = tape.param(rand_tensor(rng, &[cout, c, k, k]))?;
                let b = tape.param(rand_tensor(rng, &[cout]))?;
                x = tape.conv2d(x, wk, Some(b), stride, pad)?;
                let s = tape.value(x).shape().to_vec();
                (c, h, w) = (s[1], s[2], s[3]);
            }
            "act" => {
                x = match rng.gen_range(0..3) {
                    0 => tape.relu(x)?,
                    1 => tape.leaky_relu(x, rng.gen_range(0.01..0.3))?,
                    _ => tape.sigmoid(x)?,
                };
            }
            "pool" if h >= 2 && w >= 2 => {
                x = tape.maxpool2d(x, 2, rng.gen_range(1..=2))?;
                let s = tape.value(x).shape().to_vec();
                (h, w) = (s[2], s[3]);
            }
            "resize" => {
                (h, w) = (rng.gen_range(2..=8), rng.gen_range(2..=8));
                x = tape.bilinear_resize(x, h, w)?;
            }
            "binary" => {
                let other = tape.param(rand_tensor(rng, &[1, c, h, w]))?;
                x = if rng.gen_bool(0.5) { tape.add(x, other)? } else { tape.mul(x, other)? };
            }
            "concat" => {
                let extra = rng.gen_range(1..=2);
                let other = tape.param(rand_tensor(rng, &[1, extra, h, w]))?;
                x = tape.concat(&[x, other], 1)?;
                c += extra;
            }
            "detach" => {
                let d = tape.stop_gradient(x)?;
                let d = tape.scale(d, 0.5)?;
                x = tape.add(x, d)?;
            }
            _ => {
                x = tape.scale(x, rng.gen_range(-2.0..2.0))?;
            }
        }
    }

    let pooled = if rng.gen_bool(0.5) {
        tape.global_avg_pool(x)?
    } else {
        tape.global_max_pool(x)?
    };
    let hidden = rng.gen_range(1..=3);
    let dw = tape.param(rand_tensor(rng, &[hidden, c]))?;
    let db = tape.param(rand_tensor(rng, &[hidden]))?;
    let mut y = tape.dense(pooled, dw, Some(db))?;
    if rng.gen_bool(0.5) {
        let m = tape.param(rand_tensor(rng, &[hidden, 2]))?;
        y = tape.matmul(y, m)?;
    }
    let loss = match rng.gen_range(0..3) {
        0 => tape.sum(y)?,
        1 => tape.mean(y)?,
        _ => {
            let shape = tape.value(y).shape().to_vec();
            let target = Tensor::from_fn(&shape, |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
            let t = tape.constant(target)?;
            tape.bce_with_logits(y, t)?
        }
    };
    Ok((tape, loss))
}
