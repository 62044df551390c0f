//! Losses, the lambda schedule, SGD with momentum, flip augmentation, the two
//! training stages and evaluation metrics.

mod augment;
mod losses;
mod metrics;
mod optim;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{save_checkpoint, Dataset, Mask};
use crate::error::{Error, Result};
use crate::nn::{ArchConfig, DefectNet, ForwardTrace, Mode, PriorModel};
use crate::prior::{dequantize, PriorStore};
use crate::tensor::{NodeId, Scalar, Tensor};

pub use augment::{apply_flips, augment_flip, AugmentedSample, Flips};
pub use losses::{bce, lambda_at, seg_loss, total_loss};
pub use metrics::{average_precision, evaluate, Metrics};
pub use optim::{sgd_momentum_step, SgdMomentum};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// `k_epoch`.
    pub epochs: usize,
    pub seed: u64,
    pub augment: bool,
    pub stage: Mode,
    /// Architecture; its height and width are the input resize target.
    pub arch: ArchConfig,
    /// Stage 2 only: start from the stage-1 weights instead of a fresh init.
    pub warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            momentum: 0.9,
            batch_size: 4,
            epochs: 50,
            seed: 0,
            augment: true,
            stage: Mode::Baseline,
            arch: ArchConfig::default(),
            warm_start: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        self.arch.validate()
    }
}

/// Loss terms of one optimizer step, averaged over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub epoch: usize,
    pub step: usize,
    pub lambda: f64,
    pub l_cls: f64,
    pub l_seg: f64,
    pub l_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub lambda: f64,
    pub l_cls: f64,
    pub l_seg: f64,
    pub l_total: f64,
    pub train_accuracy: f64,
    /// Largest |gradient| the classification loss alone sends into the
    /// segmentation branch, measured on the epoch's first batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg_grad_from_cls: Option<f64>,
    /// Whether this epoch improved mean `l_cls` and was checkpointed.
    pub improved: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
    /// Kept out of `epochs.jsonl` so run records stay byte-reproducible;
    /// written to `timing.jsonl` instead.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T: Scalar = f32> {
    /// Parameters of the best epoch (lowest mean `l_cls`), as checkpointed.
    pub model: DefectNet<T>,
    pub best_epoch: usize,
    pub reports: Vec<EpochReport>,
    pub steps: Vec<LossBreakdown>,
    /// Losses of the final parameters over the training set at
    /// `lambda_at(k_epoch, k_epoch)`, with no update.
    pub closing: LossBreakdown,
}

/// Where a training run writes its files and what it evaluates on.
#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions<'a> {
    pub run_dir: Option<&'a Path>,
    pub eval: Option<&'a Dataset>,
}

struct Prepared {
    sample: AugmentedSample,
    label: u8,
}

struct SampleOut<T: Scalar> {
    grads: Vec<Tensor<T>>,
    l_cls: f64,
    l_seg: f64,
    l_total: f64,
    correct: bool,
    seg_leak: Option<f64>,
}

struct Losses {
    cls: NodeId,
    seg: Option<NodeId>,
    total: NodeId,
}

fn attach_losses<T: Scalar>(
    net: &DefectNet<T>,
    trace: &mut ForwardTrace<T>,
    label: u8,
    pseudo: Option<&Mask>,
    lambda: f64,
) -> Result<Losses> {
    let tape = &mut trace.tape;
    let y = tape.constant(Tensor::full(&[1, 1], T::of(label as f64)))?;
    let cls = tape.bce_with_logits(trace.logits, y)?;
    let Some(seg_logits) = trace.seg_logits else {
        return Ok(Losses {
            cls,
            seg: None,
            total: cls,
        });
    };
    let (fh, fw) = net.config().feature_size();
    let pseudo = pseudo.ok_or_else(|| Error::Contract("guided step without a pseudo-label".into()))?;
    let target = tape.constant(pseudo.resize_nearest(fh, fw).to_tensor())?;
    let seg = tape.bce_with_logits(seg_logits, target)?;
    let a = tape.scale(seg, lambda)?;
    let b = tape.scale(cls, 1.0 - lambda)?;
    let total = tape.add(a, b)?;
    Ok(Losses {
        cls,
        seg: Some(seg),
        total,
    })
}

fn forward_sample<T: Scalar>(net: &DefectNet<T>, s: &AugmentedSample) -> Result<ForwardTrace<T>> {
    let x = s.image.input_tensor();
    let prior = s.prior.as_ref().map(|p| dequantize(p, s.image.height, s.image.width));
    net.forward(&x, prior.as_ref())
}

fn sample_step<T: Scalar>(net: &DefectNet<T>, p: &Prepared, lambda: f64, check: bool) -> Result<SampleOut<T>> {
    let mut trace = forward_sample(net, &p.sample)?;
    let losses = attach_losses(net, &mut trace, p.label, p.sample.pseudo.as_ref(), lambda)?;
    let value = |id: NodeId| trace.tape.value(id).item().as_f64();
    let (l_cls, l_total) = (value(losses.cls), value(losses.total));
    let l_seg = losses.seg.map(value).unwrap_or(0.0);
    let seg_leak = if check && losses.seg.is_some() {
        let g = trace.tape.backward(losses.cls)?;
        let leak = net
            .param_names()
            .iter()
            .zip(&trace.params)
            .filter(|(n, _)| DefectNet::<T>::is_seg_param(n))
            .map(|(_, &id)| g.of(id).max_abs().as_f64())
            .fold(0.0, f64::max);
        Some(leak)
    } else {
        None
    };
    let mut grads = trace.tape.backward(losses.total)?;
    let grads = trace
        .params
        .iter()
        .map(|&id| grads.remove(id).expect("params always receive gradients"))
        .collect();
    Ok(SampleOut {
        grads,
        l_cls,
        l_seg,
        l_total,
        correct: (trace.logit() > 0.0) == (p.label == 1),
        seg_leak,
    })
}

fn sample_losses<T: Scalar>(net: &DefectNet<T>, p: &Prepared, lambda: f64) -> Result<(f64, f64, f64)> {
    let mut trace = forward_sample(net, &p.sample)?;
    let losses = attach_losses(net, &mut trace, p.label, p.sample.pseudo.as_ref(), lambda)?;
    let value = |id: NodeId| trace.tape.value(id).item().as_f64();
    Ok((value(losses.cls), losses.seg.map(value).unwrap_or(0.0), value(losses.total)))
}

struct RunFiles {
    dir: PathBuf,
    epochs: BufWriter<File>,
    steps: BufWriter<File>,
    timing: BufWriter<File>,
}

impl RunFiles {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str| {
            let p = dir.join(name);
            File::create(&p).map(BufWriter::new).map_err(|e| Error::io(p, e))
        };
        Ok(RunFiles {
            dir: dir.to_path_buf(),
            epochs: open("epochs.jsonl")?,
            steps: open("steps.jsonl")?,
            timing: open("timing.jsonl")?,
        })
    }

    fn line<S: Serialize>(w: &mut BufWriter<File>, dir: &Path, value: &S) -> Result<()> {
        let mut text = serde_json::to_string(value)?;
        text.push('\n');
        w.write_all(text.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(dir, e))
    }
}

fn prepare(dataset: &Dataset, priors: Option<&PriorStore>) -> Result<Vec<Prepared>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            let entry = match priors {
                Some(store) => Some(
                    store
                        .get(&s.id)
                        .ok_or_else(|| Error::Format(format!("no prior for sample {}", s.id)))?,
                ),
                None => None,
            };
            Ok(Prepared {
                sample: AugmentedSample {
                    image: s.image.clone(),
                    prior: entry.map(|e| e.saliency.clone()),
                    pseudo: entry.map(|e| e.mask.clone()),
                },
                label: s.label,
            })
        })
        .collect()
}

fn check_sizes(config: &TrainConfig, dataset: &Dataset) -> Result<()> {
    let want = (config.arch.height, config.arch.width);
    match dataset.samples.iter().find(|s| (s.image.height, s.image.width) != want) {
        Some(s) => Err(Error::Shape {
            op: "train",
            lhs: vec![want.0, want.1],
            rhs: vec![s.image.height, s.image.width],
        }),
        None if dataset.is_empty() => Err(Error::Contract("training set is empty".into())),
        None => Ok(()),
    }
}

fn run<T: Scalar>(
    config: &TrainConfig,
    mut net: DefectNet<T>,
    data: &[Prepared],
    opts: RunOptions<'_>,
) -> Result<TrainOutcome<T>> {
    let guided = net.mode() == Mode::Guided;
    let mut files = opts.run_dir.map(RunFiles::create).transpose()?;
    let mut sgd = SgdMomentum::<T>::new(config.lr, config.momentum);
    let mut reports = Vec::with_capacity(config.epochs);
    let mut steps = Vec::new();
    let mut best: Option<(f64, usize, DefectNet<T>)> = None;
    let flip_seed = config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15);

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lambda = if guided { lambda_at(epoch, config.epochs)? } else { 0.0 };
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let (mut sum_cls, mut sum_seg, mut sum_total, mut correct) = (0.0, 0.0, 0.0, 0usize);
        let mut leak: Option<f64> = None;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let check = guided && b == 0;
            let outs = batch
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let flipped;
                    let prepared = if config.augment {
                        let mut rng = ChaCha8Rng::seed_from_u64(flip_seed);
                        rng.set_stream((epoch * data.len() + b * config.batch_size + j) as u64);
                        flipped = Prepared {
                            sample: augment_flip(&data[i].sample, &mut rng),
                            label: data[i].label,
                        };
                        &flipped
                    } else {
                        &data[i]
                    };
                    sample_step(&net, prepared, lambda, check)
                })
                .collect::<Result<Vec<_>>>()?;

            let n = T::of(outs.len() as f64);
            let mut grads: Vec<Tensor<T>> = outs[0].grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            let (mut b_cls, mut b_seg, mut b_total) = (0.0, 0.0, 0.0);
            for out in &outs {
                for (acc, g) in grads.iter_mut().zip(&out.grads) {
                    acc.add_assign(g);
                }
                b_cls += out.l_cls;
                b_seg += out.l_seg;
                b_total += out.l_total;
                correct += usize::from(out.correct);
                if let Some(l) = out.seg_leak {
                    leak = Some(leak.unwrap_or(0.0).max(l));
                }
            }
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v = *v / n);
            }
            sgd.step(net.values_mut(), &grads)?;
            if !net.values().iter().all(Tensor::all_finite) {
                return Err(Error::NumericFault {
                    op: "sgd_momentum_step",
                });
            }

            let m = outs.len() as f64;
            let step = LossBreakdown {
                epoch,
                step: steps.len(),
                lambda,
                l_cls: b_cls / m,
                l_seg: b_seg / m,
                l_total: b_total / m,
            };
            if let Some(f) = files.as_mut() {
                RunFiles::line(&mut f.steps, &f.dir, &step)?;
            }
            steps.push(step);
            sum_cls += b_cls;
            sum_seg += b_seg;
            sum_total += b_total;
        }

        let n = data.len() as f64;
        let mean_cls = sum_cls / n;
        let improved = best.as_ref().map_or(true, |(l, _, _)| mean_cls < *l);
        if improved {
            best = Some((mean_cls, epoch, net.clone()));
            if let Some(f) = &files {
                save_checkpoint(&net, &f.dir.join("model.ckpt"))?;
            }
        }
        let metrics = match opts.eval {
            Some(ds) => Some(evaluate(&net.cast::<f32>(), ds, None)?),
            None => None,
        };
        let report = EpochReport {
            epoch,
            lambda,
            l_cls: mean_cls,
            l_seg: sum_seg / n,
            l_total: sum_total / n,
            train_accuracy: correct as f64 / n,
            seg_grad_from_cls: leak,
            improved,
            metrics,
            wall_clock_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: lambda {:.3} l_cls {:.4} l_seg {:.4} acc {:.3} ({:.1}s)",
            report.lambda,
            report.l_cls,
            report.l_seg,
            report.train_accuracy,
            report.wall_clock_s
        );
        if let Some(f) = files.as_mut() {
            RunFiles::line(&mut f.epochs, &f.dir, &report)?;
            let timing = serde_json::json!({ "epoch": epoch, "wall_clock_s": report.wall_clock_s });
            RunFiles::line(&mut f.timing, &f.dir, &timing)?;
        }
        reports.push(report);
    }

    let lambda = if guided { lambda_at(config.epochs, config.epochs)? } else { 0.0 };
    let totals = data
        .par_iter()
        .map(|p| sample_losses(&net, p, lambda))
        .collect::<Result<Vec<_>>>()?;
    let n = totals.len() as f64;
    let closing = LossBreakdown {
        epoch: config.epochs,
        step: steps.len(),
        lambda,
        l_cls: totals.iter().map(|t| t.0).sum::<f64>() / n,
        l_seg: totals.iter().map(|t| t.1).sum::<f64>() / n,
        l_total: totals.iter().map(|t| t.2).sum::<f64>() / n,
    };
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model,
        best_epoch,
        reports,
        steps,
        closing,
    })
}

/// Stage 1: the baseline classifier trained on the classification loss alone.
pub fn train_stage1<T: Scalar>(config: &TrainConfig, dataset: &Dataset, opts: RunOptions<'_>) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if config.stage != Mode::Baseline {
        return Err(Error::Config("stage 1 trains a baseline network".into()));
    }
    check_sizes(config, dataset)?;
    let net = DefectNet::init(config.arch.clone(), config.seed, Mode::Baseline)?;
    run(config, net, &prepare(dataset, None)?, opts)
}

/// Stage 2: the guided network trained on the lambda-weighted sum of the
/// segmentation loss against the pseudo-labels and the classification loss.
/// The stage-1 model rides along so the network can build its own priors.
pub fn train_stage2<T: Scalar>(
    config: &TrainConfig,
    dataset: &Dataset,
    priors: &PriorStore,
    prior_model: PriorModel<T>,
    opts: RunOptions<'_>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if config.stage != Mode::Guided {
        return Err(Error::Config("stage 2 trains a guided network".into()));
    }
    check_sizes(config, dataset)?;
    priors.check_covers(dataset)?;
    if (priors.height, priors.width) != (config.arch.height, config.arch.width) {
        return Err(Error::Shape {
            op: "train_stage2",
            lhs: vec![config.arch.height, config.arch.width],
            rhs: vec![priors.height, priors.width],
        });
    }
    let mut net = DefectNet::init(config.arch.clone(), config.seed, Mode::Guided)?;
    if config.warm_start {
        let skipped = net.warm_start_from(&prior_model.net);
        log::warn!("warm start skipped {skipped:?}; segmentation branch left at init");
    }
    net.prior_model = Some(Box::new(prior_model));
    run(config, net, &prepare(dataset, Some(priors))?, opts)
}
