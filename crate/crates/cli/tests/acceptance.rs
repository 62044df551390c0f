//! End-to-end acceptance run: one PASS/FAIL line per criterion.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use num::{BigInt, BigRational};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saliency_prior::data::{synthesize, Dataset, SynthParams};
use saliency_prior::explain::{completeness_residual, ExplainerKind, ExplainerSpec};
use saliency_prior::nn::{ArchConfig, BiasProbe, DefectNet, ForwardTrace, Mode, PriorModel};
use saliency_prior::prior::{extract_priors, otsu_threshold, Histogram256};
use saliency_prior::tensor::gradcheck::{max_param_error, random_graph};
use saliency_prior::tensor::{Tape, Tensor};
use saliency_prior::train::{average_precision, evaluate, train_stage1, train_stage2, RunOptions, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() -> ExitCode {
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.strip_prefix("c").and_then(|n| n.parse().ok()))
        .collect();
    let criteria: [(usize, &str, fn() -> Outcome); 9] = [
        (1, "autodiff vs finite differences", c1_autodiff),
        (2, "FullGrad completeness", c2_completeness),
        (3, "Otsu oracle equivalence", c3_otsu),
        (4, "AP oracle equivalence", c4_ap),
        (5, "lambda schedule and loss identity", c5_schedule),
        (6, "gradient isolation", c6_isolation),
        (7, "synthetic benchmark AP", c7_benchmark),
        (8, "saliency localization IoU", c8_localization),
        (9, "CLI chain determinism", c9_determinism),
    ];
    let (mut ran, mut failed) = (0, 0);
    for (n, name, run) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let result = run();
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n} [{verdict}] {name}: {} ({:.1}s)",
            result.detail,
            started.elapsed().as_secs_f64()
        );
        ran += 1;
        failed += usize::from(!result.pass);
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn c1_autodiff() -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..200 {
        let (tape, loss) = random_graph(10_000 + seed, 1e-3).expect("graph builds");
        worst = worst.max(max_param_error(&tape, loss, 1e-4).expect("gradcheck"));
    }
    let elapsed = started.elapsed();
    outcome(
        worst < 1e-3 && elapsed < Duration::from_secs(60),
        format!("200 graphs, worst relative error {worst:.2e}, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn leaky_network(seed: u64) -> ForwardTrace<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = ArchConfig {
        height: 16,
        width: 16,
        widths: vec![4, 6, 8],
        hidden: 6,
        ..ArchConfig::default()
    };
    let mut net = DefectNet::<f64>::init(arch, seed, Mode::Baseline).expect("valid arch");
    let names: Vec<String> = net.param_names().to_vec();
    for name in names.iter().filter(|n| n.ends_with(".bias")) {
        let shape = net.param(name).expect("registered").shape().to_vec();
        net.set_param(name, rand_tensor(&mut rng, &shape, -0.3, 0.3)).expect("same shape");
    }
    let mut x = rand_tensor(&mut rng, &[1, 1, 16, 16], 0.0, 1.0);
    loop {
        let trace = net.classifier_forward(&x).expect("forward");
        if trace.tape.kink_margin() >= 1e-6 {
            return trace;
        }
        x = Tensor::from_fn(&[1, 1, 16, 16], |i| x.data()[i] + rng.gen_range(-1e-3..1e-3));
    }
}

fn sigmoid_network(seed: u64) -> ForwardTrace<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = [5, 7, 4];
    let mut tape = Tape::new();
    let x = tape.input(rand_tensor(&mut rng, &[1, widths[0], 1, 1], -1.0, 1.0)).unwrap();
    let mut h = x;
    let mut biases = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        let w = tape.param(rand_tensor(&mut rng, &[pair[1], pair[0], 1, 1], -1.0, 1.0)).unwrap();
        let b = tape.param(rand_tensor(&mut rng, &[pair[1]], -0.5, 0.5)).unwrap();
        let z = tape.conv2d(h, w, Some(b), 1, 0).unwrap();
        biases.push(BiasProbe {
            name: format!("layer{i}.bias"),
            bias: b,
            preact: z,
            spatial: true,
        });
        h = tape.sigmoid(z).unwrap();
    }
    let pooled = tape.global_max_pool(h).unwrap();
    let wo = tape.param(rand_tensor(&mut rng, &[1, 4], -1.0, 1.0)).unwrap();
    let bo = tape.param(rand_tensor(&mut rng, &[1], -0.5, 0.5)).unwrap();
    let y = tape.dense(pooled, wo, Some(bo)).unwrap();
    biases.push(BiasProbe {
        name: "out.bias".into(),
        bias: bo,
        preact: y,
        spatial: false,
    });
    let score = tape.sum(y).unwrap();
    ForwardTrace::from_tape(tape, x, Vec::new(), biases, score)
}

fn c2_completeness() -> Outcome {
    let started = Instant::now();
    let worst = (0..50)
        .map(|seed| completeness_residual(&leaky_network(seed), 1).expect("residual"))
        .fold(0.0f64, f64::max);
    let control = (0..5)
        .map(|seed| completeness_residual(&sigmoid_network(seed), 1).expect("residual"))
        .fold(f64::INFINITY, f64::min);
    let elapsed = started.elapsed();
    outcome(
        worst < 1e-5 && control > 1e-2 && elapsed < Duration::from_secs(30),
        format!(
            "50 leaky nets, worst residual {worst:.2e}; sigmoid control residual {control:.2e}; {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn otsu_oracle(counts: &[u64; 256]) -> u8 {
    let big = |v: u64| BigRational::from_integer(BigInt::from(v));
    let total: u64 = counts.iter().sum();
    let mut best: Option<(BigRational, u8)> = None;
    for t in 0..256usize {
        let n0: u64 = counts[..=t].iter().sum();
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s0: u64 = (0..=t).map(|v| v as u64 * counts[v]).sum();
        let s1: u64 = (t + 1..256).map(|v| v as u64 * counts[v]).sum();
        let diff = big(s0) / big(n0) - big(s1) / big(n1);
        let var = big(n0) / big(total) * (big(n1) / big(total)) * diff.clone() * diff;
        if best.as_ref().map_or(true, |(b, _)| var > *b) {
            best = Some((var, t as u8));
        }
    }
    best.map_or_else(|| counts.iter().position(|&c| c > 0).unwrap() as u8, |(_, t)| t)
}

fn c3_otsu() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for case in 0..100 {
        let mut counts = [0u64; 256];
        if case == 0 {
            counts[rng.gen_range(0..256)] = rng.gen_range(1..1000);
        } else if case % 3 == 0 {
            for _ in 0..rng.gen_range(2..8) {
                counts[rng.gen_range(0..256)] += rng.gen_range(1..5000);
            }
        } else {
            counts.iter_mut().for_each(|c| *c = rng.gen_range(0..100));
        }
        if otsu_threshold(&Histogram256::from_counts(counts)).ok() != Some(otsu_oracle(&counts)) {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("100 histograms incl. single-level, {mismatches} mismatches"),
    )
}

/// Area under the precision-recall step curve: walk the stable descending
/// ranking one cutoff at a time and add precision times the recall gained.
fn ap_by_enumeration(scores: &[f64], labels: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let (mut area, mut prev_recall) = (0.0, 0.0);
    for cutoff in 1..=order.len() {
        let tp = order[..cutoff].iter().filter(|&&i| labels[i]).count() as f64;
        let (precision, recall) = (tp / cutoff as f64, tp / positives);
        area += precision * (recall - prev_recall);
        prev_recall = recall;
    }
    area
}

fn c4_ap() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=20);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64 / 9.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[rng.gen_range(0..n)] = true;
        let got = average_precision(&scores, &labels).expect("has positives");
        worst = worst.max((got - ap_by_enumeration(&scores, &labels)).abs());
    }
    outcome(worst <= 1e-12, format!("1000 vectors, worst deviation {worst:.1e}"))
}

fn tiny_split(n_normal: usize, n_defect: usize, size: usize, seed: u64) -> Dataset {
    let params = SynthParams {
        n_normal,
        n_defect,
        size,
        seed,
        ..SynthParams::default()
    };
    Dataset {
        split: format!("synthetic-{seed}"),
        samples: synthesize(&params).expect("valid params").into_iter().map(|s| s.sample).collect(),
        generator: Some(params),
    }
}

fn tiny_config(epochs: usize, stage: Mode) -> TrainConfig {
    TrainConfig {
        epochs,
        stage,
        lr: 5e-3,
        arch: ArchConfig {
            height: 32,
            width: 32,
            widths: vec![4, 8, 8],
            seg_width: 6,
            hidden: 8,
            ..ArchConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn tiny_guided_run<T: saliency_prior::tensor::Scalar>(
    epochs: usize,
) -> saliency_prior::train::TrainOutcome<T> {
    let data = tiny_split(16, 8, 32, 5);
    let stage1 = train_stage1::<T>(&tiny_config(2, Mode::Baseline), &data, RunOptions::default()).expect("stage 1");
    let spec = ExplainerSpec::new(ExplainerKind::LayerCam);
    let priors = extract_priors(&stage1.model.cast(), &data, &spec, "acceptance").expect("priors");
    let prior_model = PriorModel {
        net: stage1.model,
        explainer: spec,
    };
    train_stage2::<T>(
        &tiny_config(epochs, Mode::Guided),
        &data,
        &priors,
        prior_model,
        RunOptions::default(),
    )
    .expect("stage 2")
}

fn c5_schedule() -> Outcome {
    let run = tiny_guided_run::<f64>(4);
    let worst = run
        .steps
        .iter()
        .chain(std::iter::once(&run.closing))
        .map(|s| (s.l_total - (s.lambda * s.l_seg + (1.0 - s.lambda) * s.l_cls)).abs())
        .fold(0.0f64, f64::max);
    let first = run.steps.first().map(|s| s.lambda);
    let lambdas: Vec<f64> = run.reports.iter().map(|r| r.lambda).collect();
    let exact = lambdas.iter().enumerate().all(|(k, &l)| l == 1.0 - k as f64 / 4.0);
    outcome(
        worst < 1e-9 && first == Some(1.0) && run.closing.lambda == 0.0 && exact,
        format!(
            "{} steps, worst identity gap {worst:.1e}, lambda {lambdas:?} then {} at k_epoch",
            run.steps.len(),
            run.closing.lambda
        ),
    )
}

fn c6_isolation() -> Outcome {
    let run = tiny_guided_run::<f32>(5);
    let leaks: Vec<Option<f64>> = run.reports.iter().map(|r| r.seg_grad_from_cls).collect();
    outcome(
        leaks.len() == 5 && leaks.iter().all(|l| *l == Some(0.0)),
        format!("max |dL_cls/d seg| per epoch {leaks:?}"),
    )
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const BENCH_EPOCHS: usize = 30;
const BENCH_LR: f64 = 5e-3;

fn bench_arch() -> ArchConfig {
    ArchConfig {
        widths: vec![8, 16, 32],
        seg_width: 16,
        hidden: 16,
        ..ArchConfig::default()
    }
}

struct SeedResult {
    baseline_ap: f64,
    guided_ap: f64,
    baseline_iou: f64,
    guided_iou: f64,
}

struct Benchmark {
    seeds: Vec<SeedResult>,
    elapsed: Duration,
}

fn run_benchmark() -> &'static Benchmark {
    static CELL: std::sync::OnceLock<Benchmark> = std::sync::OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let spec = ExplainerSpec::new(ExplainerKind::LayerCam);
        let seeds = SEEDS
            .iter()
            .map(|&seed| {
                let train = tiny_split(400, 60, 64, 1000 + 2 * seed);
                let test = tiny_split(100, 20, 64, 1001 + 2 * seed);
                let config = TrainConfig {
                    epochs: BENCH_EPOCHS,
                    lr: BENCH_LR,
                    seed,
                    arch: bench_arch(),
                    ..TrainConfig::default()
                };
                let stage1 = train_stage1::<f32>(&config, &train, RunOptions::default()).expect("stage 1");
                let base = evaluate(&stage1.model, &test, Some(&spec)).expect("evaluate baseline");
                let priors = extract_priors(&stage1.model, &train, &spec, "benchmark").expect("priors");
                let prior_model = PriorModel {
                    net: stage1.model.clone(),
                    explainer: spec.clone(),
                };
                let guided_config = TrainConfig {
                    stage: Mode::Guided,
                    warm_start: true,
                    ..config
                };
                let stage2 = train_stage2::<f32>(&guided_config, &train, &priors, prior_model, RunOptions::default())
                    .expect("stage 2");
                let guided = evaluate(&stage2.model, &test, Some(&spec)).expect("evaluate guided");
                let r = SeedResult {
                    baseline_ap: base.ap.expect("defects in test split"),
                    guided_ap: guided.ap.expect("defects in test split"),
                    baseline_iou: base.mean_iou.expect("masks in test split"),
                    guided_iou: guided.mean_iou.expect("masks in test split"),
                };
                eprintln!(
                    "  seed {seed}: AP baseline {:.4} guided {:.4}; IoU baseline {:.4} guided {:.4}",
                    r.baseline_ap, r.guided_ap, r.baseline_iou, r.guided_iou
                );
                r
            })
            .collect();
        Benchmark {
            seeds,
            elapsed: started.elapsed(),
        }
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn c7_benchmark() -> Outcome {
    let b = run_benchmark();
    let base = median(b.seeds.iter().map(|s| s.baseline_ap).collect());
    let guided = median(b.seeds.iter().map(|s| s.guided_ap).collect());
    let minutes = b.elapsed.as_secs_f64() / 60.0;
    outcome(
        guided >= base && guided >= 0.90 && base >= 0.75 && minutes < 20.0,
        format!(
            "median AP baseline {base:.4}, guided {guided:.4} over {} seeds; {minutes:.1} min on {} thread(s)",
            b.seeds.len(),
            rayon::current_num_threads()
        ),
    )
}

fn c8_localization() -> Outcome {
    let b = run_benchmark();
    let base = median(b.seeds.iter().map(|s| s.baseline_iou).collect());
    let guided = median(b.seeds.iter().map(|s| s.guided_iou).collect());
    outcome(
        guided >= base + 0.05,
        format!("median IoU baseline {base:.4}, guided {guided:.4} (needs +0.05)"),
    )
}

fn cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_saliency-prior"))
        .args(args)
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn chain(root: &Path) -> bool {
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();
    let cfg = root.join("config.json");
    let written = fs::create_dir_all(root).is_ok()
        && fs::write(
            &cfg,
            r#"{"train.epochs": 3, "train.lr": 0.005, "data.size": 32, "model.widths": [4, 8, 8], "model.seg_width": 6, "model.hidden": 8}"#,
        )
        .is_ok();
    written
        && cli(&["gen-data", "--out", &p("train"), "--n-normal", "20", "--n-defect", "8", "--size", "32", "--seed", "11"])
        && cli(&["gen-data", "--out", &p("test"), "--n-normal", "10", "--n-defect", "4", "--size", "32", "--seed", "12"])
        && cli(&["train-baseline", "--data", &p("train"), "--config", &p("config.json"), "--out", &p("base")])
        && cli(&[
            "extract-priors",
            "--ckpt",
            &p("base/model.ckpt"),
            "--data",
            &p("train"),
            "--explainer",
            "layercam",
            "--out",
            &p("priors"),
        ])
        && cli(&[
            "train-guided",
            "--data",
            &p("train"),
            "--priors",
            &p("priors"),
            "--config",
            &p("config.json"),
            "--out",
            &p("guided"),
        ])
        && cli(&["evaluate", "--ckpt", &p("guided/model.ckpt"), "--data", &p("test"), "--out", &p("eval")])
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries.flatten() {
            out.push(e.path());
        }
    }
    out.sort();
    out
}

fn c9_determinism() -> Outcome {
    let tmp = tempfile::tempdir().expect("tempdir");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    if !(chain(&a) && chain(&b)) {
        return outcome(false, "CLI chain exited with an error");
    }
    let mut compared = vec![
        PathBuf::from("base/model.ckpt"),
        PathBuf::from("base/report.json"),
        PathBuf::from("base/epochs.jsonl"),
        PathBuf::from("guided/model.ckpt"),
        PathBuf::from("guided/report.json"),
        PathBuf::from("guided/epochs.jsonl"),
        PathBuf::from("guided/steps.jsonl"),
        PathBuf::from("eval/report.json"),
    ];
    // resolved-config.json records the output path, which differs by design.
    for f in files_under(&a.join("priors")).into_iter().filter(|f| !f.ends_with("resolved-config.json")) {
        compared.push(Path::new("priors").join(f.file_name().expect("file")));
    }
    let differing: Vec<String> = compared
        .iter()
        .filter(|rel| fs::read(a.join(rel)).ok().is_none() || fs::read(a.join(rel)).ok() != fs::read(b.join(rel)).ok())
        .map(|rel| rel.display().to_string())
        .collect();
    outcome(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} files byte-identical across two runs", compared.len())
        } else {
            format!("differing files: {differing:?}")
        },
    )
}
