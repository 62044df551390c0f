mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use saliency_prior::data::{
    file_digest, generate_synthetic, load_checkpoint, read_pnm, render_heatmap_overlay, write_json, Dataset,
    GrayImage, SynthParams,
};
use saliency_prior::explain::{explain, ExplainerKind, ExplainerSpec};
use saliency_prior::nn::{DefectNet, Mode, PriorModel, DEFECT_CLASS};
use saliency_prior::prior::{extract_priors, PriorStore};
use saliency_prior::train::{evaluate, train_stage1, train_stage2, RunOptions, TrainOutcome};
use saliency_prior::Error;
use serde_json::json;

/// Two-stage saliency-prior guided defect classification.
#[derive(Parser, Debug)]
#[command(name = "saliency-prior", version, arg_required_else_help = true)]
struct Cli {
    /// Worker threads for per-sample parallel work.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic defect dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        n_normal: usize,
        #[arg(long, default_value_t = 60)]
        n_defect: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Stage 1: train the plain classifier.
    TrainBaseline {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn a stage-1 checkpoint's saliency maps into a prior store.
    ExtractPriors {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        explainer: ExplainerKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: train the prior-guided network.
    TrainGuided {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        priors: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset and write report.json.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Explainer for the localization IoU.
        #[arg(long, default_value = "layercam")]
        explainer: ExplainerKind,
    },
    /// Render input, saliency and its Otsu mask for one image.
    Explain {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        explainer: ExplainerKind,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON file of flat dotted keys, e.g. {"train.lr": 0.001}.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra KEY=VALUE overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NumericFault { .. } => CliError::Numeric(e.to_string()),
            Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => f.write_str(m),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} workers: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::GenData {
            out,
            n_normal,
            n_defect,
            size,
            seed,
        } => {
            let params = SynthParams {
                n_normal,
                n_defect,
                size,
                seed,
                ..SynthParams::default()
            };
            params.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            write_resolved(&out, "gen-data", json!({}), json!(params))?;
            generate_synthetic(&params, &out)?;
            Ok(())
        }
        Command::TrainBaseline { data, config, out } => {
            let flat = resolve(&config)?;
            let train = config::train_config(&flat, Mode::Baseline)?;
            write_resolved(&out, "train-baseline", json!({ "data": data }), json!(flat))?;
            let dataset = load_dataset(&data, train.arch.height)?;
            let outcome = train_stage1::<f32>(&train, &dataset, run_options(&out))?;
            write_json(&out.join("report.json"), &training_report(&outcome))?;
            Ok(())
        }
        Command::ExtractPriors {
            ckpt,
            data,
            explainer,
            out,
        } => {
            write_resolved(
                &out,
                "extract-priors",
                json!({ "ckpt": ckpt, "data": data }),
                json!({ "explainer": explainer.cli_name() }),
            )?;
            let net = load_checkpoint(&ckpt)?;
            if net.mode() != Mode::Baseline {
                return Err(CliError::Data(format!("{} is not a stage-1 checkpoint", ckpt.display())));
            }
            let dataset = load_dataset(&data, net.config().height)?;
            let digest = file_digest(&ckpt)?;
            let store = extract_priors(&net, &dataset, &ExplainerSpec::new(explainer), &digest)?;
            store.save(&out)?;
            fs::copy(&ckpt, out.join("source.ckpt"))
                .map_err(|e| CliError::Data(format!("cannot copy {}: {e}", ckpt.display())))?;
            Ok(())
        }
        Command::TrainGuided {
            data,
            priors,
            config,
            out,
        } => {
            let flat = resolve(&config)?;
            let train = config::train_config(&flat, Mode::Guided)?;
            write_resolved(
                &out,
                "train-guided",
                json!({ "data": data, "priors": priors }),
                json!(flat),
            )?;
            let store = PriorStore::load(&priors)?;
            let source = priors.join("source.ckpt");
            let digest = file_digest(&source)?;
            if digest != store.checkpoint_digest {
                return Err(CliError::Data(format!(
                    "{} does not match the checkpoint the priors were extracted from",
                    source.display()
                )));
            }
            let prior_model = PriorModel {
                net: load_checkpoint(&source)?,
                explainer: store.explainer.clone(),
            };
            let dataset = load_dataset(&data, train.arch.height)?;
            let outcome = train_stage2::<f32>(&train, &dataset, &store, prior_model, run_options(&out))?;
            write_json(&out.join("report.json"), &training_report(&outcome))?;
            Ok(())
        }
        Command::Evaluate {
            ckpt,
            data,
            out,
            explainer,
        } => {
            write_resolved(
                &out,
                "evaluate",
                json!({ "ckpt": ckpt, "data": data }),
                json!({ "explainer": explainer.cli_name() }),
            )?;
            let net = load_checkpoint(&ckpt)?;
            let dataset = load_dataset(&data, net.config().height)?;
            let metrics = evaluate(&net, &dataset, Some(&ExplainerSpec::new(explainer)))?;
            write_json(
                &out.join("report.json"),
                &json!({ "checkpoint": file_digest(&ckpt)?, "split": dataset.split, "metrics": metrics }),
            )?;
            Ok(())
        }
        Command::Explain {
            ckpt,
            image,
            explainer,
            out,
        } => {
            write_resolved(
                &out,
                "explain",
                json!({ "ckpt": ckpt, "image": image }),
                json!({ "explainer": explainer.cli_name() }),
            )?;
            let net = load_checkpoint(&ckpt)?;
            let raster = read_pnm(&image)?;
            let img = GrayImage::from_raster(&raster);
            let (h, w) = (net.config().height, net.config().width);
            let img = if (img.height, img.width) == (h, w) {
                img
            } else {
                saliency_prior::data::resize_bilinear_image(&img, h, w)
            };
            let id = image
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| CliError::Usage(format!("cannot name output for {}", image.display())))?;
            let map = explain_image(&net, &img, explainer)?.with_id(id);
            render_heatmap_overlay(&img, &map, &out.join("explain").join(format!("{id}.pgm")))?;
            Ok(())
        }
    }
}

fn resolve(args: &ConfigArgs) -> CliResult<config::FlatConfig> {
    let mut overrides = args.set.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    config::resolve(args.config.as_deref(), &overrides)
}

fn write_resolved(out: &Path, command: &str, inputs: serde_json::Value, config: serde_json::Value) -> CliResult {
    write_json(
        &out.join("resolved-config.json"),
        &json!({ "command": command, "inputs": inputs, "out": out, "config": config }),
    )?;
    Ok(())
}

fn load_dataset(dir: &Path, size: usize) -> CliResult<Dataset> {
    let dataset = Dataset::load(dir)?;
    let mismatched = dataset
        .samples
        .iter()
        .any(|s| (s.image.height, s.image.width) != (size, size));
    Ok(if mismatched {
        dataset.resized(size, size)
    } else {
        dataset
    })
}

fn run_options(out: &Path) -> RunOptions<'_> {
    RunOptions {
        run_dir: Some(out),
        eval: None,
    }
}

fn training_report(outcome: &TrainOutcome) -> serde_json::Value {
    json!({
        "best_epoch": outcome.best_epoch,
        "epochs": outcome.reports,
        "closing": outcome.closing,
    })
}

fn explain_image(
    net: &DefectNet<f32>,
    img: &GrayImage,
    kind: ExplainerKind,
) -> CliResult<saliency_prior::explain::SaliencyMap> {
    let x = img.input_tensor::<f32>();
    let prior = match (&net.prior_model, net.mode()) {
        (Some(pm), Mode::Guided) => Some(pm.prior_for(&x)?),
        (None, Mode::Guided) => return Err(CliError::Data("guided checkpoint carries no prior model".into())),
        _ => None,
    };
    let trace = net.explain_forward(&x, prior.as_ref())?;
    Ok(explain(&trace, &ExplainerSpec::new(kind), DEFECT_CLASS)?)
}
