//! `crackedge`: check, optimize, package and evaluate the crack classifier.
//!
//! Exit status: 0 on success, 1 when compatibility violations are found,
//! 2 on any error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crackedge::compat::{check_compat, default_kl520_profile, estimate_memory, strip_unsupported_head, DeviceProfile};
use crackedge::enef::{self, Metadata, FLAG_HEAD_STRIPPED};
use crackedge::graph::Violation;
use crackedge::harness::{
    build_handcrafted_model, evaluate, gen_synthetic_dataset, synth_samples, EvalReport, SynthConfig,
};
use crackedge::model_io::{load_dataset_dir, load_model, read_image, save_model, LabeledSample};
use crackedge::optimize::{cluster_weights, collect_calibration_stats, prune_magnitude, quantize_model, QuantizedModel};
use crackedge::runtime::{preprocess_for, time_classifier, Classifier, FloatClassifier, QuantClassifier};
use crackedge::{Model, Tensor};

#[derive(Parser)]
#[command(name = "crackedge", version, about = "Edge deployment toolchain for a crack-classification CNN")]
struct Cli {
    /// Device profile (JSON). Defaults to the built-in KL520 profile.
    #[arg(long, global = true)]
    profile: Option<PathBuf>,
    /// Seed for synthetic data.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Where to write the structured report, if the command produces one.
    #[arg(long, global = true)]
    report: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Graph descriptor (JSON). Defaults to the built-in hand-crafted model.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Weight blob; defaults to the descriptor path with a `.bin` extension.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset directory with `negative/` and `positive/`. Defaults to
    /// synthetic images generated from `--seed`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Images per class when generating synthetic data.
    #[arg(long, default_value_t = 100)]
    n_per_class: usize,
    /// Noise amplitude of synthetic backgrounds.
    #[arg(long, default_value_t = 40)]
    noise: u8,
}

#[derive(Args, Clone)]
struct CalibArgs {
    /// Calibration images (`negative/` and `positive/`). Defaults to 16
    /// synthetic images per class drawn from a seed distinct from `--seed`.
    #[arg(long)]
    calib_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic crack dataset under --out.
    Synth {
        #[arg(long, default_value_t = 100)]
        n_per_class: usize,
        #[arg(long, default_value_t = 40)]
        noise: u8,
        #[arg(long, default_value_t = 227)]
        width: usize,
        #[arg(long, default_value_t = 227)]
        height: usize,
    },
    /// Write the built-in hand-crafted model as descriptor + weights.
    Reference,
    /// Check a model against the device profile.
    Check(ModelArgs),
    /// Remove the unsupported output head.
    Strip(ModelArgs),
    /// Magnitude-prune every weight tensor.
    Prune {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        sparsity: f64,
    },
    /// Replace each weight tensor by k shared values.
    Cluster {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 50)]
        max_iters: usize,
    },
    /// Calibrate and quantize to int8, writing a `.qmodel.json` file.
    Quantize {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        calib: CalibArgs,
    },
    /// Package a quantized model as `.enef`.
    Pack {
        #[arg(long)]
        qmodel: PathBuf,
    },
    /// Classify one image.
    Run {
        /// Packed model; without it the float model is used.
        #[arg(long)]
        enef: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        image: PathBuf,
    },
    /// Accuracy and confusion matrix over a dataset.
    Eval {
        #[arg(long)]
        enef: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Latency of the packed pipeline.
    Bench {
        #[arg(long)]
        enef: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
    },
    /// check -> strip -> quantize -> pack -> eval.
    Pipeline {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        calib: CalibArgs,
        #[command(flatten)]
        data: DataArgs,
    },
}

/// Intermediate output of `quantize`, consumed by `pack`.
#[derive(Serialize, Deserialize)]
struct QModelFile {
    head_stripped: bool,
    model: QuantizedModel,
}

enum Outcome {
    Ok,
    Violations,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Violations) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn profile(cli: &Cli) -> Result<DeviceProfile> {
    match &cli.profile {
        Some(p) => DeviceProfile::load(p).with_context(|| format!("loading profile {}", p.display())),
        None => Ok(default_kl520_profile()),
    }
}

fn load_graph(args: &ModelArgs) -> Result<Model> {
    let Some(graph) = &args.graph else {
        return Ok(build_handcrafted_model());
    };
    let weights = args.weights.clone().unwrap_or_else(|| graph.with_extension("bin"));
    load_model(graph, &weights).with_context(|| format!("loading model {}", graph.display()))
}

fn ensure_out(cli: &Cli) -> Result<()> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))
}

fn save_graph(cli: &Cli, model: &Model, suffix: &str) -> Result<PathBuf> {
    ensure_out(cli)?;
    let stem = format!("{}{suffix}", model.name);
    let graph = cli.out.join(format!("{stem}.json"));
    save_model(model, &graph, &graph.with_extension("bin"))?;
    println!("wrote {}", graph.display());
    Ok(graph)
}

fn print_violations(violations: &[Violation]) {
    for v in violations {
        println!("{v}");
    }
    println!("{} violation(s)", violations.len());
}

fn load_samples(dir: &Path) -> Result<Vec<LabeledSample>> {
    let ds = load_dataset_dir(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
    for (path, why) in &ds.skipped {
        eprintln!("skipped {path}: {why}");
    }
    Ok(ds.samples)
}

fn dataset(cli: &Cli, args: &DataArgs) -> Result<(Vec<LabeledSample>, String)> {
    match &args.data {
        Some(dir) => Ok((load_samples(dir)?, dir.display().to_string())),
        None => {
            let cfg = SynthConfig {
                n_per_class: args.n_per_class,
                seed: cli.seed,
                noise_amplitude: args.noise,
                ..Default::default()
            };
            let name = format!("synthetic(seed={}, n_per_class={}, noise={})", cfg.seed, cfg.n_per_class, args.noise);
            Ok((synth_samples(&cfg)?, name))
        }
    }
}

fn calibrate_and_quantize(cli: &Cli, model: &Model, calib: &CalibArgs) -> Result<QuantizedModel> {
    let samples = match &calib.calib_dir {
        Some(dir) => load_samples(dir)?,
        None => {
            let cfg = SynthConfig { n_per_class: 16, seed: cli.seed.wrapping_add(1), ..Default::default() };
            synth_samples(&cfg)?
        }
    };
    if samples.is_empty() {
        bail!("calibration set is empty");
    }
    let inputs = samples
        .iter()
        .map(|s| preprocess_for::<f32, f32>(&s.image, model))
        .collect::<Result<Vec<Tensor>, _>>()?;
    let stats = collect_calibration_stats(model, &inputs)?;
    Ok(quantize_model(model, &stats)?)
}

/// Strips the head if the profile requires it; reports removed nodes.
fn strip_for(model: &Model, profile: &DeviceProfile) -> Result<(Model, bool)> {
    let (stripped, removed) = strip_unsupported_head(model, profile)?;
    for n in &removed {
        println!("removed {} ({})", n.id, n.kind);
    }
    Ok((stripped, !removed.is_empty()))
}

fn pack_to(cli: &Cli, qm: &QuantizedModel, head_stripped: bool, profile: &DeviceProfile) -> Result<PathBuf> {
    let meta = Metadata {
        model_name: qm.graph.name.clone(),
        profile_name: profile.name.clone(),
        flags: if head_stripped { FLAG_HEAD_STRIPPED } else { 0 },
    };
    let bytes = enef::pack(qm, &meta)?;
    ensure_out(cli)?;
    let path = cli.out.join(format!("{}.enef", qm.graph.name));
    fs::write(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} ({} bytes)", path.display(), bytes.len());
    Ok(path)
}

fn read_enef(path: &Path) -> Result<QuantizedModel> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    enef::unpack(&bytes).with_context(|| format!("unpacking {}", path.display()))
}

fn write_report(cli: &Cli, report: &EvalReport) -> Result<()> {
    let text = report.to_json();
    print!("{text}");
    let path = match &cli.report {
        Some(p) => p.clone(),
        None => {
            ensure_out(cli)?;
            cli.out.join("report.json")
        }
    };
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("report: {}", path.display());
    Ok(())
}

/// Packed model if given, otherwise the float model.
fn with_classifier<R>(
    enef: &Option<PathBuf>,
    model: &ModelArgs,
    f: impl FnOnce(&dyn Classifier, &str) -> Result<R>,
) -> Result<R> {
    match enef {
        Some(path) => {
            let qm = read_enef(path)?;
            f(&QuantClassifier::new(&qm)?, &qm.graph.name)
        }
        None => {
            let m = load_graph(model)?;
            f(&FloatClassifier::new(&m), &m.name)
        }
    }
}

fn run(cli: &Cli) -> Result<Outcome> {
    match &cli.command {
        Command::Synth { n_per_class, noise, width, height } => {
            let cfg = SynthConfig {
                n_per_class: *n_per_class,
                width: *width,
                height: *height,
                seed: cli.seed,
                noise_amplitude: *noise,
                ..Default::default()
            };
            let manifest = gen_synthetic_dataset(&cfg, &cli.out)?;
            println!("wrote {} images to {}", manifest.entries.len(), cli.out.display());
        }
        Command::Reference => {
            save_graph(cli, &build_handcrafted_model(), "")?;
        }
        Command::Check(args) => {
            let model = load_graph(args)?;
            let profile = profile(cli)?;
            let violations = check_compat(&model, &profile);
            print_violations(&violations);
            if let Ok(bytes) = estimate_memory(&model, true) {
                println!("estimated int8 footprint: {bytes} bytes (budget {})", profile.memory_budget_bytes);
            }
            if !violations.is_empty() {
                return Ok(Outcome::Violations);
            }
        }
        Command::Strip(args) => {
            let model = load_graph(args)?;
            let profile = profile(cli)?;
            let (stripped, _) = strip_for(&model, &profile)?;
            save_graph(cli, &stripped, "_stripped")?;
            let violations = check_compat(&stripped, &profile);
            print_violations(&violations);
            if !violations.is_empty() {
                return Ok(Outcome::Violations);
            }
        }
        Command::Prune { model, sparsity } => {
            let pruned = prune_magnitude(&load_graph(model)?, *sparsity)?;
            save_graph(cli, &pruned, "_pruned")?;
        }
        Command::Cluster { model, k, max_iters } => {
            let clustered = cluster_weights(&load_graph(model)?, *k, *max_iters)?;
            save_graph(cli, &clustered, "_clustered")?;
        }
        Command::Quantize { model, calib } => {
            let profile = profile(cli)?;
            let (stripped, head_stripped) = strip_for(&load_graph(model)?, &profile)?;
            let qm = calibrate_and_quantize(cli, &stripped, calib)?;
            ensure_out(cli)?;
            let path = cli.out.join(format!("{}.qmodel.json", qm.graph.name));
            let text = serde_json::to_string(&QModelFile { head_stripped, model: qm })?;
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        Command::Pack { qmodel } => {
            let text = fs::read_to_string(qmodel).with_context(|| format!("reading {}", qmodel.display()))?;
            let file: QModelFile = serde_json::from_str(&text).context("parsing quantized model")?;
            pack_to(cli, &file.model, file.head_stripped, &profile(cli)?)?;
        }
        Command::Run { enef, model, image } => {
            let img = read_image(image)?;
            with_classifier(enef, model, |c, _| {
                let (pred, t) = c.classify(&img)?;
                println!("label: {}", pred.label);
                println!("p(negative) = {:.6}", pred.probs[0]);
                println!("p(positive) = {:.6}", pred.probs[1]);
                println!("time: {:.3} ms", t.total_ms());
                Ok(())
            })?;
        }
        Command::Eval { enef, model, data } => {
            let (samples, name) = dataset(cli, data)?;
            let report = with_classifier(enef, model, |c, model_name| {
                Ok(evaluate(c, &samples, model_name, &name)?.report)
            })?;
            write_report(cli, &report)?;
        }
        Command::Bench { enef, model, data, warmup } => {
            let (samples, _) = dataset(cli, data)?;
            let images: Vec<_> = samples.into_iter().map(|s| s.image).collect();
            let stats = with_classifier(enef, model, |c, _| Ok(time_classifier(c, &images, *warmup)?))?;
            let text = serde_json::to_string_pretty(&stats)? + "\n";
            print!("{text}");
            if let Some(path) = &cli.report {
                fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Pipeline { model, calib, data } => {
            let profile = profile(cli)?;
            let model = load_graph(model)?;
            println!("[check]");
            print_violations(&check_compat(&model, &profile));
            println!("[strip]");
            let (stripped, head_stripped) = strip_for(&model, &profile)?;
            let remaining = check_compat(&stripped, &profile);
            print_violations(&remaining);
            if !remaining.is_empty() {
                return Ok(Outcome::Violations);
            }
            println!("[quantize]");
            let qm = calibrate_and_quantize(cli, &stripped, calib)?;
            println!("[pack]");
            let path = pack_to(cli, &qm, head_stripped, &profile)?;
            println!("[eval]");
            let deployed = read_enef(&path)?;
            let (samples, name) = dataset(cli, data)?;
            let report = evaluate(&QuantClassifier::new(&deployed)?, &samples, &deployed.graph.name, &name)?.report;
            write_report(cli, &report)?;
        }
    }
    Ok(Outcome::Ok)
}
