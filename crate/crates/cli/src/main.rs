//! Command-line front end: dataset generation, training, evaluation,
//! reparameterization verification, cost accounting and activation export.
//!
//! Exit codes: 0 success, 1 failed verification or diverged training,
//! 2 bad usage or configuration, 3 file and format problems.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use mlore_core::accounting::{self, ExpertKernels, Variant};
use mlore_core::checkpoint;
use mlore_core::config::ModelConfig;
use mlore_core::error::Error;
use mlore_core::reparam::{self, Precision};
use mlore_core::toybench::activations;
use mlore_core::toybench::data::Dataset;
use mlore_core::toybench::metrics::{self, TaskMetrics};
use mlore_core::toybench::model::{ModelVariant, ToyModel};
use mlore_core::toybench::train::{self, OptimizerKind, TrainOptions};

#[derive(Parser)]
#[command(name = "mlore", version, about = "Mixture-of-low-rank-experts toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a procedural multi-task dataset file.
    GenData(GenDataArgs),
    /// Train a model variant and write logs plus a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset, optionally against a baseline.
    Eval(EvalArgs),
    /// Verify fused inference against the multi-branch forward.
    VerifyReparam(VerifyArgs),
    /// Print parameter and FLOP accounting tables.
    Count(CountArgs),
    /// Export expert activation statistics for a checkpoint.
    ExportActivations(ExportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Momentum,
}

#[derive(Args)]
struct TrainArgs {
    /// Model configuration (TOML); defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file from gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for loss.csv, gates.csv and model.ckpt.
    #[arg(long)]
    out: PathBuf,
    /// Variant: mlore, shared-linear, or single-<task>.
    #[arg(long, default_value = "mlore")]
    model: String,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    #[arg(long, default_value_t = 16)]
    backbone_channels: usize,
    /// Gate-log period in steps.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
    /// Override the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Metrics file to compare against (adds the averaged delta line).
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Write this run's metrics for later use as a baseline.
    #[arg(long)]
    write_metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    batch: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    Single,
    Double,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, value_enum, default_value_t = PrecisionArg::Double)]
    precision: PrecisionArg,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    /// Inject a bias perturbation into the fused branch (diagnostics).
    #[arg(long, hide = true, default_value_t = 0.0)]
    corrupt_bias: f64,
    /// Print every trial instead of a summary.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct CountArgs {
    /// Model configuration (TOML); the full-scale reference configuration
    /// is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Feature-map height the costs are quoted at.
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for activations.csv and tasks_per_expert.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch: usize,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Diverged { .. } => 1,
        Error::Io(_) | Error::Format(_) | Error::CheckpointMismatch(_) => 3,
        _ => 2,
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ModelConfig, Error> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            ModelConfig::from_toml(&text)
        }
        None => Ok(ModelConfig::default()),
    }
}

fn write_manifest(dir: &Path, lines: &[String]) -> Result<(), Error> {
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut text = format!("created_unix {stamp}\n");
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    std::fs::write(dir.join("manifest.txt"), text)?;
    Ok(())
}

fn gen_data(args: &GenDataArgs) -> Result<(), Error> {
    let ds = Dataset::generate(args.count, args.height, args.width, args.seed);
    ds.save(&args.out)?;
    println!(
        "wrote {} samples ({}x{}) to {}",
        ds.len(),
        args.height,
        args.width,
        args.out.display()
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<(), Error> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let variant = ModelVariant::parse(&args.model)
        .ok_or_else(|| Error::Config(format!("unknown model variant {:?}", args.model)))?;
    let ds = Dataset::load(&args.data)?;
    let opts = TrainOptions {
        iters: args.iters,
        batch: args.batch,
        lr: args.lr,
        optimizer: match args.optimizer {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Momentum => OptimizerKind::Momentum,
        },
        backbone_channels: args.backbone_channels,
        log_every: args.log_every,
        out_dir: args.out.clone(),
    };
    let report = train::train(&cfg, variant, &ds, &opts)?;
    write_manifest(
        &args.out,
        &[
            format!("command train"),
            format!("model {}", args.model),
            format!("data {}", args.data.display()),
            format!("iters {}", args.iters),
            format!("batch {}", args.batch),
            format!("lr {}", args.lr),
            format!("seed {}", cfg.seed),
        ],
    )?;
    println!(
        "trained {} for {} steps: loss {:.6} -> {:.6} ({:+.1}%), checkpoint {}",
        args.model,
        report.steps,
        report.first_window,
        report.last_window,
        -100.0 * report.improvement(),
        report.checkpoint.display()
    );
    Ok(())
}

fn read_metrics(path: &Path) -> Result<Vec<TaskMetrics>, Error> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::Format(format!("{}: bad metrics line {line:?}", path.display()));
        let [name, metric, value, dir] = fields.as_slice() else {
            return Err(bad());
        };
        out.push(TaskMetrics {
            task: out.len(),
            name: name.to_string(),
            metric: metric.to_string(),
            value: value.parse().map_err(|_| bad())?,
            higher_better: match *dir {
                "up" => true,
                "down" => false,
                _ => return Err(bad()),
            },
        });
    }
    Ok(out)
}

fn write_metrics(path: &Path, metrics: &[TaskMetrics]) -> Result<(), Error> {
    let mut text = String::new();
    for m in metrics {
        text.push_str(&format!(
            "{} {} {:.6} {}\n",
            m.name,
            m.metric,
            m.value,
            if m.higher_better { "up" } else { "down" }
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<(), Error> {
    let ckpt = checkpoint::load(&args.ckpt)?;
    let model = ToyModel::from_checkpoint(&ckpt)?;
    let ds = Dataset::load(&args.data)?;
    let results = metrics::evaluate(&model, &ds, args.batch)?;
    let baseline = match &args.baseline {
        Some(p) => Some(read_metrics(p)?),
        None => None,
    };
    print!("{}", metrics::report(&results, baseline.as_deref())?);
    if let Some(out) = &args.write_metrics {
        write_metrics(out, &results)?;
    }
    Ok(())
}

fn run_verify(args: &VerifyArgs) -> Result<bool, Error> {
    let precision = match args.precision {
        PrecisionArg::Single => Precision::Single,
        PrecisionArg::Double => Precision::Double,
    };
    let report =
        reparam::verify_equivalence_opts(args.trials, precision, args.seed, args.corrupt_bias)?;
    if args.verbose {
        for t in &report.trials {
            println!(
                "trial {:3}: experts={:2} channels={:3} k={:2} max_rel_err={:.3e}",
                t.trial, t.num_experts, t.channels, t.top_k, t.max_rel_err
            );
        }
    }
    let verdict = if report.pass { "PASS" } else { "FAIL" };
    println!(
        "{verdict}: {} trials, {} precision, max_rel_err {:.3e} (tolerance {:.0e})",
        report.trials.len(),
        report.precision.label(),
        report.max_rel_err,
        report.tolerance
    );
    if !report.pass {
        for t in report.trials.iter().filter(|t| t.max_rel_err > report.tolerance).take(5) {
            println!(
                "  failed trial {}: experts={} channels={} k={} max_rel_err={:.3e}",
                t.trial, t.num_experts, t.channels, t.top_k, t.max_rel_err
            );
        }
    }
    Ok(report.pass)
}

fn run_count(args: &CountArgs) -> Result<(), Error> {
    let cfg = match &args.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            ModelConfig::from_toml(&text)?
        }
        None => accounting::full_scale_config(),
    };
    print!("{}", accounting::compare_table(&cfg, args.height, args.width));
    println!();
    for variant in [Variant::Mlore, Variant::StandardMoe] {
        let r = accounting::count_flops(&cfg, ExpertKernels::ThreeOne, variant, args.height, args.width);
        println!(
            "{} [3x3,1x1] at {} experts: params {} / inference flops {}",
            variant.label(),
            cfg.num_experts,
            r.params,
            r.flops
        );
        println!(
            "  params: projections {} generic {} shared {} specific {} routers {} bn {} heads {}",
            r.param_parts.projections,
            r.param_parts.generic,
            r.param_parts.shared_experts,
            r.param_parts.specific_experts,
            r.param_parts.routers,
            r.param_parts.bn,
            r.param_parts.heads
        );
        println!(
            "  flops:  projections {} generic {} shared {} specific {} routers {} bn {} heads {}",
            r.flop_parts.projections,
            r.flop_parts.generic,
            r.flop_parts.shared_experts,
            r.flop_parts.specific_experts,
            r.flop_parts.routers,
            r.flop_parts.bn,
            r.flop_parts.heads
        );
    }
    Ok(())
}

fn run_export(args: &ExportArgs) -> Result<(), Error> {
    let ckpt = checkpoint::load(&args.ckpt)?;
    let model = ToyModel::from_checkpoint(&ckpt)?;
    let ds = Dataset::load(&args.data)?;
    let stats = activations::collect(&model, &ds, args.batch)?;
    activations::export(&stats, &args.out)?;
    println!(
        "exported activation tables for {} modules x {} experts over {} samples to {}",
        stats.modules.len(),
        model.cfg.num_experts,
        stats.samples,
        args.out.display()
    );
    println!("min activation ratio {:.6}", stats.min_activation_ratio());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome: Result<bool, Error> = match &cli.cmd {
        Cmd::GenData(a) => gen_data(a).map(|()| true),
        Cmd::Train(a) => run_train(a).map(|()| true),
        Cmd::Eval(a) => run_eval(a).map(|()| true),
        Cmd::VerifyReparam(a) => run_verify(a),
        Cmd::Count(a) => run_count(a).map(|()| true),
        Cmd::ExportActivations(a) => run_export(a).map(|()| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
