use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sttn::analysis::analyze;
use sttn::checkpoint::{decode_checkpoint, load_checkpoint, CHECKPOINT_MAGIC};
use sttn::infer::{
    bench_kernels, decode_model, export_model, probe_batch, save_model, speedup, write_bench_csv, GemmSize,
    DEFAULT_SIZE, MODEL_MAGIC,
};
use sttn::nn::Architecture;
use sttn::train::{self, evaluate, evaluate_with, load_dataset, DatasetKind, DatasetSource, RunConfig, Split};

#[derive(Parser)]
#[command(name = "sttn", version, about = "Train, export, evaluate and analyse soft-threshold ternary networks")]
struct Cli {
    /// Worker threads; 0 runs everything on the calling thread.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run config.
    Train(TrainArgs),
    /// Fuse a trained checkpoint into a packed ternary model.
    Export(ExportArgs),
    /// Top-1 accuracy of a checkpoint (.sttk) or exported model (.sttn).
    Eval(EvalArgs),
    /// Per-layer sparsity, approximation errors and weight histograms.
    Analyze(AnalyzeArgs),
    /// Packed ternary GEMM vs naive float GEMM.
    Bench(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `[output] dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory; overrides `dataset.path`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Seed of the random probe batch used for the equivalence check.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also report test accuracy of both the training graph and the fused model.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Evaluate on the training split instead of the test split.
    #[arg(long)]
    train_split: bool,
    /// Only the first N items.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for analysis.json, layers.csv and histograms.csv.
    #[arg(long)]
    out: PathBuf,
    /// Float checkpoint of the same architecture; its weights feed the TWN column.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// GEMM sizes as MxKxN; repeatable.
    #[arg(long = "size")]
    sizes: Vec<GemmSize>,
    /// Timing samples per path (median is reported).
    #[arg(long, default_value_t = 15)]
    samples: usize,
}

fn dataset_kind(arch: Architecture) -> DatasetKind {
    match arch {
        Architecture::LenetT => DatasetKind::MnistIdx,
        Architecture::Vgg7T | Architecture::ResminiT => DatasetKind::Cifar10Bin,
    }
}

fn load_split(arch: Architecture, path: &Path, split: Split, limit: Option<usize>) -> Result<train::Dataset> {
    let mut ds = load_dataset(&DatasetSource {
        kind: dataset_kind(arch),
        path: path.to_path_buf(),
        split,
        augment: Default::default(),
    })?;
    if ds.shape != arch.input_shape() {
        bail!("dataset images {:?} do not fit {}", ds.shape, arch.id());
    }
    if let Some(n) = limit {
        ds.truncate(n);
    }
    Ok(ds)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::from_file(&args.config)?;
    if let Some(p) = args.dataset {
        cfg.dataset.path = p;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let out = args
        .out
        .or(cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}_{}", cfg.model.architecture.id(), cfg.model.mode.id())));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    cfg.out_dir = Some(out.clone());
    let outcome = train::train(&cfg, &mut |m| {
        eprintln!(
            "epoch {:>3}  lr {:.6}  loss {:.4}  train {:.4}  test {:.4}",
            m.epoch, m.lr, m.train_loss, m.train_acc, m.test_acc
        );
    })?;
    if let Some(last) = outcome.metrics.last() {
        println!("final train accuracy {:.4}", last.train_acc);
        println!("final test accuracy {:.4}", last.test_acc);
    }
    if let Some(best) = outcome.best_test_acc {
        println!("best test accuracy {best:.4} (epoch {})", outcome.best_epoch);
    }
    println!("checkpoints and metrics.csv in {}", out.display());
    Ok(())
}

fn cmd_export(args: ExportArgs, parallel: bool) -> Result<()> {
    let (meta, model) = load_checkpoint(&args.checkpoint)?;
    let probe = probe_batch(meta.model.architecture, 8, args.seed);
    let (fused, checks) = export_model(&model, &meta.normalization, probe)?;
    for c in &checks {
        println!("{:<16} max deviation {:.3e}", c.name, c.max_deviation);
    }
    save_model(&args.out, &fused)?;
    println!("wrote {}", args.out.display());
    if let Some(dir) = args.dataset {
        let ds = load_split(meta.model.architecture, &dir, Split::Test, None)?;
        let graph = evaluate(&model, &ds, &meta.normalization)?;
        let packed = evaluate_with(&ds, &meta.normalization, |x| fused.forward(&x, parallel))?;
        println!("training-graph test accuracy {graph:.4}");
        println!("fused test accuracy {packed:.4}");
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs, parallel: bool) -> Result<()> {
    let bytes = fs::read(&args.checkpoint).with_context(|| format!("reading {}", args.checkpoint.display()))?;
    let label = args.checkpoint.display().to_string();
    let split = if args.train_split { Split::Train } else { Split::Test };
    let magic = bytes.get(..4).unwrap_or(&[]);
    let (acc, path) = if magic == MODEL_MAGIC {
        let m = decode_model(&bytes, &label)?;
        let ds = load_split(m.config.architecture, &args.dataset, split, args.limit)?;
        (evaluate_with(&ds, &m.normalization, |x| m.forward(&x, parallel))?, "packed ternary")
    } else if magic == CHECKPOINT_MAGIC {
        let (meta, m) = decode_checkpoint(&bytes, &label)?;
        let ds = load_split(meta.model.architecture, &args.dataset, split, args.limit)?;
        (evaluate(&m, &ds, &meta.normalization)?, "training graph")
    } else {
        bail!("{label}: neither a checkpoint (STTK) nor an exported model (STTN)");
    };
    println!("accuracy {acc:.4} ({path})");
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let (_, model) = load_checkpoint(&args.checkpoint)?;
    let reference = match &args.reference {
        Some(p) => Some(load_checkpoint(p)?.1),
        None => None,
    };
    let report = analyze(&model, reference.as_ref())?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let create = |name: &str| -> Result<BufWriter<File>> {
        let p = args.out.join(name);
        Ok(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?))
    };
    serde_json::to_writer_pretty(create("analysis.json")?, &report)?;
    report.write_layers_csv(create("layers.csv")?)?;
    report.write_histogram_csv(create("histograms.csv")?)?;
    for l in &report.layers {
        let sttn = l.sttn_error.map_or("-".to_string(), |e| format!("{e:.4}"));
        println!(
            "{:<16} sparsity {:.4}  sttn {}  twn {:.4}  oracle {:.4}",
            l.name, l.sparsity, sttn, l.twn_heuristic_error, l.oracle_error
        );
    }
    println!(
        "sparsity decreases on {} of {} adjacent layer pairs",
        report.sparsity_decreasing_steps,
        report.layers.len().saturating_sub(1)
    );
    println!("wrote analysis.json, layers.csv, histograms.csv to {}", args.out.display());
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let sizes = if args.sizes.is_empty() { vec![DEFAULT_SIZE] } else { args.sizes };
    let rows = bench_kernels(&sizes, args.samples)?;
    match &args.out {
        Some(p) => write_bench_csv(File::create(p).with_context(|| format!("creating {}", p.display()))?, &rows)?,
        None => write_bench_csv(io::stdout().lock(), &rows)?,
    }
    for s in sizes {
        if let Some(x) = speedup(&rows, s) {
            eprintln!("{}x{}x{}: packed {x:.2}x naive float", s.m, s.k, s.n);
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .context("starting thread pool")?;
    let parallel = cli.threads > 1;
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Export(a) => cmd_export(a, parallel),
        Command::Eval(a) => cmd_eval(a, parallel),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
