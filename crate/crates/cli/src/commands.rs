//! Subcommands.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use sslkit_core::bench::{
    alexnet_layers, alexnet_shape_suite, run_bench, sparsity_grid, BenchCase, BenchOptions, Kernel, Precision,
    KERNEL_PROVENANCE,
};
use sslkit_core::compactor::{flop_report, pca_rank_analysis};
use sslkit_core::network::{Layer, NetworkModel};
use sslkit_core::ssl::{sparsity_stats, GroupingScheme, SchemeKind, SslConfig};

use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, Phase};
use crate::error::{CliError, Result};
use crate::pipeline::{load_datasets, run_pipeline, RunOptions};
use crate::report::{write_bench, write_flops, write_pca, CsvOut};
use crate::sweep::run_sweep;

#[derive(Debug, Parser)]
#[command(name = "sslkit", version, about = "Structured sparsity learning experiments")]
pub struct Cli {
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads for parallel kernels.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the configured training phases.
    Train(TrainArgs),
    /// Run ssl → compact → finetune for each λ on one shared baseline.
    Sweep(SweepArgs),
    /// Time dense, compacted-dense and CSR products.
    Bench(BenchArgs),
    /// Report PCA curves, group sparsity or FLOPs of a checkpoint.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated subset of baseline,ssl,compact,finetune.
    #[arg(long, value_delimiter = ',')]
    pub phases: Option<Vec<Phase>>,
    /// Overrides the epoch count of every phase.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Reuse checkpoints whose configuration fingerprint matches.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Comma-separated strengths; each replaces every scheme's λ.
    #[arg(long, value_delimiter = ',', required = true)]
    pub lambdas: Vec<f64>,
    /// Run grid points concurrently.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    /// AlexNet conv1–conv5 shapes at learned structured and ℓ1 sparsities.
    Alexnet,
    /// 5×5 row/column sparsity grid at one shape.
    Grid,
    /// One case from --m/--k/--n and the sparsity flags.
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "alexnet")]
    pub suite: Suite,
    #[arg(long, default_value_t = 512)]
    pub m: usize,
    #[arg(long, default_value_t = 1152)]
    pub k: usize,
    #[arg(long, default_value_t = 729)]
    pub n: usize,
    #[arg(long, default_value_t = 0.0)]
    pub row_sparsity: f64,
    #[arg(long, default_value_t = 0.0)]
    pub col_sparsity: f64,
    /// Random element sparsity; makes the custom case unstructured.
    #[arg(long)]
    pub unstructured: Option<f64>,
    #[arg(long, default_value_t = 11)]
    pub repeats: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    /// Seconds each timing sample spans (short products are repeated).
    #[arg(long, default_value_t = 0.01)]
    pub min_sample_time: f64,
    #[arg(long, value_enum, default_value = "f32")]
    pub precision: PrecisionArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Pca,
    Stats,
    Flops,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Mode,
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Restrict PCA to these conv layers (default: all).
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<String>>,
    /// Largest PCA dimension (default: the matrix rank bound).
    #[arg(long)]
    pub max_dim: Option<usize>,
    /// Take the grouping schemes for stats from this experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl clap::ValueEnum for Phase {
    fn value_variants<'a>() -> &'a [Self] {
        &Phase::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.as_str()))
    }
}

fn experiment(cli: &Cli, args: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    if let Some(p) = &args.phases {
        cfg.phases = p.clone();
    }
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
        for t in [cfg.ssl_train.as_mut(), cfg.finetune.as_mut()].into_iter().flatten() {
            t.epochs = e;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(CliError::Config("--threads must be >= 1".into()));
    }
    // A second call (tests driving `run` repeatedly) keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    match &cli.command {
        Command::Train(a) => cmd_train(&cli, a),
        Command::Sweep(a) => cmd_sweep(&cli, a),
        Command::Bench(a) => cmd_bench(&cli, a),
        Command::Analyze(a) => cmd_analyze(&cli, a),
    }
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = experiment(cli, &a.exp)?;
    let (train_set, test_set) = load_datasets(&cfg)?;
    let out = run_pipeline(
        &cfg,
        &train_set,
        &test_set,
        RunOptions {
            resume: a.exp.resume,
            start_from: None,
        },
    )?;
    for r in &out.structure {
        let convs: Vec<String> = r
            .convs
            .iter()
            .map(|c| format!("{} {}f/{}c/{}k", c.name, c.filters, c.channels, c.fibers))
            .collect();
        println!(
            "{:<9} error {:>7} flop {:.3}  {}",
            r.phase,
            r.test_error.map(|e| format!("{:.2}%", 100.0 * e)).unwrap_or_default(),
            r.flops.ratio(),
            convs.join("  ")
        );
    }
    println!("wrote {}", cfg.output_dir.display());
    Ok(())
}

fn cmd_sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let cfg = experiment(cli, &a.exp)?;
    let (train_set, test_set) = load_datasets(&cfg)?;
    let rows = run_sweep(&cfg, &a.lambdas, &train_set, &test_set, a.exp.resume, a.parallel)?;
    for r in &rows {
        println!(
            "λ={:<10} {:<6} error {:>8} flop {}",
            r.lambda,
            if r.status == "ok" { "ok" } else { "failed" },
            r.test_error.map(|e| format!("{:.2}%", 100.0 * e)).unwrap_or_default(),
            r.flop_ratio.map(|f| format!("{f:.3}")).unwrap_or_default()
        );
    }
    println!("wrote {}", cfg.output_dir.join("sweep_summary.csv").display());
    Ok(())
}

/// Row and column fractions of the monotonicity grid.
pub const GRID_FRACTIONS: [f64; 5] = [0.0, 0.2, 0.4, 0.6, 0.8];

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let cases = match a.suite {
        Suite::Alexnet => {
            for l in alexnet_layers() {
                let (m, k, n) = l.gemm_shape()?;
                println!("{}: {m}x{k} · {k}x{n} (per group of {})", l.name, l.groups);
            }
            alexnet_shape_suite()
        }
        Suite::Grid => sparsity_grid((a.m, a.k, a.n), &GRID_FRACTIONS, cli.seed.unwrap_or(0)),
        Suite::Custom => {
            let shape = (a.m, a.k, a.n);
            let seed = cli.seed.unwrap_or(0);
            let case = match a.unstructured {
                Some(s) => BenchCase::unstructured("custom", shape, s, seed),
                None => BenchCase::structured("custom", shape, a.row_sparsity, a.col_sparsity, seed),
            };
            case.validate()?;
            vec![case]
        }
    };
    let opts = BenchOptions {
        repeats: a.repeats,
        warmup: a.warmup,
        threads: cli.threads,
        min_sample_time: a.min_sample_time,
        precision: match a.precision {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        },
    };
    println!("kernels: {KERNEL_PROVENANCE}");
    let records = run_bench(&cases, &Kernel::ALL, &opts)?;
    for r in &records {
        println!(
            "{:<8} {:?} {:<16} {:>10.6}s {:>6.2}x",
            r.case.layer_name, r.case.pattern, r.kernel, r.wall_time, r.speedup_vs_dense
        );
    }
    let dir = cli.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    write_bench(&dir.join("bench_records.csv"), &dir.join("bench_plot.csv"), &records)?;
    println!("wrote {}", dir.join("bench_records.csv").display());
    Ok(())
}

/// Every weighted layer of `model` must exist in `baseline` with the same
/// kind and kernel size.
pub fn check_compatible(model: &NetworkModel, baseline: &NetworkModel) -> Result<()> {
    for l in model.layers() {
        let Some(name) = l.name() else { continue };
        let other = baseline
            .find_layer(name)
            .map(|i| &baseline.layers()[i])
            .ok_or_else(|| CliError::Config(format!("baseline has no layer {name}")))?;
        let same = match (l, other) {
            (Layer::Conv(a), Layer::Conv(b)) => {
                (a.weights.height(), a.weights.width(), a.stride, a.pad)
                    == (b.weights.height(), b.weights.width(), b.stride, b.pad)
            }
            (Layer::Fc(_), Layer::Fc(_)) => true,
            _ => false,
        };
        if !same {
            return Err(CliError::Config(format!("layer {name} differs in kind or geometry from the baseline")));
        }
    }
    Ok(())
}

/// Schemes covering every group kind `model` has, for stats without a config.
pub fn default_stats_config(model: &NetworkModel) -> SslConfig {
    let has_conv = model.layers().iter().any(Layer::is_conv);
    let has_fc = model.layers().iter().any(|l| matches!(l, Layer::Fc(_)));
    let mut kinds = Vec::new();
    if has_conv {
        kinds.extend([
            SchemeKind::FilterWise,
            SchemeKind::ChannelWise,
            SchemeKind::ShapeWise,
            SchemeKind::Filter2DWise,
        ]);
    }
    if !model.residual_blocks().is_empty() {
        kinds.push(SchemeKind::DepthWise);
    }
    if has_fc {
        kinds.push(SchemeKind::NeuronWiseIn);
        if model.layers().iter().filter(|l| matches!(l, Layer::Fc(_))).count() > 1 {
            kinds.push(SchemeKind::NeuronWiseOut);
        }
    }
    SslConfig {
        couple_filter_channel: false,
        ..SslConfig::new(kinds.into_iter().map(|k| GroupingScheme::new(k, 0.0)).collect())
    }
}

/// `(layer, dim, error)` for the lowered weight of each selected conv layer.
pub fn pca_curves(model: &NetworkModel, layers: Option<&[String]>, max_dim: Option<usize>) -> Result<Vec<(String, usize, f64)>> {
    let mut out = Vec::new();
    for l in model.layers() {
        let Layer::Conv(c) = l else { continue };
        if layers.is_some_and(|ls| !ls.contains(&c.name)) {
            continue;
        }
        let bound = c.weights.n_filters().min(c.weights.filter_len());
        let dims: Vec<usize> = (1..=max_dim.unwrap_or(bound)).collect();
        for (d, e) in pca_rank_analysis(&c.weights, &dims) {
            out.push((c.name.clone(), d, e));
        }
    }
    if let Some(ls) = layers {
        for n in ls {
            if !out.iter().any(|(l, _, _)| l == n) {
                return Err(CliError::Config(format!("no conv layer named {n}")));
            }
        }
    }
    Ok(out)
}

fn cmd_analyze(cli: &Cli, a: &AnalyzeArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let base = a.baseline.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(b) = &base {
        check_compatible(&ck.model, &b.model)?;
    }
    let dir = cli
        .output_dir
        .clone()
        .or_else(|| a.checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    match a.mode {
        Mode::Pca => {
            let mut rows = Vec::new();
            let sources = std::iter::once(("checkpoint", &ck)).chain(base.iter().map(|b| ("baseline", b)));
            for (src, c) in sources {
                for (layer, d, e) in pca_curves(&c.model, a.layers.as_deref(), a.max_dim)? {
                    rows.push((src.to_string(), layer, d, e));
                }
            }
            let path = dir.join("pca.csv");
            write_pca(&path, &rows)?;
            println!("wrote {}", path.display());
        }
        Mode::Stats => {
            let cfg = match &a.config {
                Some(p) => ExperimentConfig::load(p)?.ssl_config()?.clone(),
                None => default_stats_config(&ck.model),
            };
            let stats = sparsity_stats(&ck.model, &cfg)?;
            let path = dir.join("stats.csv");
            let mut out = CsvOut::create(&path)?;
            out.row(["scheme", "layer", "role", "groups", "zero_groups", "fraction"])?;
            for e in &stats.entries {
                println!("{:<16} {:<14} {:?} {}/{}", e.scheme, e.layer, e.role, e.zero_groups, e.groups);
                out.row([
                    e.scheme.to_string(),
                    e.layer.clone(),
                    format!("{:?}", e.role).to_lowercase(),
                    e.groups.to_string(),
                    e.zero_groups.to_string(),
                    e.fraction().to_string(),
                ])?;
            }
            out.finish()?;
            println!("wrote {}", path.display());
        }
        Mode::Flops => {
            let before = base.as_ref().map_or(&ck.model, |b| &b.model);
            let report = flop_report(before, &ck.model);
            for l in &report.layers {
                println!("{:<14} {:>12} -> {:>12} ({:.3})", l.name, l.before, l.after, l.ratio());
            }
            let path = dir.join("flops.csv");
            write_flops(&path, &report)?;
            println!("total ratio {:.4}; wrote {}", report.ratio(), path.display());
        }
    }
    info!("analyzed {}", a.checkpoint.display());
    Ok(())
}
