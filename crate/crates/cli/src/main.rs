//! `r2lab`: pretrain with range regularizers, quantization-aware training,
//! palettized compression, weight-distribution reports and oracle suites.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use r2lab::analytics::{layer_stats_with_bins, skew_check, stats_table, table_to_csv};
use r2lab::config::ExperimentConfig;
use r2lab::data_io::{atomic_write, load_checkpoint, load_data, save_checkpoint, Checkpoint};
use r2lab::trainer::{metrics_csv, run_compress, run_pretrain, run_qat, RunOptions, RunOutput};
use r2lab::verify::{run_suite, GradOps, Suite};

/// File names written into `--out`.
const CONFIG_FILE: &str = "config.toml";
const METRICS_FILE: &str = "metrics.csv";
const SUMMARY_FILE: &str = "summary.json";
const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Parser)]
#[command(name = "r2lab", version, about = "Range regularization, QAT and palettization lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fresh model with the configured range regularizer.
    Pretrain(TrainArgs),
    /// Quantization-aware fine-tuning from a checkpoint.
    Qat(FinetuneArgs),
    /// Differentiable k-means palettization from a checkpoint.
    Compress(FinetuneArgs),
    /// Compare the weight distributions of two checkpoints.
    Report(ReportArgs),
    /// Run the built-in oracle suites.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML experiment config; omitted sections take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Starting checkpoint: a manifest file or a run directory.
    #[arg(long, required = true)]
    init: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Histogram bins per layer.
    #[arg(long, default_value_t = 64)]
    bins: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Grad,
    Limits,
    Palette,
    All,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: SuiteArg,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(a) => train(&a, None, Phase::Pretrain),
        Command::Qat(a) => train(&a.train, Some(&a.init), Phase::Qat),
        Command::Compress(a) => train(&a.train, Some(&a.init), Phase::Compress),
        Command::Report(a) => report(&a),
        Command::Verify(a) => verify(a.suite),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn threads() -> Result<usize> {
    match std::env::var("R2LAB_THREADS") {
        Err(_) => Ok(1),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => bail!("R2LAB_THREADS must be a positive integer, got {s:?}"),
        },
    }
}

/// Parses and validates a TOML config; errors name the offending field.
fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        None => ExperimentConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            parse_config(&text).with_context(|| format!("config {}", p.display()))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::parse(text)?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow::anyhow!("{path}: {}", e.into_inner().message())
    })
}

fn checkpoint_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join(CHECKPOINT_FILE)
    } else {
        p.to_path_buf()
    }
}

fn read_checkpoint(p: &Path) -> Result<Checkpoint> {
    let path = checkpoint_path(p);
    let (ck, warnings) = load_checkpoint(&path, None).with_context(|| format!("loading checkpoint {}", path.display()))?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(ck)
}

#[derive(Clone, Copy)]
enum Phase {
    Pretrain,
    Qat,
    Compress,
}

fn train(args: &TrainArgs, init: Option<&Path>, phase: Phase) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let init = init.map(read_checkpoint).transpose()?;
    let (train, test) = load_data(&cfg.data).context("loading data")?;
    let opts = RunOptions { seed: args.seed, threads: threads()? };
    let out = match (phase, &init) {
        (Phase::Pretrain, _) => run_pretrain(&cfg, opts, &train, &test)?,
        (Phase::Qat, Some(ck)) => run_qat(&cfg, opts, ck, &train, &test)?,
        (Phase::Compress, Some(ck)) => run_compress(&cfg, opts, ck, &train, &test)?,
        _ => bail!("--init is required"),
    };
    write_run(&args.out, &cfg, &out)?;
    print_summary(&out);
    Ok(())
}

fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    atomic_write(&dir.join(CONFIG_FILE), toml::to_string(cfg)?.as_bytes())?;
    atomic_write(&dir.join(METRICS_FILE), metrics_csv(&out.metrics).as_bytes())?;
    atomic_write(&dir.join(SUMMARY_FILE), to_json(&out.summary)?.as_bytes())?;
    save_checkpoint(&out.checkpoint, &dir.join(CHECKPOINT_FILE))?;
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

fn print_summary(out: &RunOutput) {
    let s = &out.summary;
    println!("{} {} seed {} reg {}", s.phase, s.architecture, s.seed, s.reg_kind);
    if let Some(a) = s.init_test_accuracy {
        println!("initial test accuracy {a:.4}");
    }
    println!("final test accuracy {:.4} (task loss {:.4})", s.final_test_accuracy, s.final_task_loss);
    for l in &s.layers {
        let k = l.kurtosis.map_or("-".to_string(), |k| format!("{k:.3}"));
        println!("  {:<8} range {:.4} std {:.4} kurtosis {k} distinct {}", l.layer, l.range, l.std, l.distinct_values);
    }
    if let Some(r) = &s.size_report {
        println!("size: {} bytes (codebooks {}, indices {}, float {})", r.total_bytes, r.codebook_bytes, r.index_bytes, r.float_bytes);
    }
    for w in &s.warnings {
        eprintln!("warning: {w}");
    }
}

#[derive(Serialize)]
struct Source {
    path: String,
    architecture: String,
    seed: u64,
    config_hash: String,
}

#[derive(Serialize)]
struct ReportMeta {
    a: Source,
    b: Source,
    bins: usize,
    std_convention: &'static str,
    kurtosis_convention: &'static str,
}

fn report(args: &ReportArgs) -> Result<()> {
    if args.bins == 0 {
        bail!("--bins must be ≥ 1");
    }
    let a = read_checkpoint(&args.a)?;
    let b = read_checkpoint(&args.b)?;
    if !a.model.same_layout(&b.model) {
        bail!("architecture mismatch: {} vs {}", a.model.arch.name(), b.model.arch.name());
    }
    let wa: Vec<(&str, &[f64])> = a.model.weights().into_iter().map(|(n, w)| (n, w.data())).collect();
    let wb: Vec<(&str, &[f64])> = b.model.weights().into_iter().map(|(n, w)| (n, w.data())).collect();
    let table = stats_table(&wa, &wb)?;

    let mut stats = String::from("checkpoint,layer,count,min,max,mean,range,std,kurtosis\n");
    let mut skew = String::from("checkpoint,layer,mean_offset,asymmetry\n");
    let mut hists = Vec::new();
    for (tag, weights) in [("a", &wa), ("b", &wb)] {
        for (name, w) in weights.iter() {
            let s = layer_stats_with_bins(name, w, args.bins)?;
            let k = s.kurtosis.map_or(String::new(), |k| k.to_string());
            stats.push_str(&format!("{tag},{name},{},{},{},{},{},{},{k}\n", s.count, s.min, s.max, s.mean, s.range, s.std));
            let sk = skew_check(w)?;
            skew.push_str(&format!("{tag},{name},{},{}\n", sk.mean_offset, sk.asymmetry));
            hists.push((format!("hist_{tag}_{name}.txt"), s.histogram.to_text()));
        }
    }
    let source = |p: &Path, ck: &Checkpoint| Source {
        path: checkpoint_path(p).display().to_string(),
        architecture: ck.model.arch.name(),
        seed: ck.seed,
        config_hash: ck.config_hash.clone(),
    };
    let meta = ReportMeta {
        a: source(&args.a, &a),
        b: source(&args.b, &b),
        bins: args.bins,
        std_convention: "population",
        kurtosis_convention: "pearson (normal = 3, uniform = 1.8)",
    };

    let dir = &args.out;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    atomic_write(&dir.join("stats_table.csv"), table_to_csv(&table).as_bytes())?;
    atomic_write(&dir.join("layer_stats.csv"), stats.as_bytes())?;
    atomic_write(&dir.join("skew.csv"), skew.as_bytes())?;
    for (name, text) in &hists {
        atomic_write(&dir.join(name), text.as_bytes())?;
    }
    atomic_write(&dir.join("report.json"), to_json(&meta)?.as_bytes())?;

    println!("layer      range_a    range_b    ratio   std_a     std_b     ratio");
    for r in &table {
        println!(
            "{:<8} {:>9.4} {:>9.4} {:>7.3} {:>9.4} {:>9.4} {:>7.3}",
            r.layer, r.range_a, r.range_b, r.range_ratio, r.std_a, r.std_b, r.std_ratio
        );
    }
    Ok(())
}

fn verify(suite: SuiteArg) -> Result<()> {
    let suite = match suite {
        SuiteArg::Grad => Suite::Grad,
        SuiteArg::Limits => Suite::Limits,
        SuiteArg::Palette => Suite::Palette,
        SuiteArg::All => Suite::All,
    };
    let checks = run_suite(suite, GradOps::default())?;
    for c in &checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        bail!("{failed} check(s) failed");
    }
    Ok(())
}
