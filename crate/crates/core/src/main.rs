use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use patchcore::config::{load_config, Overrides, RunConfig};
use patchcore::coreset::Method;
use patchcore::pipeline;
use patchcore::scoring::ReweightAround;
use patchcore::synth::{generate, SynthConfig};
use patchcore::{Error, Result};

#[derive(Parser)]
#[command(name = "patchcore", version, about = "Patch-feature memory bank anomaly detection")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and subsample the memory bank of every class.
    Build(RunArgs),
    /// Score test images against the stored banks.
    Score(RunArgs),
    /// Compute metrics and curve points from stored scores.
    Evaluate(RunArgs),
    /// build + score + evaluate.
    Run(RunArgs),
    /// Retrain on subsets of the train images.
    Lowshot(RunArgs),
    /// Subsampling and neighbourhood sweeps.
    Ablate(RunArgs),
    /// Write a synthetic dataset and matching run.toml.
    Synth(SynthArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Neighbourhood size p.
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Comma-separated hierarchy levels.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<usize>>,
    #[arg(long)]
    d_pre: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, conflicts_with = "count")]
    fraction: Option<f64>,
    #[arg(long)]
    count: Option<usize>,
    /// Random projection dimension, or "off".
    #[arg(long)]
    projection_dim: Option<String>,
    /// greedy, random or learned_proxy.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    b: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    /// test-feature or bank-nn.
    #[arg(long)]
    reweight_around: Option<String>,
    #[arg(long)]
    fpr_limit: Option<f64>,
    /// One F1-optimal threshold across all classes.
    #[arg(long)]
    global_threshold: bool,
}

#[derive(Args)]
struct SynthArgs {
    /// Destination directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    train: usize,
    #[arg(long, default_value_t = 10)]
    test_normal: usize,
    #[arg(long, default_value_t = 10)]
    test_anomalous: usize,
    #[arg(long, default_value_t = 6.0)]
    offset: f32,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = load_config(&self.config)?;
        let projection_dim = match self.projection_dim.as_deref() {
            None => None,
            Some("off") => Some(None),
            Some(s) => Some(Some(s.parse::<usize>().map_err(|_| Error::Config {
                field: "coreset.projection_dim".into(),
                msg: format!("expected an integer or \"off\", got {s:?}"),
            })?)),
        };
        let overrides = Overrides {
            output_dir: self.output_dir.clone(),
            patch_size: self.patch_size,
            stride: self.stride,
            levels: self.levels.clone(),
            pre_dim: self.d_pre,
            dim: self.dim,
            fraction: self.fraction,
            count: self.count,
            projection_dim,
            method: self.method.as_deref().map(str::parse::<Method>).transpose()?,
            seed: self.seed,
            b: self.b,
            sigma: self.sigma,
            reweight_around: self
                .reweight_around
                .as_deref()
                .map(str::parse::<ReweightAround>)
                .transpose()?,
            fpr_limit: self.fpr_limit,
            global_threshold: self.global_threshold,
        };
        overrides.apply(&mut cfg)?;
        Ok(cfg)
    }
}

fn print_metrics(rows: &[patchcore::metrics::ClassMetrics]) {
    println!("{:<16} {:>11} {:>11} {:>8} {:>4} {:>4}", "class", "image_auroc", "pixel_auroc", "pro", "fp", "fn");
    for r in rows {
        println!(
            "{:<16} {:>11.4} {:>11.4} {:>8.4} {:>4} {:>4}",
            r.class, r.image_auroc, r.pixel_auroc, r.pro, r.false_positives, r.false_negatives
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Build(a) => pipeline::cmd_build(&a.load()?),
        Command::Score(a) => pipeline::cmd_score(&a.load()?),
        Command::Evaluate(a) => {
            print_metrics(&pipeline::cmd_evaluate(&a.load()?)?);
            Ok(())
        }
        Command::Run(a) => {
            let cfg = a.load()?;
            pipeline::cmd_build(&cfg)?;
            pipeline::cmd_score(&cfg)?;
            print_metrics(&pipeline::cmd_evaluate(&cfg)?);
            Ok(())
        }
        Command::Lowshot(a) => {
            for r in pipeline::cmd_lowshot(&a.load()?)? {
                println!(
                    "{} shots={} trials={} image_auroc={:.4}±{:.4} pixel_auroc={:.4}±{:.4}",
                    r.class, r.shots, r.trials, r.image_auroc.0, r.image_auroc.1, r.pixel_auroc.0, r.pixel_auroc.1
                );
            }
            Ok(())
        }
        Command::Ablate(a) => {
            let cfg = a.load()?;
            let rows = pipeline::cmd_ablate(&cfg)?;
            println!("{} rows written to {}", rows.len(), cfg.output_dir.join(pipeline::ABLATION_FILE).display());
            Ok(())
        }
        Command::Synth(a) => {
            let cfg = SynthConfig {
                seed: a.seed,
                n_train: a.train,
                n_test_normal: a.test_normal,
                n_test_anomalous: a.test_anomalous,
                offset: a.offset,
                ..Default::default()
            };
            let ds = generate(&a.out, &cfg).map_err(|e| e.in_stage("synth"))?;
            println!("wrote {}", ds.config_file.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
