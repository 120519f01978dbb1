use std::path::PathBuf;
use std::process::ExitCode;

use budgetformer::run::{
    run_ablation, run_analyze, run_eval, run_train, AblationMode, DataArg, EvalFlags, RunConfig,
};
use budgetformer::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

const DEFAULT_GRID: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 1.0];

#[derive(Parser)]
#[command(name = "budgetformer", version, about = "Train and inspect budgeted-attention encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a run configuration.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Evaluate a checkpoint and write a cost report.
    Eval {
        #[command(flatten)]
        source: SourceArgs,
        /// Run exactly this many heads per layer.
        #[arg(long)]
        force_k: Option<usize>,
        #[arg(long)]
        grams_per_flop: Option<f64>,
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
    },
    /// Fixed-budget grid or learned-vs-random gating comparison.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Comma-separated budgets; defaults to 0.1,0.25,0.5,0.75,1.0 for
        /// fixed_budget and to the learned s_mean for random_gating.
        #[arg(long)]
        grid: Option<String>,
        /// Run grid points concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Export budget statistics and attention maps for a checkpoint.
    Analyze {
        #[command(flatten)]
        source: SourceArgs,
        /// Dataset positions whose attention maps to consider for dumping.
        #[arg(long = "example-index")]
        example_index: Vec<usize>,
        #[arg(long)]
        dump_attention: bool,
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Mode {
    FixedBudget,
    RandomGating,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config, &self.overrides, self.seed)
    }
}

#[derive(Args)]
struct SourceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run configuration whose validation split is used.
    #[arg(long, conflicts_with_all = ["data", "vocab"])]
    config: Option<PathBuf>,
    /// JSONL file to evaluate (requires --vocab).
    #[arg(long, requires = "vocab")]
    data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    vocab: Option<PathBuf>,
}

impl SourceArgs {
    fn data(&self) -> Result<DataArg> {
        match (&self.config, &self.data, &self.vocab) {
            (Some(c), _, _) => Ok(DataArg::Config(Box::new(RunConfig::load(c, &[], None)?))),
            (None, Some(path), Some(vocab)) => Ok(DataArg::Jsonl {
                path: path.clone(),
                vocab: vocab.clone(),
            }),
            _ => Err(Error::Param("give --config or --data with --vocab".into())),
        }
    }
}

fn parse_grid(raw: Option<&str>, mode: Mode) -> Result<Vec<f64>> {
    let Some(raw) = raw else {
        return Ok(match mode {
            Mode::FixedBudget => DEFAULT_GRID.to_vec(),
            Mode::RandomGating => Vec::new(),
        });
    };
    let grid = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| Error::Param(format!("bad grid value {s:?}"))))
        .collect::<Result<Vec<_>>>()?;
    if grid.is_empty() {
        return Err(Error::Param("grid is empty".into()));
    }
    Ok(grid)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.6}"))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { run } => {
            let cfg = run.load()?;
            let summary = run_train(&cfg)?;
            let e = &summary.evaluation;
            println!(
                "best epoch {} val accuracy {:.4} s_mean {} mean_k {:.3} ratio_attention {:.4}",
                summary.best_epoch,
                e.accuracy,
                opt(e.selection.s_mean),
                e.mean_k,
                e.cost.ratio_attention
            );
            println!("outputs in {}", summary.output_dir.display());
        }
        Command::Eval {
            source,
            force_k,
            grams_per_flop,
            output_dir,
        } => {
            let flags = EvalFlags {
                force_k,
                grams_per_flop,
                batch_size: None,
            };
            let e = run_eval(&source.checkpoint, &source.data()?, &flags, &output_dir)?;
            println!("accuracy {:.6}", e.accuracy);
            println!("s_mean {}", opt(e.selection.s_mean));
            println!("mean_k {:.6}", e.mean_k);
            println!("flops_total {}", e.cost.flops_total);
            println!("ratio_attention {:.6}", e.cost.ratio_attention);
            println!("carbon_proxy {}", e.cost.carbon_proxy);
        }
        Command::Ablate {
            run,
            mode,
            grid,
            parallel,
        } => {
            let cfg = run.load()?;
            let grid = parse_grid(grid.as_deref(), mode)?;
            let ablation = match mode {
                Mode::FixedBudget => AblationMode::FixedBudget,
                Mode::RandomGating => AblationMode::RandomGating,
            };
            for r in run_ablation(&cfg, ablation, &grid, parallel)? {
                println!(
                    "{}: accuracy {:.4} mean_k {:.3} ratio_attention {:.4}",
                    r.label, r.accuracy, r.mean_k, r.ratio_attention
                );
            }
            println!("table in {}", cfg.output_dir.join("comparison.csv").display());
        }
        Command::Analyze {
            source,
            example_index,
            dump_attention,
            output_dir,
        } => {
            let dumps = if dump_attention {
                if example_index.is_empty() {
                    vec![0]
                } else {
                    example_index
                }
            } else {
                Vec::new()
            };
            let a = run_analyze(&source.checkpoint, &source.data()?, &EvalFlags::default(), &dumps, &output_dir)?;
            println!(
                "{} class rows, {} tier rows, {} attention dumps in {}",
                a.classes.len(),
                a.tiers.len(),
                a.attention.len(),
                output_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
