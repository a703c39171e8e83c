use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use refgame::game::LossKind;
use refgame::harness::config::default_out_dir;
use refgame::harness::{
    evaluate_run, import_embeddings, report, run_ablation, run_experiment, run_sweep, ExperimentConfig,
    HarnessError, ImportOptions, Overrides, ReportOptions, SweepGrid,
};

#[derive(Parser)]
#[command(name = "refgame", version, about = "Referential game simulator with representational-alignment metrics")]
struct Cli {
    /// Log per-epoch progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML configuration file layered over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// A single seed (shorthand for --seeds N).
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    loss: Option<LossKind>,
    /// Vocabulary size V.
    #[arg(long)]
    vocab: Option<usize>,
    /// Maximum message length L.
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Output root (default: $REFGAME_OUT or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run directory name below the output root.
    #[arg(long)]
    name: Option<String>,
    /// Parallel runs.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Start from the full-size reference configuration.
    #[arg(long)]
    paper_params: bool,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, HarnessError> {
        let overrides = Overrides {
            paper_params: self.paper_params,
            loss: self.loss,
            vocab: self.vocab,
            max_len: self.max_len,
            epochs: self.epochs,
            seeds: self.seed.map(|s| vec![s]).or_else(|| self.seeds.clone()),
            out_dir: self.out.clone(),
            run_name: self.name.clone(),
        };
        ExperimentConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write metrics, checkpoints and summaries.
    Train(Common),
    /// Re-evaluate the saved agents of a run directory.
    Evaluate {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
    },
    /// Sweep vocabulary size × message length.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated vocabulary sizes (default: the full grid).
        #[arg(long, value_delimiter = ',')]
        vocab_sizes: Option<Vec<usize>>,
        /// Comma-separated message lengths (default: the full grid).
        #[arg(long, value_delimiter = ',')]
        max_lens: Option<Vec<usize>>,
        /// Comma-separated losses to sweep.
        #[arg(long, value_delimiter = ',', default_value = "ce,ce_rsa")]
        losses: Vec<LossKind>,
    },
    /// Matched-seed comparison of ce and ce_rsa training.
    Ablate(Common),
    /// Correlation tables, curves and bars over completed runs.
    Report {
        /// Run or sweep directories to scan.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Bundle directory (default: <output root>/report).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also render SVG charts.
        #[arg(long)]
        svg: bool,
    },
    /// Convert external features plus labels into an embedding dataset.
    ImportEmbeddings {
        /// EMB1 file or headerless CSV of floats.
        #[arg(long)]
        embeddings: PathBuf,
        /// Labels CSV with header `index,category`.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Keep only categories with more items than this.
        #[arg(long)]
        min_count: Option<usize>,
        /// Items drawn per kept category.
        #[arg(long)]
        per_category: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Train(common) => {
            let cfg = common.resolve()?;
            let out = run_experiment(&cfg, common.workers)?;
            for s in &out.summaries {
                println!(
                    "seed {}: train acc {:.3} val acc {:.3} rsa_sl {:.3} rsa_si {:.3} rsa_li {:.3} topsim {:.3}",
                    s.seed,
                    s.train.accuracy,
                    s.validation.accuracy,
                    s.validation.rsa_sl,
                    s.validation.rsa_si,
                    s.validation.rsa_li,
                    s.validation.topsim
                );
            }
            println!("{}", out.dir.display());
        }
        Command::Evaluate { run } => {
            let summaries = evaluate_run(&run)?;
            println!("{}", serde_json::to_string_pretty(&summaries)?);
        }
        Command::Sweep {
            common,
            vocab_sizes,
            max_lens,
            losses,
        } => {
            let cfg = common.resolve()?;
            let full = SweepGrid::default();
            let grid = SweepGrid {
                vocab_sizes: vocab_sizes.unwrap_or(full.vocab_sizes),
                max_lens: max_lens.unwrap_or(full.max_lens),
            };
            let outcome = run_sweep(&cfg, &grid, &losses, common.workers)?;
            for b in &outcome.best {
                println!(
                    "best {} cell: V={} L={} (validation accuracy {:.3})",
                    b.loss, b.vocab, b.max_len, b.accuracy
                );
            }
            if !outcome.failures.is_empty() {
                eprintln!("{} runs failed; see {}", outcome.failures.len(), outcome.dir.display());
            }
            println!("{}", outcome.dir.display());
        }
        Command::Ablate(common) => {
            let cfg = common.resolve()?;
            let r = run_ablation(&cfg, common.workers)?;
            println!(
                "max relative ce divergence {:.4}; mean relative ce difference {:.4}",
                r.max_relative_ce_divergence, r.mean_relative_mean_abs_ce_difference
            );
            println!("{}", r.dir.display());
        }
        Command::Report { inputs, out, svg } => {
            let out_dir = out.unwrap_or_else(|| default_out_dir().join("report"));
            let bundle = report(&ReportOptions {
                inputs,
                out_dir: out_dir.clone(),
                svg,
            })?;
            info!("report over {} runs", bundle.runs.len());
            println!("{}", out_dir.display());
        }
        Command::ImportEmbeddings {
            embeddings,
            labels,
            out,
            min_count,
            per_category,
            seed,
        } => {
            let s = import_embeddings(&ImportOptions {
                embeddings,
                labels,
                out_dir: out,
                min_count,
                per_category,
                seed,
            })?;
            println!(
                "imported {} of {} items ({} categories, dim {})",
                s.items_out,
                s.items_in,
                s.categories.len(),
                s.dim
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
