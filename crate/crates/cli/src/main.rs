use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use docmark::analysis::{analyze_dir, AnalyzeOptions, HeadAggregation, TsneConfig};
use docmark::harness::{self, ExperimentConfig, HarnessError, PRESET_NAMES};
use docmark::Execution;

/// Measure how visible watermarks degrade document VQA models.
#[derive(Parser, Debug)]
#[command(name = "docmark", version)]
struct Cli {
    /// Log progress (repeat for more detail). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a config file without rendering or querying anything.
    Validate { config: PathBuf },
    /// Render every watermark condition of a config into its output directory.
    Render { config: PathBuf },
    /// Render, query, grade and write the report of an experiment.
    Run { config: PathBuf },
    /// Compute attention-variation heatmaps, cosine similarities and t-SNE from tensor dumps.
    Analyze(AnalyzeArgs),
    /// Re-grade a run directory from its reply log without querying any model.
    Report { run_dir: PathBuf },
    /// Print the condition ids of a named preset.
    Preset { name: String },
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Directory of .tdump files.
    #[arg(long)]
    dumps: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Condition the others are compared against.
    #[arg(long, default_value = "clean")]
    clean: String,
    /// Layer to analyze; defaults to the deepest layer present.
    #[arg(long)]
    layer: Option<i64>,
    /// Head aggregation: mean or max.
    #[arg(long, default_value = "mean")]
    heads: HeadAggregation,
    #[arg(long, default_value_t = 5.0)]
    perplexity: f64,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

const EXIT_ANALYSIS: u8 = 3;

fn fail(code: i32, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code as u8)
}

fn harness_fail(e: HarnessError) -> ExitCode {
    fail(e.exit_code(), e)
}

fn load(path: &Path) -> Result<ExperimentConfig, HarnessError> {
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
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
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };

    match cli.command {
        Command::Validate { config } => match load(&config).and_then(|c| Ok((c.conditions()?, c))) {
            Ok((conds, cfg)) => {
                println!(
                    "ok: {} dataset(s), {} endpoint(s), {} condition(s) including clean",
                    cfg.datasets.len(),
                    cfg.endpoints.len(),
                    conds.len()
                );
                ExitCode::SUCCESS
            }
            Err(e) => harness_fail(e),
        },
        Command::Render { config } => {
            let result = load(&config).and_then(|cfg| {
                let conds = cfg.conditions()?;
                let datasets = harness::prepare_datasets(&cfg)?;
                harness::render_all(&cfg.output_dir, &conds, &datasets, exec)?;
                Ok((cfg.output_dir, conds.len() - 1))
            });
            match result {
                Ok((dir, n)) => {
                    println!("rendered {n} condition(s) into {}", dir.join("conditions").display());
                    ExitCode::SUCCESS
                }
                Err(e) => harness_fail(e),
            }
        }
        Command::Run { config } => match load(&config).and_then(|cfg| harness::run(&cfg, exec)) {
            Ok(out) => {
                print!("{}", out.report.summary());
                let s = out.stats;
                println!(
                    "\nqueries: {} planned, {} cached, {} issued, {} unanswered",
                    s.planned, s.cached, s.issued, s.unanswered
                );
                println!("artifacts: {}", out.dir.display());
                ExitCode::SUCCESS
            }
            Err(e) => harness_fail(e),
        },
        Command::Report { run_dir } => match harness::regrade(&run_dir) {
            Ok(report) => {
                print!("{}", report.summary());
                ExitCode::SUCCESS
            }
            Err(e) => harness_fail(e),
        },
        Command::Analyze(a) => {
            let opts = AnalyzeOptions {
                clean_condition: a.clean,
                layer: a.layer,
                heads: a.heads,
                tsne: TsneConfig {
                    perplexity: a.perplexity,
                    iterations: a.iterations,
                    seed: a.seed,
                    ..TsneConfig::default()
                },
            };
            if let Err(e) = std::fs::create_dir_all(&a.out) {
                return fail(EXIT_ANALYSIS as i32, format!("{}: {e}", a.out.display()));
            }
            match analyze_dir(&a.dumps, &a.out, &opts, exec) {
                Ok(s) => {
                    println!(
                        "{} dump(s): {} heatmap(s), {} cosine value(s)",
                        s.dumps_read,
                        s.attention.len(),
                        s.cosine.len()
                    );
                    match (&s.tsne, &s.tsne_skipped) {
                        (Some(t), _) => println!(
                            "t-SNE over {} points: KL {:.4} after exaggeration, {:.4} final",
                            t.points, t.kl_after_exaggeration, t.kl_final
                        ),
                        (None, Some(why)) => println!("t-SNE skipped: {why}"),
                        (None, None) => {}
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(EXIT_ANALYSIS as i32, e),
            }
        }
        Command::Preset { name } => match harness::preset(&name) {
            Ok(p) => {
                for spec in &p.conditions {
                    println!("{}", spec.slug());
                }
                if let Some(q) = p.jpeg_quality {
                    println!("(each also with JPEG quality {q})");
                }
                ExitCode::SUCCESS
            }
            Err(_) => fail(1, format!("unknown preset {name:?}; choose from {}", PRESET_NAMES.join(", "))),
        },
    }
}
