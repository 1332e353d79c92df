//! Command-line entry point: the full pipeline plus one subcommand per
//! stage, a scorer, an n-gram analyzer, and a stratified fold splitter.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use reliasql::analyze::render_frequency_tables;
use reliasql::evaluate::Penalty;
use reliasql::pipeline::{
    self, stage_analyze, stage_ensemble, stage_generate, stage_score, stage_split, stage_templatize,
    stage_verify, PipelineConfig,
};

#[derive(Parser)]
#[command(name = "reliasql", version, about = "Reliability-first text-to-SQL pipeline and evaluation harness")]
struct Cli {
    /// JSON config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = processor count).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct PathOverrides {
    /// Questions file (JSON array of {id, question}).
    #[arg(long)]
    questions: Option<PathBuf>,
    /// Gold labels file (JSON object id -> SQL or "null").
    #[arg(long)]
    labels: Option<PathBuf>,
    /// SQLite database file, opened read-only.
    #[arg(long)]
    db: Option<PathBuf>,
    /// Schema catalog descriptor; the shipped EHR catalog when absent.
    #[arg(long)]
    catalog: Option<PathBuf>,
    /// Replay cache file (JSON lines).
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the whole pipeline over a dataset and score it when labels are
    /// present.
    Run {
        #[command(flatten)]
        paths: PathOverrides,
    },
    /// Rewrite questions into the training-template style.
    Templatize {
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate candidate SQL for every question.
    Generate {
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify a candidates file against the database.
    Verify {
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reduce verified candidates to final predictions.
    Ensemble {
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predictions file against gold labels.
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        db: Option<PathBuf>,
        /// Comma-separated penalty levels, e.g. 0,5,10,N.
        #[arg(long, default_value = "0,5,10,N")]
        penalties: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// N-gram frequency tables for a split.
    Analyze {
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Restrict to questions whose gold label is null.
        #[arg(long)]
        unanswerable: bool,
        /// Largest n to tabulate (1..=3).
        #[arg(long, default_value_t = 3)]
        n: usize,
        /// Rows per table.
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Split name shown in the output.
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stratified k-fold assignment over a labeled split.
    Split {
        #[arg(long)]
        questions: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        config.jobs = jobs;
    }
    Ok(config)
}

fn apply_path_overrides(config: &mut PipelineConfig, paths: &PathOverrides) {
    if paths.questions.is_some() {
        config.paths.questions = paths.questions.clone();
    }
    if paths.labels.is_some() {
        config.paths.labels = paths.labels.clone();
    }
    if paths.db.is_some() {
        config.paths.database = paths.db.clone();
    }
    if paths.catalog.is_some() {
        config.paths.catalog = paths.catalog.clone();
    }
    if paths.cache.is_some() {
        config.paths.cache = paths.cache.clone();
    }
    if paths.out.is_some() {
        config.paths.output_dir = paths.out.clone();
    }
}

fn questions_path(config: &PipelineConfig, flag: &Option<PathBuf>) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| config.paths.questions.clone())
        .context("--questions (or paths.questions in the config) is required")
}

fn parse_penalties(text: &str) -> Result<Vec<Penalty>> {
    text.split(',')
        .map(|p| Penalty::parse(p).map_err(anyhow::Error::from))
        .collect()
}

fn write_json(path: &PathBuf, value: &impl serde::Serialize) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut config = load_config(&cli)?;
    match cli.command {
        Command::Run { paths } => {
            apply_path_overrides(&mut config, &paths);
            let summary = pipeline::run(&config)?;
            println!("predictions: {}", summary.predictions_path.display());
            if let Some(report) = &summary.report {
                print!("{}", report.render());
            }
            println!("manifest: {}", summary.manifest_path.display());
            Ok(())
        }
        Command::Templatize { questions, out } => {
            let questions = questions_path(&config, &questions)?;
            stage_templatize(&config, &questions, &out)?;
            println!("templatized questions: {}", out.display());
            Ok(())
        }
        Command::Generate { questions, out } => {
            let questions = questions_path(&config, &questions)?;
            stage_generate(&config, &questions, &out)?;
            println!("candidates: {}", out.display());
            Ok(())
        }
        Command::Verify {
            questions,
            candidates,
            out,
        } => {
            let questions = questions_path(&config, &questions)?;
            stage_verify(&config, &questions, &candidates, &out)?;
            println!("verified candidates: {}", out.display());
            Ok(())
        }
        Command::Ensemble {
            questions,
            candidates,
            out,
        } => {
            let questions = questions_path(&config, &questions)?;
            stage_ensemble(&config, &questions, &candidates, &out)?;
            println!("predictions: {}", out.display());
            Ok(())
        }
        Command::Score {
            pred,
            gold,
            db,
            penalties,
            out,
        } => {
            let database = db
                .or_else(|| config.paths.database.clone())
                .context("--db (or paths.database in the config) is required")?;
            let penalties = parse_penalties(&penalties)?;
            let report = stage_score(&pred, &gold, &database, &penalties, config.timeout_ms)?;
            print!("{}", report.render());
            if let Some(out) = out {
                write_json(&out, &report.rounded())?;
                println!("report: {}", out.display());
            }
            Ok(())
        }
        Command::Analyze {
            questions,
            labels,
            unanswerable,
            n,
            top,
            split,
            out,
        } => {
            let questions = questions_path(&config, &questions)?;
            let labels = labels.or_else(|| config.paths.labels.clone());
            if unanswerable && labels.is_none() {
                bail!("--unanswerable needs --labels (or paths.labels in the config)");
            }
            let report = stage_analyze(&questions, labels.as_deref(), unanswerable, n, top, split.as_deref())?;
            print!("{}", render_frequency_tables(&report.split, &report.tables, top));
            if let Some(out) = out {
                write_json(&out, &report)?;
                println!("report: {}", out.display());
            }
            Ok(())
        }
        Command::Split {
            questions,
            labels,
            k,
            out,
        } => {
            let questions = questions_path(&config, &questions)?;
            let labels = labels
                .or_else(|| config.paths.labels.clone())
                .context("--labels (or paths.labels in the config) is required")?;
            let folds = stage_split(&questions, &labels, k, config.seed, &config.categorizer)?;
            write_json(&out, &folds)?;
            let sizes = folds.fold_sizes();
            println!("folds: {} ({} items, sizes {:?})", out.display(), folds.assignment.len(), sizes);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
