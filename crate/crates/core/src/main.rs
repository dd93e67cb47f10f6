//! Command-line entry point: one subcommand per pipeline stage plus the
//! live scoring server.
//!
//! Every subcommand takes `--config <path>` (a JSON [`ExperimentConfig`])
//! and a few overriding flags; overrides are applied before validation and
//! hashing, so artifacts produced under an override never collide with the
//! base configuration. Invalid configurations exit non-zero with a message
//! on stderr.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use disputelab::config::ExperimentConfig;
use disputelab::{pipeline, serve};

#[derive(Parser)]
#[command(
    name = "disputelab",
    version,
    about = "Predict whether online content disputes escalate to mediation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args)]
struct Common {
    /// Experiment configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the experiment seed (the DISPUTELAB_SEED env var does too).
    #[arg(long)]
    seed: Option<u64>,
    /// Override paths.corpus from the config.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Override paths.output_dir from the config.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ArchOverride {
    /// Override model.architecture (averaged, sequential, hierarchical).
    #[arg(long)]
    arch: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Load the raw corpus, merge edit summaries, and apply quality filters.
    Ingest(Common),
    /// Pair each escalated conversation with equal-length controls.
    Match(Common),
    /// Write the stratified train/validation/test split manifest.
    Split(Common),
    /// Write aggregated feature CSVs for each split.
    Featurize(Common),
    /// Fit the configured logistic model on the feature tables.
    TrainLinear(Common),
    /// Grid-search regularization mode and strength, keeping the best model.
    Grid(Common),
    /// Train a neural architecture and checkpoint its best epoch.
    TrainNeural {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        arch: ArchOverride,
    },
    /// Score every model family on the test split and write the report.
    Evaluate(Common),
    /// Per-prefix prediction trace (CSV + SVG) for one conversation.
    Trace {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        arch: ArchOverride,
        /// Conversation id from the matched corpus.
        conversation_id: String,
    },
    /// PR-AUC and uncertainty as a function of the observed fraction.
    EarlyEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        arch: ArchOverride,
    },
    /// Top bag-of-words coefficients for each class.
    Words(Common),
    /// Serve the live scoring endpoint over HTTP.
    Serve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        arch: ArchOverride,
        /// Address to listen on.
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: SocketAddr,
    },
}

fn load_config(common: &Common, arch: Option<&ArchOverride>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.propagate_seed();
    }
    if let Some(corpus) = &common.corpus {
        cfg.paths.corpus = corpus.clone();
    }
    if let Some(dir) = &common.output_dir {
        cfg.paths.output_dir = dir.clone();
    }
    if let Some(ArchOverride { arch: Some(tag) }) = arch {
        cfg.model.architecture = tag.parse().map_err(|e: String| anyhow::anyhow!(e))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Ingest(common) => {
            let cfg = load_config(common, None)?;
            let s = pipeline::ingest(&cfg)?;
            println!(
                "ingest: {} conversations in, {} kept, {} rejected",
                s.input,
                s.kept,
                s.input - s.kept
            );
            for (reason, n) in &s.rejections {
                println!("  rejected {reason}: {n}");
            }
            println!(
                "  edit summaries merged {}, excluded {} (non-participant {}, out of window {})",
                s.merge.added,
                s.merge.excluded(),
                s.merge.excluded_non_participant,
                s.merge.excluded_out_of_window
            );
        }
        Command::Match(common) => {
            let cfg = load_config(common, None)?;
            let s = pipeline::match_corpus(&cfg)?;
            println!(
                "match: {} escalated + {} matched controls ({} with a shortfall)",
                s.positives, s.matched_negatives, s.deficit_positives
            );
            println!(
                "  median length escalated {} vs not escalated {}",
                s.median_escalated, s.median_not_escalated
            );
        }
        Command::Split(common) => {
            let cfg = load_config(common, None)?;
            let s = pipeline::split_corpus(&cfg)?;
            for (name, escalated, not) in &s.counts {
                println!("split {name}: {escalated} escalated / {not} not escalated");
            }
        }
        Command::Featurize(common) => {
            let cfg = load_config(common, None)?;
            let s = pipeline::featurize(&cfg)?;
            println!("featurize: {} ({} columns)", s.feature_set, s.columns);
            for (name, rows) in &s.rows {
                println!("  {name}: {rows} conversations");
            }
        }
        Command::TrainLinear(common) => {
            let cfg = load_config(common, None)?;
            let s = pipeline::train_linear(&cfg)?;
            println!(
                "train-linear: {} C={} on {} rows x {} features, validation PR-AUC {:.4}",
                s.regularization, s.c, s.rows, s.features, s.validation_pr_auc
            );
        }
        Command::Grid(common) => {
            let cfg = load_config(common, None)?;
            let s = pipeline::grid(&cfg)?;
            for e in &s.entries {
                println!("  {:<2} C={:<7} validation PR-AUC {:.4}", e.regularization, e.c, e.val_pr_auc);
            }
            println!(
                "grid: best {} C={} validation PR-AUC {:.4}",
                s.best_regularization, s.best_c, s.best_validation_pr_auc
            );
        }
        Command::TrainNeural { common, arch } => {
            let cfg = load_config(common, Some(arch))?;
            let s = pipeline::train_neural(&cfg)?;
            println!(
                "train-neural: {} ran {} epochs, best epoch {} with validation PR-AUC {:.4}",
                s.architecture, s.epochs, s.best_epoch, s.best_val_pr_auc
            );
        }
        Command::Evaluate(common) => {
            let cfg = load_config(common, None)?;
            let s = pipeline::evaluate(&cfg)?;
            println!(
                "evaluate: {} test conversations ({} escalated)",
                s.test_size, s.test_positives
            );
            println!("{:<24} {:>8} {:>15} {:>12}", "model", "pr_auc", "break_even_f1", "p_vs_random");
            for r in &s.rows {
                println!(
                    "{:<24} {:>8.3} {:>15.3} {:>12.4}",
                    r.model, r.pr_auc, r.break_even_f1, r.p_vs_random
                );
            }
        }
        Command::Trace { common, arch, conversation_id } => {
            let cfg = load_config(common, Some(arch))?;
            let tr = pipeline::trace_conversation(&cfg, conversation_id)?;
            println!("trace: {} over {} prefixes", conversation_id, tr.entries.len());
            for pair in tr.entries.windows(2) {
                let (a, b) = (&pair[0], &pair[1]);
                if (a.mean < 0.5) != (b.mean < 0.5) {
                    let direction = if b.mean >= 0.5 { "upward" } else { "downward" };
                    println!("  crosses 0.5 {direction} at utterance {}", b.prefix_len);
                }
            }
            if let Some(last) = tr.entries.last() {
                println!("  final score {:.3} \u{b1} {:.3}", last.mean, last.std);
            }
        }
        Command::EarlyEval { common, arch } => {
            let cfg = load_config(common, Some(arch))?;
            let curve = pipeline::early_eval(&cfg)?;
            println!("{:>8} {:>8} {:>12}", "fraction", "pr_auc", "uncertainty");
            for p in &curve.points {
                println!("{:>8.1} {:>8.3} {:>12.4}", p.fraction, p.pr_auc, p.mean_uncertainty);
            }
        }
        Command::Words(common) => {
            let cfg = load_config(common, None)?;
            let s = pipeline::top_words(&cfg)?;
            println!("top bag-of-words coefficients (positive pulls toward escalation):");
            for (i, (word, weight)) in s.words.iter().enumerate() {
                println!("{:>3}. {:<20} {:+.4}", i + 1, word, weight);
            }
        }
        Command::Serve { common, arch, listen } => {
            let cfg = load_config(common, Some(arch))?;
            let runtime = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
            runtime.block_on(serve::run(&cfg, *listen))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
