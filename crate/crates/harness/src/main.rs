//! Command-line driver for corpus building, LM pretraining, training,
//! decoding, evaluation, and the benchmark experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use dysbench::artifacts::ArtifactStore;
use dysbench::bench::{cross_dataset_matrix, error_profiles, run_benchmark, severity_curves};
use dysbench::config::{resolve_out_dir, ExperimentConfig};
use dysbench::report::emit_reports;
use dysbench::runner::{ensure_checkpoint, ensure_lm_suite, ensure_records};
use dysbench_core::asr::Architecture;
use dysbench_core::corpus::{read_manifest, write_manifest};
use dysbench_core::metrics::{aggregate, GroupBy};

#[derive(Parser)]
#[command(
    name = "dysbench",
    about = "Benchmark CTC, attention, and LM-coupled decoding on synthetic dysarthric speech",
    version
)]
struct Cli {
    /// Experiment configuration (TOML or JSON); defaults are used if absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed override (replaces the config's seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root (falls back to config, then $DYSBENCH_OUT, then
    /// ./dysbench-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Parallel worker threads for independent jobs. Each job is internally
    /// single-threaded and deterministic.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus operations.
    Corpus {
        #[command(subcommand)]
        action: CorpusAction,
    },
    /// Language-model operations.
    Lm {
        #[command(subcommand)]
        action: LmAction,
    },
    /// Train one architecture on one corpus.
    Train {
        #[arg(long)]
        arch: String,
        #[arg(long)]
        corpus: String,
    },
    /// Decode a trained checkpoint against a corpus's test split.
    Decode {
        #[arg(long)]
        arch: String,
        /// Corpus the checkpoint was trained on.
        #[arg(long)]
        corpus: String,
        /// Corpus whose test split to decode (defaults to the training one).
        #[arg(long)]
        test_corpus: Option<String>,
    },
    /// Aggregate a records CSV into WER/CER tables.
    Eval {
        /// Path to a records CSV produced by decode.
        #[arg(long)]
        records: PathBuf,
        /// Comma-separated grouping: any of model,corpus,severity.
        #[arg(long, default_value = "model")]
        group_by: String,
    },
    /// Full benchmark: train and evaluate every (architecture, corpus,
    /// seed) cell and emit all reports.
    Bench,
    /// Severity-stratified WER analysis from benchmark artifacts.
    Severity,
    /// Cross-dataset generalization matrix from benchmark artifacts.
    Crossdataset,
    /// Character-level error profile and sample transcriptions.
    ErrorReport {
        #[arg(long, default_value_t = 5)]
        n_samples: usize,
    },
}

#[derive(Subcommand)]
enum CorpusAction {
    /// Build every configured corpus for the configured seeds.
    Build,
    /// Validate an existing manifest file.
    Check { path: PathBuf },
}

#[derive(Subcommand)]
enum LmAction {
    /// Pretrain the LM suite (n-gram, GPT-style, BART-style, frozen large).
    Pretrain,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(clean) => {
            if clean {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    Ok(config)
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let config = load_config(&cli)?;
    let out_dir = resolve_out_dir(cli.out.as_deref(), &config);
    let mut log = |msg: &str| eprintln!("[dysbench] {msg}");
    match &cli.command {
        Command::Corpus { action } => match action {
            CorpusAction::Build => {
                let store = ArtifactStore::new(&out_dir, &config.hash())?;
                for corpus in &config.corpora {
                    for &seed in &config.seeds {
                        let manifest = store.ensure_corpus(corpus, seed)?;
                        let path = store.manifest_path(&corpus.corpus_id, seed);
                        // Rewrite to keep the on-disk copy canonical.
                        write_manifest(&manifest, &path)?;
                        let hash = store.corpus_hash(&corpus.corpus_id, seed)?;
                        println!(
                            "{} seed {}: {} utterances, content hash {:016x} -> {}",
                            corpus.corpus_id,
                            seed,
                            manifest.utterances.len(),
                            hash,
                            path.display()
                        );
                    }
                }
                Ok(true)
            }
            CorpusAction::Check { path } => {
                let manifest = read_manifest(path)?;
                println!(
                    "{}: {} speakers, {} utterances, valid",
                    manifest.corpus_id,
                    manifest.speakers.len(),
                    manifest.utterances.len()
                );
                Ok(true)
            }
        },
        Command::Lm { action } => match action {
            LmAction::Pretrain => {
                let store = ArtifactStore::new(&out_dir, &config.hash())?;
                for &seed in &config.seeds {
                    ensure_lm_suite(&store, &config, seed, &mut log)?;
                    println!("LM suite ready for seed {seed}");
                }
                Ok(true)
            }
        },
        Command::Train { arch, corpus } => {
            let arch = Architecture::parse(arch)?;
            let store = ArtifactStore::new(&out_dir, &config.hash())?;
            let corpus_cfg = config
                .corpora
                .iter()
                .find(|c| &c.corpus_id == corpus)
                .ok_or_else(|| anyhow::anyhow!("corpus {corpus} not in config"))?;
            for &seed in &config.seeds {
                let manifest = store.ensure_corpus(corpus_cfg, seed)?;
                let lms = ensure_lm_suite(&store, &config, seed, &mut log)?;
                let stats =
                    ensure_checkpoint(&store, &config, arch, &manifest, seed, &lms, &mut log)?;
                println!(
                    "{} on {corpus} seed {seed}: final loss {:.4}",
                    arch.id(),
                    stats.loss_curve.last().copied().unwrap_or(f64::NAN)
                );
            }
            Ok(true)
        }
        Command::Decode {
            arch,
            corpus,
            test_corpus,
        } => {
            let arch = Architecture::parse(arch)?;
            let store = ArtifactStore::new(&out_dir, &config.hash())?;
            let test_corpus = test_corpus.clone().unwrap_or_else(|| corpus.clone());
            let test_cfg = config
                .corpora
                .iter()
                .find(|c| c.corpus_id == test_corpus)
                .ok_or_else(|| anyhow::anyhow!("corpus {test_corpus} not in config"))?;
            for &seed in &config.seeds {
                let manifest = store.ensure_corpus(test_cfg, seed)?;
                let lms = ensure_lm_suite(&store, &config, seed, &mut log)?;
                let records =
                    ensure_records(&store, arch, corpus, &manifest, seed, &lms, &mut log)?;
                let path = store.records_path(arch.id(), corpus, &test_corpus, seed);
                println!("{} records -> {}", records.len(), path.display());
            }
            Ok(true)
        }
        Command::Eval { records, group_by } => {
            let text = std::fs::read_to_string(records)
                .with_context(|| format!("reading {}", records.display()))?;
            let records =
                dysbench::artifacts::parse_records_csv(&text, &records.display().to_string())?;
            let group = GroupBy {
                model: group_by.contains("model"),
                corpus: group_by.contains("corpus"),
                severity: group_by.contains("severity"),
            };
            let report = aggregate(&records, group)?;
            println!("group,n,micro_wer,macro_wer,micro_cer,macro_cer");
            for g in &report.groups {
                let key = [
                    g.key.model_id.as_deref(),
                    g.key.corpus_id.as_deref(),
                    g.key.severity.as_deref(),
                ]
                .iter()
                .flatten()
                .cloned()
                .collect::<Vec<_>>()
                .join("/");
                println!(
                    "{key},{},{:.4},{:.4},{:.4},{:.4}",
                    g.n_utterances, g.micro_wer, g.macro_wer, g.micro_cer, g.macro_cer
                );
            }
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            Ok(true)
        }
        Command::Bench => {
            let result = run_benchmark(&config, &out_dir, &mut log)?;
            let files = emit_reports(&result, &out_dir)?;
            println!(
                "reports written under {}:",
                out_dir.join("reports").display()
            );
            for f in &files {
                println!("  {f}");
            }
            if !result.failed.is_empty() {
                eprintln!("{} cell(s) failed:", result.failed.len());
                for f in &result.failed {
                    eprintln!("  {} on {} seed {}: {}", f.arch, f.corpus, f.seed, f.error);
                }
                return Ok(false);
            }
            Ok(true)
        }
        Command::Severity => {
            let result = run_benchmark(&config, &out_dir, &mut log)?;
            emit_reports(&result, &out_dir)?;
            for (corpus, archs) in severity_curves(&result) {
                println!("{corpus}:");
                for (arch, series) in archs {
                    let pts: Vec<String> =
                        series.iter().map(|(s, v)| format!("{s}={v:.3}")).collect();
                    println!("  {arch:<12} {}", pts.join("  "));
                }
            }
            Ok(result.failed.is_empty())
        }
        Command::Crossdataset => {
            if config.corpora.len() < 2 {
                bail!("cross-dataset analysis needs at least two corpora");
            }
            let result = run_benchmark(&config, &out_dir, &mut log)?;
            emit_reports(&result, &out_dir)?;
            for (arch, matrix) in cross_dataset_matrix(&result) {
                println!("{arch}:");
                for ((train, test), wer) in matrix {
                    let tag = if train == test { "in-domain" } else { "cross" };
                    println!("  train {train} -> test {test}: WER {wer:.3} ({tag})");
                }
            }
            Ok(result.failed.is_empty())
        }
        Command::ErrorReport { n_samples } => {
            let mut config = config;
            config.error_report_samples = *n_samples;
            let result = run_benchmark(&config, &out_dir, &mut log)?;
            emit_reports(&result, &out_dir)?;
            println!("architecture,mean_cer,char_S,char_D,char_I");
            for p in error_profiles(&result) {
                println!(
                    "{},{:.4},{},{},{}",
                    p.architecture,
                    p.mean_cer,
                    p.char_substitutions,
                    p.char_deletions,
                    p.char_insertions
                );
            }
            for row in result.samples.iter().take(*n_samples) {
                println!(
                    "\n[{} seed {} severity {}]",
                    row.corpus, row.seed, row.severity
                );
                println!("  ground_truth: {}", row.reference);
                for (arch, text) in &row.hypotheses {
                    println!("  {arch:<12}: {text}");
                }
            }
            Ok(result.failed.is_empty())
        }
    }
}
