//! The four experiments: benchmark table, severity curves, cross-dataset
//! matrix, and the error-profile report.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use dysbench_core::asr::{Architecture, AsrModel};
use dysbench_core::corpus::{CorpusManifest, Split};
use dysbench_core::error::{Error, Result};
use dysbench_core::lm::Tokenizer;
use dysbench_core::metrics::{aggregate, GroupBy};

use crate::artifacts::{atomic_write, ArtifactStore};
use crate::config::ExperimentConfig;
use crate::runner::{ensure_checkpoint, ensure_lm_suite, ensure_records, training_order, FailedCell};

/// One benchmark cell: micro/macro rates for (architecture, train corpus,
/// test corpus, seed).
#[derive(Debug, Clone, Serialize)]
pub struct BenchCell {
    pub architecture: String,
    pub train_corpus: String,
    pub test_corpus: String,
    pub seed: u64,
    pub n_utterances: usize,
    pub micro_wer: f64,
    pub macro_wer: f64,
    pub micro_cer: f64,
    pub macro_cer: f64,
}

/// Per-(architecture, corpus, severity, seed) stratum.
#[derive(Debug, Clone, Serialize)]
pub struct SeverityCell {
    pub architecture: String,
    pub corpus: String,
    pub severity: String,
    pub seed: u64,
    pub n_utterances: usize,
    pub micro_wer: f64,
    pub micro_cer: f64,
    pub char_substitutions: usize,
    pub char_deletions: usize,
    pub char_insertions: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub tool_version: String,
    /// Manifest content hashes per (corpus, seed): the identical-partition
    /// guarantee all architectures trained against.
    pub corpus_hashes: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchmarkResult {
    pub provenance: Provenance,
    pub cells: Vec<BenchCell>,
    pub severity_cells: Vec<SeverityCell>,
    pub failed: Vec<FailedCell>,
    /// Transcription samples for the error report: (corpus, seed, severity,
    /// utterance, reference) -> per-architecture hypothesis.
    pub samples: Vec<SampleRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleRow {
    pub corpus: String,
    pub seed: u64,
    pub severity: String,
    pub utterance_id: String,
    pub reference: String,
    pub hypotheses: BTreeMap<String, String>,
}

impl BenchmarkResult {
    pub fn cell(
        &self,
        arch: &str,
        train_corpus: &str,
        test_corpus: &str,
        seed: u64,
    ) -> Option<&BenchCell> {
        self.cells.iter().find(|c| {
            c.architecture == arch
                && c.train_corpus == train_corpus
                && c.test_corpus == test_corpus
                && c.seed == seed
        })
    }

    /// Mean in-domain micro WER across seeds.
    pub fn mean_in_domain_wer(&self, arch: &str, corpus: &str) -> Option<f64> {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| {
                c.architecture == arch && c.train_corpus == corpus && c.test_corpus == corpus
            })
            .map(|c| c.micro_wer)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Train and evaluate every (architecture, corpus, seed) cell, including
/// cross-corpus decoding when more than one corpus is configured.
///
/// A failed cell (training divergence) is recorded and the run continues;
/// callers decide the exit status from `failed`.
pub fn run_benchmark(
    config: &ExperimentConfig,
    out_dir: &Path,
    log: &mut dyn FnMut(&str),
) -> Result<BenchmarkResult> {
    config.validate()?;
    let store = ArtifactStore::new(out_dir, &config.hash())?;
    let mut corpus_hashes = BTreeMap::new();
    let mut cells = Vec::new();
    let mut severity_cells = Vec::new();
    let mut failed = Vec::new();
    let mut samples = Vec::new();

    for &seed in &config.seeds {
        let lms = ensure_lm_suite(&store, config, seed, log)?;
        // Build all corpora for this seed first (identical partitions for
        // every architecture).
        let mut manifests: Vec<CorpusManifest> = Vec::new();
        for corpus_cfg in &config.corpora {
            let manifest = store.ensure_corpus(corpus_cfg, seed)?;
            let hash = store.corpus_hash(&corpus_cfg.corpus_id, seed)?;
            corpus_hashes.insert(
                format!("{}-s{seed}", corpus_cfg.corpus_id),
                format!("{hash:016x}"),
            );
            manifests.push(manifest);
        }
        for train_manifest in &manifests {
            for arch in training_order(&config.architectures) {
                match ensure_checkpoint(&store, config, arch, train_manifest, seed, &lms, log) {
                    Ok(_) => {}
                    Err(e) => {
                        log(&format!(
                            "FAILED: {} on {} seed {seed}: {e}",
                            arch.id(),
                            train_manifest.corpus_id
                        ));
                        failed.push(FailedCell {
                            arch: arch.id().to_string(),
                            corpus: train_manifest.corpus_id.clone(),
                            seed,
                            error: e.to_string(),
                        });
                        continue;
                    }
                }
                // Decode in-domain and cross-domain test splits.
                for test_manifest in &manifests {
                    let records = ensure_records(
                        &store,
                        arch,
                        &train_manifest.corpus_id,
                        test_manifest,
                        seed,
                        &lms,
                        log,
                    )?;
                    let overall = aggregate(
                        &records,
                        GroupBy {
                            model: true,
                            corpus: false,
                            severity: false,
                        },
                    )?;
                    let g = &overall.groups[0];
                    cells.push(BenchCell {
                        architecture: arch.id().to_string(),
                        train_corpus: train_manifest.corpus_id.clone(),
                        test_corpus: test_manifest.corpus_id.clone(),
                        seed,
                        n_utterances: g.n_utterances,
                        micro_wer: g.micro_wer,
                        macro_wer: g.macro_wer,
                        micro_cer: g.micro_cer,
                        macro_cer: g.macro_cer,
                    });
                    if train_manifest.corpus_id == test_manifest.corpus_id {
                        let by_sev = aggregate(
                            &records,
                            GroupBy {
                                model: true,
                                corpus: false,
                                severity: true,
                            },
                        )?;
                        for g in &by_sev.groups {
                            severity_cells.push(SeverityCell {
                                architecture: arch.id().to_string(),
                                corpus: train_manifest.corpus_id.clone(),
                                severity: g.key.severity.clone().unwrap_or_default(),
                                seed,
                                n_utterances: g.n_utterances,
                                micro_wer: g.micro_wer,
                                micro_cer: g.micro_cer,
                                char_substitutions: g.char_substitutions,
                                char_deletions: g.char_deletions,
                                char_insertions: g.char_insertions,
                            });
                        }
                    }
                }
            }
            // Side-by-side samples from the in-domain test split.
            samples.extend(collect_samples(
                &store,
                config,
                train_manifest,
                seed,
                &lms,
            )?);
        }
    }

    Ok(BenchmarkResult {
        provenance: Provenance {
            config_hash: config.hash(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            corpus_hashes,
        },
        cells,
        severity_cells,
        failed,
        samples,
    })
}

/// Pick sample utterances (the pinned grammar sentence per severity first)
/// and gather each architecture's top hypothesis.
fn collect_samples(
    store: &ArtifactStore,
    config: &ExperimentConfig,
    manifest: &CorpusManifest,
    seed: u64,
    lms: &crate::runner::LmSuite,
    ) -> Result<Vec<SampleRow>> {
    let tokenizer = Tokenizer::new();
    let mut chosen: Vec<&dysbench_core::corpus::Utterance> = Vec::new();
    for utt in manifest.utterances_in(Split::Test) {
        if utt.utterance_id.contains("_pin") && utt.severity.is_dysarthric() {
            chosen.push(utt);
        }
    }
    for utt in manifest.utterances_in(Split::Test) {
        if chosen.len() >= config.error_report_samples.max(1) {
            break;
        }
        if !chosen.iter().any(|c| c.utterance_id == utt.utterance_id)
            && utt.severity.is_dysarthric()
        {
            chosen.push(utt);
        }
    }
    let mut rows = Vec::new();
    for utt in chosen {
        let mut hypotheses = BTreeMap::new();
        for &arch in &config.architectures {
            let ckpt = store.checkpoint_path(arch.id(), &manifest.corpus_id, seed);
            if !ckpt.exists() {
                continue;
            }
            let model = AsrModel::load(&ckpt, lms.for_architecture(arch))?;
            let fusion: Option<&dyn dysbench_core::ctc::LmScorer> =
                if arch == Architecture::ACtcFused {
                    Some(&lms.ngram)
                } else {
                    None
                };
            let hyps = model.decode(&utt.features, &utt.utterance_id, fusion)?;
            let text = hyps
                .first()
                .map(|h| tokenizer.decode(&h.tokens))
                .unwrap_or_default();
            hypotheses.insert(arch.id().to_string(), text);
        }
        rows.push(SampleRow {
            corpus: manifest.corpus_id.clone(),
            seed,
            severity: utt.severity.label().to_string(),
            utterance_id: utt.utterance_id.clone(),
            reference: utt.transcript.clone(),
            hypotheses,
        });
    }
    Ok(rows)
}

/// Severity stratification (Figs. 2-3 analogue) pulled from a benchmark
/// result: per-architecture WER at each severity level, one series per
/// corpus.
pub fn severity_curves(
    result: &BenchmarkResult,
) -> BTreeMap<String, BTreeMap<String, Vec<(String, f64)>>> {
    // corpus -> architecture -> [(severity, mean micro WER across seeds)]
    let mut out: BTreeMap<String, BTreeMap<String, Vec<(String, f64)>>> = BTreeMap::new();
    let order = ["VL", "L", "M", "H"];
    let mut by_key: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for c in &result.severity_cells {
        if c.severity == "TYPICAL" {
            continue;
        }
        by_key
            .entry((c.corpus.clone(), c.architecture.clone(), c.severity.clone()))
            .or_default()
            .push(c.micro_wer);
    }
    for ((corpus, arch, severity), vals) in by_key {
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        out.entry(corpus)
            .or_default()
            .entry(arch)
            .or_default()
            .push((severity, mean));
    }
    for archs in out.values_mut() {
        for series in archs.values_mut() {
            series.sort_by_key(|(s, _)| order.iter().position(|o| o == s).unwrap_or(9));
        }
    }
    out
}

/// Cross-dataset generalization (Table 3 analogue): per architecture, the
/// train-corpus x test-corpus micro-WER matrix averaged over seeds.
pub fn cross_dataset_matrix(
    result: &BenchmarkResult,
) -> BTreeMap<String, BTreeMap<(String, String), f64>> {
    let mut sums: BTreeMap<(String, String, String), (f64, usize)> = BTreeMap::new();
    for c in &result.cells {
        let e = sums
            .entry((
                c.architecture.clone(),
                c.train_corpus.clone(),
                c.test_corpus.clone(),
            ))
            .or_insert((0.0, 0));
        e.0 += c.micro_wer;
        e.1 += 1;
    }
    let mut out: BTreeMap<String, BTreeMap<(String, String), f64>> = BTreeMap::new();
    for ((arch, train, test), (sum, n)) in sums {
        out.entry(arch)
            .or_default()
            .insert((train, test), sum / n as f64);
    }
    out
}

/// Character-level error profile (Table 2 analogue): per architecture, mean
/// CER and the S/D/I breakdown, plus per-severity deletion dominance data.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorProfile {
    pub architecture: String,
    pub mean_cer: f64,
    pub char_substitutions: usize,
    pub char_deletions: usize,
    pub char_insertions: usize,
    /// severity -> (deletions, insertions) at character level.
    pub by_severity: BTreeMap<String, (usize, usize)>,
}

pub fn error_profiles(result: &BenchmarkResult) -> Vec<ErrorProfile> {
    let mut by_arch: BTreeMap<String, ErrorProfile> = BTreeMap::new();
    let mut cer_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for c in &result.severity_cells {
        let p = by_arch
            .entry(c.architecture.clone())
            .or_insert_with(|| ErrorProfile {
                architecture: c.architecture.clone(),
                mean_cer: 0.0,
                char_substitutions: 0,
                char_deletions: 0,
                char_insertions: 0,
                by_severity: BTreeMap::new(),
            });
        p.char_substitutions += c.char_substitutions;
        p.char_deletions += c.char_deletions;
        p.char_insertions += c.char_insertions;
        let sev = p.by_severity.entry(c.severity.clone()).or_insert((0, 0));
        sev.0 += c.char_deletions;
        sev.1 += c.char_insertions;
    }
    for c in &result.cells {
        if c.train_corpus == c.test_corpus {
            let e = cer_sums.entry(c.architecture.clone()).or_insert((0.0, 0));
            e.0 += c.micro_cer;
            e.1 += 1;
        }
    }
    let mut out: Vec<ErrorProfile> = by_arch.into_values().collect();
    for p in &mut out {
        if let Some((sum, n)) = cer_sums.get(&p.architecture) {
            p.mean_cer = sum / *n as f64;
        }
    }
    out
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    atomic_write(
        path,
        serde_json::to_string_pretty(value)
            .map_err(|e| Error::Format(e.to_string()))?
            .as_bytes(),
    )
}
