//! Job execution: LM suites, per-architecture training, and decoding runs,
//! all cached through the artifact store.

use std::collections::BTreeMap;

use dysbench_core::asr::{train_model, Architecture, AsrModel, LmRole, TrainStats};
use dysbench_core::corpus::{CorpusManifest, Split};
use dysbench_core::ctc::LmScorer;
use dysbench_core::error::{Error, Result};
use dysbench_core::lm::{
    pretrain_neural_lm, NGramLm, NeuralLm, NeuralLmConfig, Tokenizer,
};
use dysbench_core::metrics::MetricRecord;
use dysbench_core::rng::derive_seed;

use crate::artifacts::{atomic_write, ArtifactStore};
use crate::config::ExperimentConfig;

/// The pretrained language models one seed shares across corpora and
/// architectures.
pub struct LmSuite {
    pub gpt: NeuralLm,
    pub bart: NeuralLm,
    pub vicuna: NeuralLm,
    pub ngram: NGramLm,
}

impl LmSuite {
    pub fn for_architecture(&self, arch: Architecture) -> Option<&NeuralLm> {
        match arch.lm_role() {
            Some(LmRole::GptSmall) => Some(&self.gpt),
            Some(LmRole::BartSmall) => Some(&self.bart),
            Some(LmRole::VicunaAnalogue) => Some(&self.vicuna),
            _ => None,
        }
    }
}

/// Pretrain (or reload) the LM suite for one seed. The text corpus is
/// shared across corpora; the acoustic identity never touches it.
pub fn ensure_lm_suite(
    store: &ArtifactStore,
    config: &ExperimentConfig,
    seed: u64,
    log: &mut dyn FnMut(&str),
) -> Result<LmSuite> {
    let text = dysbench_core::corpus::generate_text_corpus(
        &config
            .corpora
            .first()
            .and_then(|c| c.grammar.clone())
            .unwrap_or_else(dysbench_core::corpus::Grammar::default_grammar),
        config.lm.text_sentences,
        derive_seed(&[seed, 0x7e27]),
    )?;

    let mut load_or_train = |role: &str,
                             lm_config: NeuralLmConfig,
                             epochs: usize|
     -> Result<NeuralLm> {
        let path = store.lm_path(role, seed);
        if path.exists() {
            return NeuralLm::load(&path);
        }
        log(&format!("pretraining {role} LM (seed {seed}, {epochs} epochs)"));
        let pre = config.lm.pretrain_config(epochs);
        let (lm, stats) = pretrain_neural_lm(lm_config, &text, &pre, seed)?;
        log(&format!(
            "  {role}: held-out ce {:.3} -> {:.3}",
            stats.initial_held_out_ce, stats.final_held_out_ce
        ));
        lm.save(&path, &store.config_hash)?;
        // Reload so in-memory parameters equal the canonical f32 copy.
        NeuralLm::load(&path)
    };

    let gpt = load_or_train("gpt", NeuralLmConfig::gpt_small(), config.lm.gpt_epochs)?;
    let bart = load_or_train("bart", NeuralLmConfig::bart_small(), config.lm.bart_epochs)?;
    let mut vicuna = load_or_train(
        "vicuna",
        NeuralLmConfig::vicuna_analogue(),
        config.lm.vicuna_epochs,
    )?;
    vicuna.frozen = true;

    let ngram_path = store.ngram_path(seed);
    let ngram = if ngram_path.exists() {
        NGramLm::load(&ngram_path)?
    } else {
        let lm = NGramLm::train(&text, config.lm.ngram_order)?;
        lm.save(&ngram_path)?;
        NGramLm::load(&ngram_path)?
    };

    Ok(LmSuite {
        gpt,
        bart,
        vicuna,
        ngram,
    })
}

/// Train one (architecture, corpus, seed) cell, reusing the checkpoint when
/// present. D_qformer warm-starts its encoder from B_seq2seq's checkpoint
/// for the same (corpus, seed) when one exists.
pub fn ensure_checkpoint(
    store: &ArtifactStore,
    config: &ExperimentConfig,
    arch: Architecture,
    manifest: &CorpusManifest,
    seed: u64,
    lms: &LmSuite,
    log: &mut dyn FnMut(&str),
) -> Result<TrainStats> {
    let ckpt = store.checkpoint_path(arch.id(), &manifest.corpus_id, seed);
    let loss_path = store.loss_curve_path(arch.id(), &manifest.corpus_id, seed);
    if ckpt.exists() && loss_path.exists() {
        let stats: TrainStats =
            serde_json::from_str(&std::fs::read_to_string(&loss_path)?)
                .map_err(|e| Error::Format(format!("bad loss curve artifact: {e}")))?;
        return Ok(stats);
    }
    let train_seed = derive_seed(&[seed, 0x7121, arch as u64]);
    let encoder_donor = if arch == Architecture::DQformer {
        let b_ckpt = store.checkpoint_path(
            Architecture::BSeq2seq.id(),
            &manifest.corpus_id,
            seed,
        );
        if b_ckpt.exists() {
            Some(AsrModel::load(&b_ckpt, None)?.store)
        } else {
            None
        }
    } else {
        None
    };
    log(&format!(
        "training {} on {} (seed {seed}, {} epochs)",
        arch.id(),
        manifest.corpus_id,
        config.train.epochs_for(arch)
    ));
    let mut model = AsrModel::new(
        arch,
        &config.train,
        train_seed,
        lms.for_architecture(arch),
        encoder_donor.as_ref(),
    )?;
    let regime = AsrModel::default_regime(arch);
    let stats = train_model(&mut model, manifest, &regime, train_seed)?;
    model.save(&ckpt, &store.config_hash)?;
    atomic_write(
        &loss_path,
        serde_json::to_string_pretty(&stats).unwrap().as_bytes(),
    )?;
    log(&format!(
        "  {}: loss {:.3} -> {:.3}{}",
        arch.id(),
        stats.loss_curve.first().copied().unwrap_or(f64::NAN),
        stats.loss_curve.last().copied().unwrap_or(f64::NAN),
        if stats.skipped_utterances > 0 {
            format!(" ({} utterances skipped)", stats.skipped_utterances)
        } else {
            String::new()
        }
    ));
    Ok(stats)
}

/// Decode a checkpoint against a (possibly different) corpus's test split
/// and write per-utterance records.
pub fn ensure_records(
    store: &ArtifactStore,
    arch: Architecture,
    train_corpus: &str,
    test_manifest: &CorpusManifest,
    seed: u64,
    lms: &LmSuite,
    log: &mut dyn FnMut(&str),
) -> Result<Vec<MetricRecord>> {
    let path = store.records_path(arch.id(), train_corpus, &test_manifest.corpus_id, seed);
    if path.exists() {
        return store.read_records(&path);
    }
    let ckpt = store.checkpoint_path(arch.id(), train_corpus, seed);
    let model = AsrModel::load(&ckpt, lms.for_architecture(arch))?;
    let tokenizer = Tokenizer::new();
    let fusion: Option<&dyn LmScorer> = if arch == Architecture::ACtcFused {
        Some(&lms.ngram)
    } else {
        None
    };
    log(&format!(
        "decoding {} ({train_corpus}) on {} test (seed {seed})",
        arch.id(),
        test_manifest.corpus_id
    ));
    let mut records = Vec::new();
    // The model id carries the training corpus so cross-corpus rows stay
    // distinguishable in pooled record files.
    let model_id = arch.id().to_string();
    for utt in test_manifest.utterances_in(Split::Test) {
        let hyps = model.decode(&utt.features, &utt.utterance_id, fusion)?;
        let hyp_text = hyps
            .first()
            .map(|h| tokenizer.decode(&h.tokens))
            .unwrap_or_default();
        records.push(MetricRecord::from_texts(
            &utt.utterance_id,
            &model_id,
            &test_manifest.corpus_id,
            utt.severity,
            &utt.transcript,
            &hyp_text,
        ));
    }
    store.write_records(&path, &records)?;
    Ok(records)
}

/// Ordered architectures for one (corpus, seed) job: B before D so the
/// Q-Former's encoder warm start can reuse B's checkpoint.
pub fn training_order(architectures: &[Architecture]) -> Vec<Architecture> {
    let mut order: Vec<Architecture> = architectures.to_vec();
    order.sort();
    order.dedup();
    order.sort_by_key(|a| match a {
        Architecture::BSeq2seq => 0,
        Architecture::ACtc => 1,
        Architecture::ACtcFused => 2,
        Architecture::CGpt => 3,
        Architecture::CBart => 4,
        Architecture::DQformer => 5,
    });
    order
}

/// Per-(corpus, seed) job result: aggregates keyed for the benchmark table.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub arch: Architecture,
    pub train_corpus: String,
    pub test_corpus: String,
    pub seed: u64,
    pub records: Vec<MetricRecord>,
    pub train_stats: Option<TrainStats>,
}

pub type CellKey = (String, String, String, u64); // arch, train corpus, test corpus, seed

pub fn cell_key(c: &CellOutcome) -> CellKey {
    (
        c.arch.id().to_string(),
        c.train_corpus.clone(),
        c.test_corpus.clone(),
        c.seed,
    )
}

/// Failures recorded instead of aborting the whole run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FailedCell {
    pub arch: String,
    pub corpus: String,
    pub seed: u64,
    pub error: String,
}

pub type OutcomeMap = BTreeMap<CellKey, CellOutcome>;
