//! Scratch probe for architecture WER trends (run with --ignored).

use dysbench_core::asr::{train_model, Architecture, AsrModel, AsrTrainConfig};
use dysbench_core::corpus::{
    build_corpus, generate_text_corpus, synth_torgo_config, Grammar, Split,
};
use dysbench_core::ctc::LmScorer;
use dysbench_core::lm::{
    pretrain_neural_lm, NGramLm, NeuralLm, NeuralLmConfig, PretrainConfig, Tokenizer,
};
use dysbench_core::metrics::{aggregate, GroupBy, MetricRecord};

fn envu(name: &str, default: usize) -> usize {
    std::env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

#[test]
#[ignore]
fn probe_architecture_trends() {
    let seed = envu("PROBE_SEED", 1) as u64;
    let utts_per_speaker = envu("PROBE_UPS", 60);
    let asr_epochs = envu("PROBE_EPOCHS", 12);
    let t_all = std::time::Instant::now();

    // Corpus.
    let mut corpus_cfg = synth_torgo_config(utts_per_speaker);
    corpus_cfg.typical_speakers = 1;
    let manifest = build_corpus(&corpus_cfg, seed).unwrap();
    let n_train = manifest.utterances_in(Split::Train).count();
    let n_test = manifest.utterances_in(Split::Test).count();
    eprintln!("corpus: {n_train} train / {n_test} test");

    // Text corpus + LMs.
    let text = generate_text_corpus(&Grammar::default_grammar(), 4000, seed ^ 0x7e27).unwrap();
    let pre = |epochs: usize| PretrainConfig {
        epochs,
        lr: 3e-3,
        warmup_steps: 200,
        batch_size: 16,
        held_out_fraction: 0.05,
        span_mask_coverage: 0.25,
        evals_per_run: 1,
    };
    let cache_dir = std::path::PathBuf::from("/tmp/probe_lms");
    std::fs::create_dir_all(&cache_dir).unwrap();
    let mut cached_lm = |role: &str, cfg: NeuralLmConfig, epochs: usize| -> NeuralLm {
        let path = cache_dir.join(format!("{role}-s{seed}-e{epochs}.dysc"));
        if path.exists() {
            return NeuralLm::load(&path).unwrap();
        }
        let t0 = std::time::Instant::now();
        let (lm, stats) = pretrain_neural_lm(cfg, &text, &pre(epochs), seed).unwrap();
        eprintln!(
            "{role}: ce {:.2} -> {:.2} ({:.0}s)",
            stats.initial_held_out_ce,
            stats.final_held_out_ce,
            t0.elapsed().as_secs_f64()
        );
        lm.save(&path, "probe").unwrap();
        NeuralLm::load(&path).unwrap()
    };
    let gpt = cached_lm("gpt", NeuralLmConfig::gpt_small(), 8);
    let bart = cached_lm("bart", NeuralLmConfig::bart_small(), 16);
    let vicuna = cached_lm("vicuna", NeuralLmConfig::vicuna_analogue(), 12);
    let ngram = NGramLm::train(&text, 4).unwrap();

    // Architectures.
    let a_epochs = envu("PROBE_A_EPOCHS", 12);
    let d_epochs = envu("PROBE_D_EPOCHS", asr_epochs);
    let cbart_epochs = envu("PROBE_CBART_EPOCHS", asr_epochs);
    let tokenizer = Tokenizer::new();
    let mut b_encoder: Option<dysbench_core::nn::ParamStore> = None;
    for arch in [
        Architecture::ACtc,
        Architecture::ACtcFused,
        Architecture::BSeq2seq,
        Architecture::CGpt,
        Architecture::CBart,
        Architecture::DQformer,
    ] {
        let lm: Option<&NeuralLm> = match arch {
            Architecture::CGpt => Some(&gpt),
            Architecture::CBart => Some(&bart),
            Architecture::DQformer => Some(&vicuna),
            _ => None,
        };
        let t0 = std::time::Instant::now();
        let enc_init = if arch == Architecture::DQformer {
            b_encoder.as_ref()
        } else {
            None
        };
        let mut config = AsrTrainConfig::default();
        config.epochs = match arch {
            Architecture::ACtc | Architecture::ACtcFused => a_epochs,
            Architecture::DQformer => d_epochs,
            Architecture::CBart => cbart_epochs,
            _ => asr_epochs,
        };
        let mut model = AsrModel::new(arch, &config, seed, lm, enc_init).unwrap();
        let regime = AsrModel::default_regime(arch);
        let stats = train_model(&mut model, &manifest, &regime, seed).unwrap();
        let train_time = t0.elapsed().as_secs_f64();
        if arch == Architecture::BSeq2seq {
            b_encoder = Some(model.store.clone());
        }
        let t0 = std::time::Instant::now();
        let fusion: Option<&dyn LmScorer> = if arch == Architecture::ACtcFused {
            Some(&ngram)
        } else {
            None
        };
        let mut records = Vec::new();
        for utt in manifest.utterances_in(Split::Test) {
            let hyps = model.decode(&utt.features, &utt.utterance_id, fusion).unwrap();
            let hyp_text = tokenizer.decode(&hyps[0].tokens);
            records.push(MetricRecord::from_texts(
                &utt.utterance_id,
                arch.id(),
                &manifest.corpus_id,
                utt.severity,
                &utt.transcript,
                &hyp_text,
            ));
        }
        let report = aggregate(
            &records,
            GroupBy {
                model: true,
                corpus: false,
                severity: false,
            },
        )
        .unwrap();
        let g = &report.groups[0];
        // Per-severity micro WER.
        let by_sev = aggregate(
            &records,
            GroupBy {
                model: true,
                corpus: false,
                severity: true,
            },
        )
        .unwrap();
        let sev_str: Vec<String> = by_sev
            .groups
            .iter()
            .map(|g| {
                format!(
                    "{}={:.3}",
                    g.key.severity.as_deref().unwrap_or("?"),
                    g.micro_wer
                )
            })
            .collect();
        eprintln!(
            "{:<12} loss {:.3}->{:.3} | WER {:.3} CER {:.3} | {} | train {:.0}s decode {:.0}s",
            arch.id(),
            stats.loss_curve.first().unwrap(),
            stats.loss_curve.last().unwrap(),
            g.micro_wer,
            g.micro_cer,
            sev_str.join(" "),
            train_time,
            t0.elapsed().as_secs_f64()
        );
    }
    eprintln!("total {:.0}s", t_all.elapsed().as_secs_f64());
}
