//! End-to-end architecture behavior on a tiny corpus: training improves the
//! loss, decoding produces text, regimes freeze what they promise to
//! freeze, and checkpoints reconstruct the exact model.

use dysbench_core::asr::{train_model, Architecture, AsrModel, AsrTrainConfig, LmRole};
use dysbench_core::bridge::{train_coupled, CouplingRegime};
use dysbench_core::corpus::{build_corpus, generate_text_corpus, Grammar, SeverityLevel, Split};
use dysbench_core::corpus::{synth_uaspeech_config, CorpusManifest};
use dysbench_core::encoder::EncoderConfig;
use dysbench_core::lm::{
    pretrain_neural_lm, NeuralLm, NeuralLmConfig, PretrainConfig, Tokenizer,
};
use dysbench_core::seq2seq::Seq2SeqConfig;

fn tiny_manifest(seed: u64) -> CorpusManifest {
    let mut cfg = synth_uaspeech_config(24);
    cfg.severities = vec![SeverityLevel::Low, SeverityLevel::Moderate];
    cfg.speakers_per_severity = 1;
    cfg.typical_speakers = 0;
    cfg.pinned_test_sentences.clear();
    build_corpus(&cfg, seed).unwrap()
}

fn tiny_train_config() -> AsrTrainConfig {
    AsrTrainConfig {
        epochs: 3,
        epoch_overrides: Default::default(),
        lr: 2e-3,
        warmup_steps: 30,
        batch_size: 8,
        encoder: EncoderConfig {
            input_dim: 16,
            model_dim: 16,
            n_blocks: 1,
            head_count: 4,
            downsample_stride: 2,
        },
        seq2seq: Seq2SeqConfig {
            model_dim: 16,
            n_blocks: 1,
            heads: 4,
            max_decode_len: 50,
            label_smoothing: 0.1,
            length_norm_power: 0.6,
        },
        bridge_stack_factor: 4,
        qformer: dysbench_core::bridge::QFormerConfig {
            n_queries: 6,
            n_blocks: 1,
            query_dim: 16,
            heads: 4,
            output_dim: 24,
        },
        beam_width: 4,
        length_norm_power: 0.6,
        fusion: Default::default(),
        max_decode_len: 50,
    }
}

fn tiny_lm(role: LmRole, seed: u64) -> NeuralLm {
    let text = generate_text_corpus(&Grammar::default_grammar(), 200, 7).unwrap();
    let lm_config = match role {
        LmRole::GptSmall => NeuralLmConfig {
            kind: dysbench_core::lm::LmKind::DecoderOnly,
            model_dim: 24,
            n_blocks: 1,
            heads: 4,
            context_cap: 160,
        },
        LmRole::BartSmall => NeuralLmConfig {
            kind: dysbench_core::lm::LmKind::EncoderDecoder,
            model_dim: 24,
            n_blocks: 1,
            heads: 4,
            context_cap: 160,
        },
        LmRole::VicunaAnalogue => NeuralLmConfig {
            kind: dysbench_core::lm::LmKind::DecoderOnly,
            model_dim: 24,
            n_blocks: 2,
            heads: 4,
            context_cap: 160,
        },
        LmRole::NgramFusion => unreachable!(),
    };
    let pre = PretrainConfig {
        epochs: 2,
        lr: 3e-3,
        warmup_steps: 50,
        batch_size: 16,
        held_out_fraction: 0.1,
        span_mask_coverage: 0.25,
        evals_per_run: 1,
    };
    pretrain_neural_lm(lm_config, &text, &pre, seed).unwrap().0
}

fn lm_for(arch: Architecture, seed: u64) -> Option<NeuralLm> {
    match arch.lm_role() {
        Some(LmRole::NgramFusion) | None => None,
        Some(role) => Some(tiny_lm(role, seed)),
    }
}

#[test]
fn every_architecture_trains_and_decodes() {
    let manifest = tiny_manifest(3);
    let config = tiny_train_config();
    let tokenizer = Tokenizer::new();
    for arch in Architecture::ALL {
        let lm = lm_for(arch, 11);
        let mut model = AsrModel::new(arch, &config, 5, lm.as_ref(), None).unwrap();
        let regime = AsrModel::default_regime(arch);
        let stats = train_model(&mut model, &manifest, &regime, 5).unwrap();
        assert_eq!(stats.loss_curve.len(), 3);
        assert!(
            stats.loss_curve[2] < stats.loss_curve[0],
            "{}: loss did not improve: {:?}",
            arch.id(),
            stats.loss_curve
        );
        // Decode a test utterance; hypothesis tokens decode to text.
        let utt = manifest.utterances_in(Split::Test).next().unwrap();
        let hyps = model.decode(&utt.features, &utt.utterance_id, None).unwrap();
        assert!(!hyps.is_empty(), "{}", arch.id());
        let _text = tokenizer.decode(&hyps[0].tokens);
        // Determinism: decoding twice gives identical results.
        let again = model.decode(&utt.features, &utt.utterance_id, None).unwrap();
        assert_eq!(hyps, again, "{}", arch.id());
    }
}

#[test]
fn qformer_regime_keeps_lm_frozen_and_freezes_encoder_after_warm_start() {
    let manifest = tiny_manifest(5);
    let mut config = tiny_train_config();
    config.epochs = 3;
    let lm = tiny_lm(LmRole::VicunaAnalogue, 13);
    let lm_checksum_standalone = lm.checksum();
    let mut model = AsrModel::new(Architecture::DQformer, &config, 7, Some(&lm), None).unwrap();
    let mut regime = AsrModel::default_regime(Architecture::DQformer);
    regime.encoder_warm_start_epochs = 1;
    let enc_before = model.store.checksum_prefix("enc.");
    let stats = train_model(&mut model, &manifest, &regime, 7).unwrap();
    // Frozen-LM integrity: byte-identical parameters across the run.
    assert_eq!(stats.lm_checksum_before, stats.lm_checksum_after);
    assert_eq!(stats.lm_checksum_before, lm_checksum_standalone);
    // Encoder moved during warm start.
    assert_ne!(model.store.checksum_prefix("enc."), enc_before);
    // After training, a fresh gradient accumulation must leave frozen
    // parameters at exactly zero gradient.
    model.store.zero_grads();
    let utt = manifest.utterances_in(Split::Train).next().unwrap();
    model.train_loss(utt, true).unwrap();
    let nonzero = dysbench_core::asr::nonzero_grad_names(&model.store);
    assert!(
        nonzero.iter().all(|n| !n.starts_with("lm.") && !n.starts_with("enc.")),
        "frozen params accumulated gradient: {:?}",
        nonzero
            .iter()
            .filter(|n| n.starts_with("lm.") || n.starts_with("enc."))
            .collect::<Vec<_>>()
    );
    // Something did train.
    assert!(nonzero.iter().any(|n| n.starts_with("qf.")));
}

#[test]
fn regime_violation_fails_before_any_step() {
    let manifest = tiny_manifest(7);
    let config = tiny_train_config();
    let lm = tiny_lm(LmRole::VicunaAnalogue, 17);
    let mut regime = AsrModel::default_regime(Architecture::DQformer);
    regime.train_lm = true; // violates the frozen-LM kind
    let dir = tempfile::tempdir().unwrap();
    let err = train_coupled(
        Architecture::DQformer,
        &manifest,
        &regime,
        &config,
        &lm,
        9,
        &dir.path().join("d.dysc"),
        "hash",
    )
    .unwrap_err();
    assert!(err.to_string().contains("must not train the LM"), "{err}");
}

#[test]
fn zero_epoch_coupled_training_equals_initialization_composition() {
    let manifest = tiny_manifest(9);
    let mut config = tiny_train_config();
    config.epochs = 0;
    let lm = tiny_lm(LmRole::BartSmall, 19);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c_bart.dysc");
    train_coupled(
        Architecture::CBart,
        &manifest,
        &AsrModel::default_regime(Architecture::CBart),
        &config,
        &lm,
        21,
        &path,
        "hash",
    )
    .unwrap();
    let loaded = AsrModel::load(&path, Some(&lm)).unwrap();
    let fresh = AsrModel::new(Architecture::CBart, &config, 21, Some(&lm), None).unwrap();
    // Checkpoints round through f32; compare at f32 precision.
    for name in fresh.store.names() {
        let a = fresh.store.get(name);
        let b = loaded.store.get(name);
        assert_eq!(a.shape(), b.shape(), "{name}");
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert_eq!(*x as f32, *y as f32, "{name}");
        }
    }
}

#[test]
fn checkpoint_reload_reproduces_decodes_exactly() {
    let manifest = tiny_manifest(11);
    let config = tiny_train_config();
    let lm = tiny_lm(LmRole::GptSmall, 23);
    let mut model = AsrModel::new(Architecture::CGpt, &config, 25, Some(&lm), None).unwrap();
    train_model(
        &mut model,
        &manifest,
        &AsrModel::default_regime(Architecture::CGpt),
        25,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c_gpt.dysc");
    model.save(&path, "hash").unwrap();
    let loaded = AsrModel::load(&path, Some(&lm)).unwrap();
    let utt = manifest.utterances_in(Split::Test).next().unwrap();
    // The reloaded model decodes identically to a twice-reloaded one (the
    // canonical f32 parameters are what both use).
    let a = loaded.decode(&utt.features, &utt.utterance_id, None).unwrap();
    let again = AsrModel::load(&path, Some(&lm)).unwrap();
    let b = again.decode(&utt.features, &utt.utterance_id, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn encoder_init_warm_starts_from_another_store() {
    let config = tiny_train_config();
    let donor = AsrModel::new(Architecture::BSeq2seq, &config, 31, None, None).unwrap();
    let model = AsrModel::new(
        Architecture::DQformer,
        &config,
        33,
        Some(&tiny_lm(LmRole::VicunaAnalogue, 29)),
        Some(&donor.store),
    )
    .unwrap();
    assert_eq!(
        model.store.checksum_prefix("enc."),
        donor.store.checksum_prefix("enc.")
    );
}
