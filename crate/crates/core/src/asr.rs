//! The four decoding architectures assembled over the shared encoder, with
//! their training loops, decoding paths, and checkpoint formats.
//!
//! A_ctc / A_ctc_fused: CTC head, greedy or LM-fused prefix beam decoding.
//! B_seq2seq: attention decoder, teacher forcing, length-normalized beam.
//! C_gpt / C_bart: Bridge Network into a pretrained small LM (audio-prefix
//! or cross-attention coupling), trained end to end.
//! D_qformer: Q-Former into a larger frozen LM; encoder warm-started then
//! frozen, only the Q-Former and its projection keep training.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bridge::{
    cross_attend_lm_loss, prefix_lm_loss, BridgeNetwork, CouplingKind, CouplingRegime, QFormer,
    QFormerConfig,
};
use crate::corpus::{CorpusManifest, Split, Utterance};
use crate::ctc::{
    ctc_loss, greedy_decode, prefix_beam_decode, CtcPosteriors, CtcVocab, DecodeConfig, LmScorer,
};
use crate::encoder::{AcousticEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::lm::{lm_arch, LmArch, NeuralLm, Tokenizer, TokenId, BLANK, BOS, PAD, EOS};
use crate::nn::{load_checkpoint, save_checkpoint, Layer, LayerInput, LayerSpec, ParamStore};
use crate::rng::{derive_seed, Rng};
use crate::search::{ar_beam_search, BeamConfig, BeamScorer, DecodeHypothesis};
use crate::seq2seq::{CrossStackScorer, Seq2SeqConfig, Seq2SeqHead};
use crate::stacks::{CausalStack, CausalState, CrossStack};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    ACtc,
    ACtcFused,
    BSeq2seq,
    CGpt,
    CBart,
    DQformer,
}

impl Architecture {
    pub const ALL: [Architecture; 6] = [
        Architecture::ACtc,
        Architecture::ACtcFused,
        Architecture::BSeq2seq,
        Architecture::CGpt,
        Architecture::CBart,
        Architecture::DQformer,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Architecture::ACtc => "A_ctc",
            Architecture::ACtcFused => "A_ctc_fused",
            Architecture::BSeq2seq => "B_seq2seq",
            Architecture::CGpt => "C_gpt",
            Architecture::CBart => "C_bart",
            Architecture::DQformer => "D_qformer",
        }
    }

    pub fn parse(s: &str) -> Result<Architecture> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown architecture {s}")))
    }

    /// Table sections: baselines vs LLM-enhanced decoders.
    pub fn is_baseline(self) -> bool {
        matches!(
            self,
            Architecture::ACtc | Architecture::ACtcFused | Architecture::BSeq2seq
        )
    }

    /// Which pretrained LM this architecture couples to, if any.
    pub fn lm_role(self) -> Option<LmRole> {
        match self {
            Architecture::CGpt => Some(LmRole::GptSmall),
            Architecture::CBart => Some(LmRole::BartSmall),
            Architecture::DQformer => Some(LmRole::VicunaAnalogue),
            Architecture::ACtcFused => Some(LmRole::NgramFusion),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmRole {
    GptSmall,
    BartSmall,
    VicunaAnalogue,
    NgramFusion,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AsrTrainConfig {
    pub epochs: usize,
    /// Per-architecture epoch overrides (keyed by architecture id); the
    /// training budget is tuned per model.
    #[serde(default)]
    pub epoch_overrides: std::collections::BTreeMap<String, usize>,
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub encoder: EncoderConfig,
    pub seq2seq: Seq2SeqConfig,
    /// Frame stacking before the bridge (C architectures).
    pub bridge_stack_factor: usize,
    pub qformer: QFormerConfig,
    pub beam_width: usize,
    pub length_norm_power: f64,
    /// Shallow-fusion knobs for A_ctc_fused.
    pub fusion: FusionKnobs,
    pub max_decode_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionKnobs {
    pub lm_weight: f64,
    pub length_bonus: f64,
    pub beam_width: usize,
    pub ngram_order: usize,
}

impl Default for FusionKnobs {
    fn default() -> Self {
        FusionKnobs {
            lm_weight: 0.5,
            length_bonus: 0.3,
            beam_width: 8,
            ngram_order: 4,
        }
    }
}

impl AsrTrainConfig {
    pub fn epochs_for(&self, arch: Architecture) -> usize {
        self.epoch_overrides
            .get(arch.id())
            .copied()
            .unwrap_or(self.epochs)
    }
}

impl Default for AsrTrainConfig {
    fn default() -> Self {
        AsrTrainConfig {
            epochs: 12,
            epoch_overrides: std::collections::BTreeMap::new(),
            lr: 2e-3,
            warmup_steps: 200,
            batch_size: 16,
            encoder: EncoderConfig::default(),
            seq2seq: Seq2SeqConfig::default(),
            bridge_stack_factor: 4,
            qformer: QFormerConfig::default(),
            beam_width: 8,
            length_norm_power: 0.6,
            fusion: FusionKnobs::default(),
            max_decode_len: 60,
        }
    }
}

#[derive(Debug, Clone)]
enum Head {
    Ctc {
        out: Layer,
        vocab: CtcVocab,
    },
    Seq2Seq(Seq2SeqHead),
    PrefixLm {
        bridge: BridgeNetwork,
        lm: CausalStack,
        context_cap: usize,
    },
    CrossLm {
        bridge: BridgeNetwork,
        lm_decoder: CrossStack,
    },
    Qformer {
        qformer: QFormer,
        lm: CausalStack,
        context_cap: usize,
    },
}

/// One trained (or trainable) system: encoder + head + parameters.
#[derive(Debug, Clone)]
pub struct AsrModel {
    pub architecture: Architecture,
    pub config: AsrTrainConfig,
    pub store: ParamStore,
    encoder: AcousticEncoder,
    head: Head,
}

const ENC_PREFIX: &str = "enc";

impl AsrModel {
    /// Assemble and initialize a model. Coupled architectures require their
    /// pretrained LM; `encoder_init` warm-starts the encoder from another
    /// model's parameters (D_qformer reuses B_seq2seq's trained encoder).
    pub fn new(
        architecture: Architecture,
        config: &AsrTrainConfig,
        seed: u64,
        pretrained_lm: Option<&NeuralLm>,
        encoder_init: Option<&ParamStore>,
    ) -> Result<AsrModel> {
        let tokenizer = Tokenizer::new();
        let mut store = ParamStore::new(seed);
        let mut rng = Rng::new(derive_seed(&[seed, 0xa5e]));
        let encoder = AcousticEncoder::new(ENC_PREFIX, config.encoder.clone())?;
        encoder.init(&mut store, &mut rng)?;
        if let Some(init) = encoder_init {
            for name in init.names().map(str::to_string).collect::<Vec<_>>() {
                if name.starts_with(ENC_PREFIX) && store.contains(&name) {
                    *store.get_mut(&name) = init.get(&name).clone();
                }
            }
        }
        let enc_dim = config.encoder.model_dim;
        let head = match architecture {
            Architecture::ACtc | Architecture::ACtcFused => {
                let classes = tokenizer.num_units() + 1;
                let out = Layer::new(
                    LayerSpec::Linear {
                        d_in: enc_dim,
                        d_out: classes,
                    },
                    "ctc.out",
                );
                out.init(&mut store, &mut rng)?;
                Head::Ctc {
                    out,
                    vocab: CtcVocab::new(tokenizer.unit_ids()),
                }
            }
            Architecture::BSeq2seq => {
                let head = Seq2SeqHead::new("s2s", enc_dim, config.seq2seq.clone())?;
                head.init(&mut store, &mut rng)?;
                Head::Seq2Seq(head)
            }
            Architecture::CGpt | Architecture::CBart | Architecture::DQformer => {
                let lm = pretrained_lm.ok_or_else(|| {
                    Error::Config(format!(
                        "{} requires a pretrained LM checkpoint",
                        architecture.id()
                    ))
                })?;
                // Copy LM parameters into the shared store under lm.*.
                for name in lm.store.names().map(str::to_string).collect::<Vec<_>>() {
                    store.add(&name, lm.store.get(&name).clone());
                }
                let arch = lm_arch(&lm.prefix, &lm.config, tokenizer.vocab_size());
                match (architecture, arch) {
                    (Architecture::CGpt, LmArch::Decoder(stack)) => {
                        let bridge = BridgeNetwork::new(
                            "bridge",
                            enc_dim,
                            lm.config.model_dim,
                            config.bridge_stack_factor,
                        );
                        bridge.init(&mut store, &mut rng)?;
                        Head::PrefixLm {
                            bridge,
                            lm: stack,
                            context_cap: lm.config.context_cap,
                        }
                    }
                    (Architecture::CBart, LmArch::EncDec { decoder, .. }) => {
                        let bridge = BridgeNetwork::new(
                            "bridge",
                            enc_dim,
                            lm.config.model_dim,
                            config.bridge_stack_factor,
                        );
                        bridge.init(&mut store, &mut rng)?;
                        Head::CrossLm {
                            bridge,
                            lm_decoder: decoder,
                        }
                    }
                    (Architecture::DQformer, LmArch::Decoder(stack)) => {
                        let mut qf_config = config.qformer.clone();
                        qf_config.output_dim = lm.config.model_dim;
                        let qformer = QFormer::new("qf", enc_dim, qf_config)?;
                        qformer.init(&mut store, &mut rng)?;
                        Head::Qformer {
                            qformer,
                            lm: stack,
                            context_cap: lm.config.context_cap,
                        }
                    }
                    (a, _) => {
                        return Err(Error::Config(format!(
                            "LM kind does not match architecture {}",
                            a.id()
                        )))
                    }
                }
            }
        };
        Ok(AsrModel {
            architecture,
            config: config.clone(),
            store,
            encoder,
            head,
        })
    }

    /// The regime each architecture trains under by default.
    pub fn default_regime(architecture: Architecture) -> CouplingRegime {
        match architecture {
            Architecture::CGpt => CouplingRegime::end_to_end(CouplingKind::PrefixDecoderOnly),
            Architecture::CBart => CouplingRegime::end_to_end(CouplingKind::CrossAttentionEncdec),
            Architecture::DQformer => CouplingRegime::qformer_frozen_lm(),
            // A/B train everything they have, end to end.
            _ => CouplingRegime::end_to_end(CouplingKind::PrefixDecoderOnly),
        }
    }

    /// Loss plus gradient accumulation for one utterance. Returns None for
    /// utterances whose reference cannot be aligned (infeasible CTC length);
    /// the training loop skips and counts them.
    pub fn train_loss(&mut self, utterance: &Utterance, accumulate: bool) -> Result<Option<f64>> {
        let reference = &utterance.units;
        if reference.is_empty() {
            return Err(Error::Config("utterance has no reference units".into()));
        }
        let (encoded, enc_cache) = self.encoder.encode(
            &self.store,
            &utterance.features,
            None,
            &utterance.utterance_id,
        )?;
        match &self.head {
            Head::Ctc { out, vocab } => {
                let (logits, out_cache) =
                    out.forward(&self.store, LayerInput::Dense(&encoded.frames), None)?;
                let (logp, _) = crate::nn::log_softmax_pair(&logits);
                let posteriors = CtcPosteriors { logp };
                let classes: Vec<usize> = reference
                    .iter()
                    .map(|&t| {
                        vocab.class_of_token(t).ok_or_else(|| {
                            Error::Vocab(format!("unit {t} missing from CTC vocab"))
                        })
                    })
                    .collect::<Result<_>>()?;
                let res = ctc_loss(&posteriors, &classes)?;
                if res.loss.is_infinite() {
                    return Ok(None);
                }
                if accumulate {
                    let dlogits = res.grad_logits.expect("finite loss has gradient");
                    let d_enc = out.backward(&mut self.store, &out_cache, &dlogits)?.input;
                    self.encoder.backward(&mut self.store, &enc_cache, &d_enc)?;
                }
                Ok(Some(res.loss))
            }
            Head::Seq2Seq(head) => {
                let (loss, d_mem) =
                    head.teacher_forced_loss(&mut self.store, &encoded, reference, accumulate)?;
                if let Some(d_mem) = d_mem {
                    self.encoder.backward(&mut self.store, &enc_cache, &d_mem)?;
                }
                Ok(Some(loss))
            }
            Head::PrefixLm {
                bridge,
                lm,
                context_cap,
            } => {
                let (pseudo, bridge_cache) = bridge.forward(&self.store, &encoded.frames)?;
                let (loss, d_pseudo) = prefix_lm_loss(
                    &mut self.store,
                    lm,
                    *context_cap,
                    &pseudo,
                    reference,
                    accumulate,
                )?;
                if let Some(d_pseudo) = d_pseudo {
                    let d_enc = bridge.backward(&mut self.store, &bridge_cache, &d_pseudo)?;
                    self.encoder.backward(&mut self.store, &enc_cache, &d_enc)?;
                }
                Ok(Some(loss))
            }
            Head::CrossLm { bridge, lm_decoder } => {
                let (pseudo, bridge_cache) = bridge.forward(&self.store, &encoded.frames)?;
                let (loss, d_pseudo) = cross_attend_lm_loss(
                    &mut self.store,
                    lm_decoder,
                    &pseudo,
                    reference,
                    accumulate,
                )?;
                if let Some(d_pseudo) = d_pseudo {
                    let d_enc = bridge.backward(&mut self.store, &bridge_cache, &d_pseudo)?;
                    self.encoder.backward(&mut self.store, &enc_cache, &d_enc)?;
                }
                Ok(Some(loss))
            }
            Head::Qformer {
                qformer,
                lm,
                context_cap,
            } => {
                let (pseudo, qf_cache) = qformer.forward(&self.store, &encoded.frames, None)?;
                let (loss, d_pseudo) = prefix_lm_loss(
                    &mut self.store,
                    lm,
                    *context_cap,
                    &pseudo,
                    reference,
                    accumulate,
                )?;
                if let Some(d_pseudo) = d_pseudo {
                    let d_enc = qformer.backward(&mut self.store, &qf_cache, &d_pseudo)?;
                    self.encoder.backward(&mut self.store, &enc_cache, &d_enc)?;
                }
                Ok(Some(loss))
            }
        }
    }

    /// Decode one utterance's features into ranked hypotheses. `fusion_lm`
    /// feeds A_ctc_fused's shallow fusion; other architectures ignore it.
    pub fn decode(
        &self,
        features: &Tensor2D,
        utterance_id: &str,
        fusion_lm: Option<&dyn LmScorer>,
    ) -> Result<Vec<DecodeHypothesis>> {
        let (encoded, _) = self
            .encoder
            .encode(&self.store, features, None, utterance_id)?;
        match &self.head {
            Head::Ctc { out, vocab } => {
                let (logits, _) =
                    out.forward(&self.store, LayerInput::Dense(&encoded.frames), None)?;
                let (logp, _) = crate::nn::log_softmax_pair(&logits);
                let posteriors = CtcPosteriors { logp };
                match self.architecture {
                    Architecture::ACtcFused => {
                        let cfg = DecodeConfig {
                            beam_width: self.config.fusion.beam_width,
                            lm_weight: self.config.fusion.lm_weight,
                            length_bonus: self.config.fusion.length_bonus,
                        };
                        Ok(prefix_beam_decode(&posteriors, vocab, &cfg, fusion_lm))
                    }
                    _ => {
                        // Plain CTC: best-path decoding.
                        let tokens = greedy_decode(&posteriors, vocab);
                        Ok(vec![DecodeHypothesis {
                            tokens,
                            acoustic_logp: 0.0,
                            lm_logp: 0.0,
                            fused_score: 0.0,
                        }])
                    }
                }
            }
            Head::Seq2Seq(head) => Ok(head.beam_decode(
                &self.store,
                &encoded,
                self.config.beam_width,
                self.config.length_norm_power,
            )),
            Head::PrefixLm { bridge, lm, .. } => {
                let (pseudo, _) = bridge.forward(&self.store, &encoded.frames)?;
                Ok(self.prefix_beam(lm, &pseudo))
            }
            Head::CrossLm { bridge, lm_decoder } => {
                let (pseudo, _) = bridge.forward(&self.store, &encoded.frames)?;
                let mut scorer = CrossStackScorer {
                    stack: lm_decoder,
                    store: &self.store,
                    memory: &pseudo,
                };
                Ok(ar_beam_search(
                    &mut scorer,
                    &BeamConfig {
                        beam_width: self.config.beam_width,
                        max_len: self.config.max_decode_len,
                        length_norm_power: self.config.length_norm_power,
                        eos: EOS,
                        forbidden: vec![BLANK, BOS, PAD],
                    },
                ))
            }
            Head::Qformer { qformer, lm, .. } => {
                let (pseudo, _) = qformer.forward(&self.store, &encoded.frames, None)?;
                Ok(self.prefix_beam(lm, &pseudo))
            }
        }
    }

    fn prefix_beam(&self, lm: &CausalStack, pseudo: &Tensor2D) -> Vec<DecodeHypothesis> {
        let mut scorer = PrefixLmScorer {
            lm,
            store: &self.store,
            pseudo,
        };
        ar_beam_search(
            &mut scorer,
            &BeamConfig {
                beam_width: self.config.beam_width,
                max_len: self.config.max_decode_len,
                length_norm_power: self.config.length_norm_power,
                eos: EOS,
                forbidden: vec![BLANK, BOS, PAD],
            },
        )
    }

    pub fn lm_checksum(&self) -> u64 {
        self.store.checksum_prefix("lm.")
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let sidecar = serde_json::json!({
            "architecture": self.architecture,
            "config_hash": config_hash,
            "train_config": self.config,
            "layers": crate::lm::layer_manifest(&self.store),
        });
        save_checkpoint(&self.store, path, &sidecar)
    }

    /// Rebuild a model from its checkpoint. The pretrained LM is needed
    /// again only for its structure (parameters come from the checkpoint).
    pub fn load(path: &Path, pretrained_lm: Option<&NeuralLm>) -> Result<AsrModel> {
        let (store, sidecar) = load_checkpoint(path)?;
        let architecture: Architecture =
            serde_json::from_value(sidecar["architecture"].clone())
                .map_err(|e| Error::Format(format!("bad checkpoint sidecar: {e}")))?;
        let config: AsrTrainConfig = serde_json::from_value(sidecar["train_config"].clone())
            .map_err(|e| Error::Format(format!("bad checkpoint sidecar: {e}")))?;
        let mut model = AsrModel::new(architecture, &config, store.rng_seed, pretrained_lm, None)?;
        for name in model.store.names().map(str::to_string).collect::<Vec<_>>() {
            if !store.contains(&name) {
                return Err(Error::Format(format!(
                    "checkpoint missing parameter {name}"
                )));
            }
            *model.store.get_mut(&name) = store.get(&name).clone();
        }
        Ok(model)
    }
}

/// Beam scorer for prefix-coupled decoder-only LMs: the state starts after
/// the positioned pseudo-token rows and BOS.
pub struct PrefixLmScorer<'a> {
    pub lm: &'a CausalStack,
    pub store: &'a ParamStore,
    pub pseudo: &'a Tensor2D,
}

impl BeamScorer for PrefixLmScorer<'_> {
    type State = CausalState;

    fn initial(&mut self) -> (CausalState, Vec<f64>) {
        let mut state = self.lm.start_state();
        let placed = self.lm.position_rows(self.pseudo, 0);
        for r in 0..placed.rows() {
            let _ = self.lm.step_embedded(self.store, &mut state, placed.row(r));
        }
        // Text restarts at position 0, matching the training-side layout.
        state.pos = 0;
        let dist = self.lm.step_token(self.store, &mut state, BOS);
        (state, dist)
    }

    fn advance(&mut self, state: &CausalState, token: TokenId) -> (CausalState, Vec<f64>) {
        let mut next = state.clone();
        let dist = self.lm.step_token(self.store, &mut next, token);
        (next, dist)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStats {
    pub architecture: Architecture,
    pub epochs: usize,
    /// Mean training loss per epoch (the loss-curve artifact).
    pub loss_curve: Vec<f64>,
    pub skipped_utterances: usize,
    pub lm_checksum_before: u64,
    pub lm_checksum_after: u64,
}

/// Train a model on a manifest's train split under a coupling regime.
///
/// Regime violations fail before any step. Frozen components accumulate no
/// gradient; the encoder freezes after the warm-start epochs when the
/// regime says so. Divergence aborts with a training error.
pub fn train_model(
    model: &mut AsrModel,
    manifest: &CorpusManifest,
    regime: &CouplingRegime,
    seed: u64,
) -> Result<TrainStats> {
    regime.validate()?;
    let lm_checksum_before = model.store.checksum_prefix("lm.");
    // Freeze whatever the regime excludes from the trainable set.
    if !regime.train_lm && model.store.names().any(|n| n.starts_with("lm.")) {
        model.store.freeze_prefix("lm.");
    }
    let encoder_frozen_after_warmup = !regime.train_encoder;
    let config = model.config.clone();
    let train_ids: Vec<&Utterance> = manifest.utterances_in(Split::Train).collect();
    if train_ids.is_empty() {
        return Err(Error::Config("manifest has an empty train split".into()));
    }
    let mut shuffle_rng = Rng::new(derive_seed(&[seed, 0x7247]));
    let epochs = config.epochs_for(model.architecture);
    let mut loss_curve = Vec::with_capacity(epochs);
    let mut skipped = 0usize;
    for epoch in 0..epochs {
        if encoder_frozen_after_warmup && epoch == regime.encoder_warm_start_epochs {
            model.store.freeze_prefix(&format!("{ENC_PREFIX}."));
        }
        let mut order: Vec<usize> = (0..train_ids.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut counted = 0usize;
        for chunk in order.chunks(config.batch_size.max(1)) {
            for &idx in chunk {
                match model.train_loss(train_ids[idx], true)? {
                    Some(loss) => {
                        if !loss.is_finite() {
                            return Err(Error::Train(format!(
                                "{} diverged in epoch {epoch}",
                                model.architecture.id()
                            )));
                        }
                        epoch_loss += loss;
                        counted += 1;
                    }
                    None => skipped += 1,
                }
            }
            let opt_step = model.store.step_count() + 1;
            let warm = (opt_step as f64 / config.warmup_steps.max(1) as f64).min(1.0);
            model.store.adam_step(config.lr * warm, 0.9, 0.999, 1e-8)?;
        }
        loss_curve.push(if counted > 0 {
            epoch_loss / counted as f64
        } else {
            f64::NAN
        });
    }
    Ok(TrainStats {
        architecture: model.architecture,
        epochs,
        loss_curve,
        skipped_utterances: skipped,
        lm_checksum_before,
        lm_checksum_after: model.store.checksum_prefix("lm."),
    })
}

/// Names of parameters with any nonzero accumulated gradient (regime
/// exclusivity audits).
pub fn nonzero_grad_names(store: &ParamStore) -> BTreeSet<String> {
    store
        .names()
        .filter(|n| store.grad(n).frobenius_sq() > 0.0)
        .map(str::to_string)
        .collect()
}
