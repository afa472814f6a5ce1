//! Small neural language models: a decoder-only next-token model (GPT
//! analogue), an encoder-decoder denoiser (BART analogue), and a larger,
//! longer-pretrained decoder-only model used frozen (Vicuna analogue).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TokenId, Tokenizer, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::{
    cross_entropy_from_logits, load_checkpoint, save_checkpoint, ParamStore, XentOptions,
};
use crate::rng::{derive_seed, Rng};
use crate::stacks::{BlockStack, CausalStack, CrossStack};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmKind {
    DecoderOnly,
    EncoderDecoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralLmConfig {
    pub kind: LmKind,
    pub model_dim: usize,
    pub n_blocks: usize,
    pub heads: usize,
    /// Maximum joint sequence length (pseudo-token prefix + text).
    pub context_cap: usize,
}

impl NeuralLmConfig {
    pub fn gpt_small() -> Self {
        NeuralLmConfig {
            kind: LmKind::DecoderOnly,
            model_dim: 32,
            n_blocks: 2,
            heads: 4,
            context_cap: 160,
        }
    }

    pub fn bart_small() -> Self {
        NeuralLmConfig {
            kind: LmKind::EncoderDecoder,
            model_dim: 32,
            n_blocks: 1,
            heads: 4,
            context_cap: 160,
        }
    }

    /// Larger frozen decoder-only model, pretrained longer; "larger +
    /// frozen" is the property that matters, the scale is symbolic.
    pub fn vicuna_analogue() -> Self {
        NeuralLmConfig {
            kind: LmKind::DecoderOnly,
            model_dim: 64,
            n_blocks: 4,
            heads: 4,
            context_cap: 160,
        }
    }
}

/// Layer structure bound to `<prefix>.*` parameter names; the store holding
/// the actual values is supplied by the caller so coupled models can merge
/// the LM into a shared optimizer.
#[derive(Debug, Clone)]
pub enum LmArch {
    Decoder(CausalStack),
    EncDec {
        encoder: CausalStackEncoder,
        decoder: CrossStack,
    },
}

/// Text encoder for the encoder-decoder kind: embedding + non-causal blocks.
#[derive(Debug, Clone)]
pub struct CausalStackEncoder {
    pub emb: crate::nn::Layer,
    pub stack: BlockStack,
    pub model_dim: usize,
}

impl CausalStackEncoder {
    fn new(prefix: &str, model_dim: usize, heads: usize, n_blocks: usize, vocab: usize) -> Self {
        CausalStackEncoder {
            emb: crate::nn::Layer::new(
                crate::nn::LayerSpec::Embedding {
                    vocab,
                    dim: model_dim,
                    scale: crate::stacks::EMB_UNIT_SCALE,
                },
                format!("{prefix}.emb"),
            ),
            stack: BlockStack::new(prefix, model_dim, heads, n_blocks, false),
            model_dim,
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        ids: &[TokenId],
    ) -> Result<(Tensor2D, crate::nn::LayerCache, crate::stacks::BlockStackCache)> {
        let (mut rows, emb_cache) =
            self.emb
                .forward(store, crate::nn::LayerInput::Ids(ids), None)?;
        let pos = crate::nn::sinusoidal_positions(ids.len(), self.model_dim);
        for r in 0..rows.rows() {
            for c in 0..self.model_dim {
                *rows.at_mut(r, c) += pos.at(r, c);
            }
        }
        let (y, cache) = self.stack.forward(store, &rows, None)?;
        Ok((y, emb_cache, cache))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        emb_cache: &crate::nn::LayerCache,
        cache: &crate::stacks::BlockStackCache,
        upstream: &Tensor2D,
    ) -> Result<()> {
        let d_rows = self.stack.backward(store, cache, upstream)?;
        self.emb.backward(store, emb_cache, &d_rows)?;
        Ok(())
    }
}

pub fn lm_arch(prefix: &str, config: &NeuralLmConfig, vocab: usize) -> LmArch {
    match config.kind {
        LmKind::DecoderOnly => LmArch::Decoder(CausalStack::new(
            prefix,
            config.model_dim,
            config.heads,
            config.n_blocks,
            vocab,
        )),
        LmKind::EncoderDecoder => LmArch::EncDec {
            encoder: CausalStackEncoder::new(
                &format!("{prefix}.enc"),
                config.model_dim,
                config.heads,
                config.n_blocks,
                vocab,
            ),
            decoder: CrossStack::new(
                &format!("{prefix}.dec"),
                config.model_dim,
                config.model_dim,
                config.heads,
                config.n_blocks,
                vocab,
            ),
        },
    }
}

/// A standalone language model: structure + its own parameter store.
#[derive(Debug, Clone)]
pub struct NeuralLm {
    pub config: NeuralLmConfig,
    pub arch: LmArch,
    pub store: ParamStore,
    pub frozen: bool,
    pub prefix: String,
}

pub const LM_PREFIX: &str = "lm";

impl NeuralLm {
    pub fn new(config: NeuralLmConfig, seed: u64) -> Result<NeuralLm> {
        let tokenizer = Tokenizer::new();
        let vocab = tokenizer.vocab_size();
        let arch = lm_arch(LM_PREFIX, &config, vocab);
        let mut store = ParamStore::new(seed);
        let mut rng = Rng::new(derive_seed(&[seed, 0x111]));
        match &arch {
            LmArch::Decoder(stack) => stack.init(&mut store, &mut rng)?,
            LmArch::EncDec { encoder, decoder } => {
                encoder.emb.init(&mut store, &mut rng)?;
                encoder.stack.init(&mut store, &mut rng)?;
                decoder.init(&mut store, &mut rng)?;
            }
        }
        Ok(NeuralLm {
            config,
            arch,
            store,
            frozen: false,
            prefix: LM_PREFIX.to_string(),
        })
    }

    pub fn checksum(&self) -> u64 {
        self.store.checksum()
    }

    /// Log-probabilities at each position of [BOS, tokens...] predicting the
    /// next token: row t scores what follows tokens[..t].
    pub fn token_log_probs(&self, tokens: &[TokenId]) -> Result<Tensor2D> {
        let LmArch::Decoder(stack) = &self.arch else {
            return Err(Error::Config(
                "token scoring requires a decoder_only model".into(),
            ));
        };
        let mut input = vec![BOS];
        input.extend_from_slice(tokens);
        if input.len() > self.config.context_cap {
            return Err(Error::Config(format!(
                "sequence length {} exceeds context cap {}",
                input.len(),
                self.config.context_cap
            )));
        }
        let embs = stack.embed_tokens(&self.store, &input, 0)?;
        let (logits, _) = stack.forward_embedded(&self.store, &embs)?;
        let (logp, _) = crate::nn::log_softmax_pair(&logits);
        Ok(logp)
    }

    /// ln P(next | prefix). Decoder-only models use causal attention over
    /// the prefix.
    pub fn score(&self, prefix: &[TokenId], next: TokenId) -> Result<f64> {
        let tokenizer = Tokenizer::new();
        for &t in prefix.iter().chain(std::iter::once(&next)) {
            if t as usize >= tokenizer.vocab_size() {
                return Err(Error::Vocab(format!("token {t} out of vocabulary")));
            }
        }
        let logp = self.token_log_probs(prefix)?;
        Ok(logp.at(prefix.len(), next as usize))
    }

    /// Next-token cross-entropy (mean, nats/token) of one sentence; also
    /// accumulates gradients when `accumulate` is set.
    pub fn next_token_loss(&mut self, tokens: &[TokenId], accumulate: bool) -> Result<f64> {
        let LmArch::Decoder(stack) = &self.arch else {
            return Err(Error::Config("next_token_loss requires decoder_only".into()));
        };
        let mut input = vec![BOS];
        input.extend_from_slice(tokens);
        let mut targets = tokens.to_vec();
        targets.push(EOS);
        if input.len() > self.config.context_cap {
            return Err(Error::Config("context cap exceeded".into()));
        }
        let embs = stack.embed_tokens(&self.store, &input, 0)?;
        let (logits, cache) = stack.forward_embedded(&self.store, &embs)?;
        let include = vec![true; targets.len()];
        let (loss, dlogits) =
            cross_entropy_from_logits(&logits, &targets, &include, XentOptions::default())?;
        if accumulate {
            let d_embs = stack.backward_embedded(&mut self.store, &cache, &dlogits)?;
            stack.accumulate_token_grads(&mut self.store, &input, &d_embs, 0);
        }
        Ok(loss)
    }

    /// Denoising loss for the encoder-decoder kind: encode the corrupted
    /// tokens, teacher-force the clean reconstruction.
    pub fn denoising_loss(
        &mut self,
        corrupted: &[TokenId],
        clean: &[TokenId],
        accumulate: bool,
    ) -> Result<f64> {
        let LmArch::EncDec { encoder, decoder } = &self.arch else {
            return Err(Error::Config("denoising_loss requires encoder_decoder".into()));
        };
        let (memory, emb_cache, enc_cache) = encoder.forward(&self.store, corrupted)?;
        let mut input = vec![BOS];
        input.extend_from_slice(clean);
        let mut targets = clean.to_vec();
        targets.push(EOS);
        let (logits, dec_cache) = decoder.forward_train(&self.store, &input, &memory, None)?;
        let include = vec![true; targets.len()];
        let (loss, dlogits) =
            cross_entropy_from_logits(&logits, &targets, &include, XentOptions::default())?;
        if accumulate {
            let d_memory = decoder.backward(&mut self.store, &dec_cache, &input, &dlogits)?;
            encoder.backward(&mut self.store, &emb_cache, &enc_cache, &d_memory)?;
        }
        Ok(loss)
    }

    /// Greedy reconstruction from clean input text (encoder-decoder kind).
    pub fn reconstruct(&self, tokens: &[TokenId], max_len: usize) -> Result<Vec<TokenId>> {
        let LmArch::EncDec { encoder, decoder } = &self.arch else {
            return Err(Error::Config("reconstruct requires encoder_decoder".into()));
        };
        let (memory, _, _) = encoder.forward(&self.store, tokens)?;
        let mut state = decoder.start_state(&self.store, &memory, None);
        let mut out = Vec::new();
        let mut token = BOS;
        for _ in 0..max_len {
            let logp = decoder.step_token(&self.store, &mut state, token);
            // Argmax over EOS and character ids only.
            let mut best: Option<(usize, f64)> = None;
            for (c, &v) in logp.iter().enumerate() {
                let id = c as TokenId;
                if id == BOS || id == PAD || id == super::BLANK {
                    continue;
                }
                if best.map_or(true, |(_, bv)| v > bv) {
                    best = Some((c, v));
                }
            }
            let (c, _) = best.expect("vocab has emittable ids");
            if c as TokenId == EOS {
                break;
            }
            out.push(c as TokenId);
            token = c as TokenId;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let sidecar = serde_json::json!({
            "config_hash": config_hash,
            "lm_config": self.config,
            "frozen": self.frozen,
            "layers": layer_manifest(&self.store),
        });
        save_checkpoint(&self.store, path, &sidecar)
    }

    pub fn load(path: &Path) -> Result<NeuralLm> {
        let (store, sidecar) = load_checkpoint(path)?;
        let config: NeuralLmConfig = serde_json::from_value(sidecar["lm_config"].clone())
            .map_err(|e| Error::Format(format!("bad lm sidecar: {e}")))?;
        let frozen = sidecar["frozen"].as_bool().unwrap_or(false);
        let tokenizer = Tokenizer::new();
        let arch = lm_arch(LM_PREFIX, &config, tokenizer.vocab_size());
        Ok(NeuralLm {
            config,
            arch,
            store,
            frozen,
            prefix: LM_PREFIX.to_string(),
        })
    }
}

/// Tensor name/shape listing for checkpoint sidecars.
pub fn layer_manifest(store: &ParamStore) -> serde_json::Value {
    let layers: Vec<serde_json::Value> = store
        .names()
        .map(|n| {
            let t = store.get(n);
            serde_json::json!({"name": n, "rows": t.rows(), "cols": t.cols()})
        })
        .collect();
    serde_json::Value::Array(layers)
}

impl crate::ctc::LmScorer for NeuralLm {
    fn log_prob(&self, prefix: &[TokenId], next: TokenId) -> f64 {
        self.score(prefix, next)
            .expect("fusion queries stay inside the vocabulary")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    /// Sentences per optimizer step.
    pub batch_size: usize,
    pub held_out_fraction: f64,
    /// Expected fraction of characters covered by corruption spans
    /// (encoder-decoder kind only).
    pub span_mask_coverage: f64,
    pub evals_per_run: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 16,
            lr: 3e-3,
            warmup_steps: 200,
            batch_size: 16,
            held_out_fraction: 0.1,
            span_mask_coverage: 0.25,
            evals_per_run: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainStats {
    pub initial_held_out_ce: f64,
    pub final_held_out_ce: f64,
    /// (training step, held-out cross-entropy) at each evaluation point.
    pub eval_curve: Vec<(u64, f64)>,
}

/// Span-collapse corruption: runs of 1..=3 tokens are replaced by a single
/// PAD until roughly `coverage` of the positions are affected.
fn corrupt_span_mask(tokens: &[TokenId], coverage: f64, rng: &mut Rng) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(tokens.len());
    let mut i = 0;
    while i < tokens.len() {
        // A span of mean length 2 starts here with p = coverage / 2.
        if rng.uniform() < coverage / 2.0 {
            let span = 1 + rng.below(3);
            out.push(PAD);
            i += span;
        } else {
            out.push(tokens[i]);
            i += 1;
        }
    }
    if out.is_empty() {
        out.push(PAD);
    }
    out
}

fn held_out_ce(lm: &mut NeuralLm, held_out: &[Vec<TokenId>], coverage: f64, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (i, sent) in held_out.iter().enumerate() {
        let loss = match lm.config.kind {
            LmKind::DecoderOnly => lm.next_token_loss(sent, false)?,
            LmKind::EncoderDecoder => {
                // Fixed corruption per (seed, sentence) so evals compare.
                let mut rng = Rng::new(derive_seed(&[seed, 0xe7a1, i as u64]));
                let corrupted = corrupt_span_mask(sent, coverage, &mut rng);
                lm.denoising_loss(&corrupted, sent, false)?
            }
        };
        total += loss;
    }
    Ok(total / held_out.len() as f64)
}

/// Pretrain a neural LM on grammar text. Deterministic under
/// (kind/config, corpus, seed); errors out if the loss diverges.
pub fn pretrain_neural_lm(
    lm_config: NeuralLmConfig,
    corpus: &[String],
    config: &PretrainConfig,
    seed: u64,
) -> Result<(NeuralLm, PretrainStats)> {
    if corpus.is_empty() {
        return Err(Error::Config("pretraining corpus must be nonempty".into()));
    }
    let tokenizer = Tokenizer::new();
    let sentences: Vec<Vec<TokenId>> = corpus
        .iter()
        .map(|s| tokenizer.encode(s))
        .collect::<Result<_>>()?;
    let n_held = ((sentences.len() as f64 * config.held_out_fraction).round() as usize)
        .clamp(1, sentences.len().saturating_sub(1).max(1));
    let (train, held_out) = sentences.split_at(sentences.len() - n_held);
    if train.is_empty() {
        return Err(Error::Config("pretraining corpus too small to split".into()));
    }

    let mut lm = NeuralLm::new(lm_config, seed)?;
    let coverage = config.span_mask_coverage;
    let initial = held_out_ce(&mut lm, held_out, coverage, seed)?;
    let mut curve = vec![(0u64, initial)];

    let total_steps = (config.epochs * train.len()) as u64;
    let eval_every = (total_steps / config.evals_per_run.max(1) as u64).max(1);
    let mut shuffle_rng = Rng::new(derive_seed(&[seed, 0x5481]));
    let mut corrupt_rng = Rng::new(derive_seed(&[seed, 0xc044]));
    let batch = config.batch_size.max(1);
    let mut step: u64 = 0;
    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            for &idx in chunk {
                let sent = &train[idx];
                let loss = match lm.config.kind {
                    LmKind::DecoderOnly => lm.next_token_loss(sent, true)?,
                    LmKind::EncoderDecoder => {
                        let corrupted = corrupt_span_mask(sent, coverage, &mut corrupt_rng);
                        lm.denoising_loss(&corrupted, sent, true)?
                    }
                };
                if !loss.is_finite() {
                    return Err(Error::Train(format!(
                        "pretraining diverged at step {step}: loss {loss}"
                    )));
                }
                step += 1;
            }
            let opt_step = lm.store.step_count() + 1;
            let warm = (opt_step as f64 / config.warmup_steps.max(1) as f64).min(1.0);
            lm.store.adam_step(config.lr * warm, 0.9, 0.999, 1e-8)?;
            if step % eval_every < batch as u64 && step >= eval_every {
                let ce = held_out_ce(&mut lm, held_out, coverage, seed)?;
                curve.push((step, ce));
            }
        }
    }
    let final_ce = held_out_ce(&mut lm, held_out, coverage, seed)?;
    curve.push((step, final_ce));
    Ok((
        lm,
        PretrainStats {
            initial_held_out_ce: initial,
            final_held_out_ce: final_ce,
            eval_curve: curve,
        },
    ))
}
