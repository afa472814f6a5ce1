//! End-to-end attention decoder over encoder outputs (architecture B):
//! teacher-forced training, length-normalized beam decoding.

use serde::{Deserialize, Serialize};

use crate::encoder::EncodedSequence;
use crate::error::{Error, Result};
use crate::lm::{TokenId, Tokenizer, BLANK, BOS, EOS, PAD};
use crate::nn::{cross_entropy_from_logits, ParamStore, XentOptions};
use crate::rng::Rng;
use crate::search::{ar_beam_search, BeamConfig, BeamScorer, DecodeHypothesis};
use crate::stacks::{CrossStack, CrossState};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seq2SeqConfig {
    pub model_dim: usize,
    pub n_blocks: usize,
    pub heads: usize,
    pub max_decode_len: usize,
    pub label_smoothing: f64,
    pub length_norm_power: f64,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Seq2SeqConfig {
            model_dim: 32,
            n_blocks: 2,
            heads: 4,
            max_decode_len: 60,
            label_smoothing: 0.1,
            length_norm_power: 0.6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Seq2SeqHead {
    pub config: Seq2SeqConfig,
    pub decoder: CrossStack,
}

impl Seq2SeqHead {
    pub fn new(prefix: &str, memory_dim: usize, config: Seq2SeqConfig) -> Result<Seq2SeqHead> {
        if config.max_decode_len == 0 {
            return Err(Error::Config("max_decode_len must be >= 1".into()));
        }
        let tokenizer = Tokenizer::new();
        Ok(Seq2SeqHead {
            decoder: CrossStack::new(
                prefix,
                config.model_dim,
                memory_dim,
                config.heads,
                config.n_blocks,
                tokenizer.vocab_size(),
            ),
            config,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.decoder.init(store, rng)
    }

    /// Mean token cross-entropy with teacher forcing; returns the loss and
    /// (when accumulating) pushes gradients into the store and returns the
    /// encoder-memory gradient for upstream backward.
    pub fn teacher_forced_loss(
        &self,
        store: &mut ParamStore,
        encoded: &EncodedSequence,
        reference: &[TokenId],
        accumulate: bool,
    ) -> Result<(f64, Option<Tensor2D>)> {
        if reference.is_empty() {
            return Err(Error::Config("reference must be nonempty".into()));
        }
        if reference.len() + 1 > self.config.max_decode_len {
            return Err(Error::Config(format!(
                "reference length {} exceeds max_decode_len {}",
                reference.len(),
                self.config.max_decode_len
            )));
        }
        let mut input = vec![BOS];
        input.extend_from_slice(reference);
        let mut targets = reference.to_vec();
        targets.push(EOS);
        let (logits, cache) = self
            .decoder
            .forward_train(store, &input, &encoded.frames, None)?;
        let include = vec![true; targets.len()];
        let (loss, dlogits) = cross_entropy_from_logits(
            &logits,
            &targets,
            &include,
            XentOptions {
                label_smoothing: self.config.label_smoothing,
            },
        )?;
        if accumulate {
            let d_memory = self.decoder.backward(store, &cache, &input, &dlogits)?;
            return Ok((loss, Some(d_memory)));
        }
        Ok((loss, None))
    }

    /// Length-normalized beam search; EOS-terminated hypotheses retire to
    /// the finished pool with final scores.
    pub fn beam_decode(
        &self,
        store: &ParamStore,
        encoded: &EncodedSequence,
        beam_width: usize,
        length_norm_power: f64,
    ) -> Vec<DecodeHypothesis> {
        let mut scorer = CrossStackScorer {
            stack: &self.decoder,
            store,
            memory: &encoded.frames,
        };
        ar_beam_search(
            &mut scorer,
            &BeamConfig {
                beam_width,
                max_len: self.config.max_decode_len,
                length_norm_power,
                eos: EOS,
                forbidden: vec![BLANK, BOS, PAD],
            },
        )
    }
}

/// Beam scorer over a CrossStack with fixed memory.
pub struct CrossStackScorer<'a> {
    pub stack: &'a CrossStack,
    pub store: &'a ParamStore,
    pub memory: &'a Tensor2D,
}

impl BeamScorer for CrossStackScorer<'_> {
    type State = CrossState;

    fn initial(&mut self) -> (CrossState, Vec<f64>) {
        let mut state = self.stack.start_state(self.store, self.memory, None);
        let dist = self.stack.step_token(self.store, &mut state, BOS);
        (state, dist)
    }

    fn advance(&mut self, state: &CrossState, token: TokenId) -> (CrossState, Vec<f64>) {
        let mut next = state.clone();
        let dist = self.stack.step_token(self.store, &mut next, token);
        (next, dist)
    }
}
