//! Language models: a character tokenizer shared between the acoustic and
//! text sides, a Kneser-Ney n-gram scorer for shallow fusion, and small
//! neural LMs (decoder-only and encoder-decoder) pretrained on grammar text.

mod ngram;
mod neural;

pub use ngram::NGramLm;
pub use neural::{
    layer_manifest, lm_arch, pretrain_neural_lm, LmArch, LmKind, NeuralLm, NeuralLmConfig,
    PretrainConfig, PretrainStats, LM_PREFIX,
};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const BLANK: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const PAD: TokenId = 3;

/// First id of the emittable character range.
const CHAR_BASE: TokenId = 4;

/// Character-level tokenizer over 26 letters + space + apostrophe, with the
/// reserved ids BLANK=0, BOS=1, EOS=2, PAD=3. Reserved ids are never emitted
/// by decode.
#[derive(Debug, Clone, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn new() -> Self {
        Tokenizer
    }

    /// Total id space (reserved + characters).
    pub fn vocab_size(&self) -> usize {
        CHAR_BASE as usize + 28
    }

    /// Number of emittable character units.
    pub fn num_units(&self) -> usize {
        28
    }

    pub fn unit_ids(&self) -> Vec<TokenId> {
        (0..28).map(|i| CHAR_BASE + i).collect()
    }

    fn char_to_id(c: char) -> Option<TokenId> {
        match c {
            'a'..='z' => Some(CHAR_BASE + (c as u32 - 'a' as u32)),
            ' ' => Some(CHAR_BASE + 26),
            '\'' => Some(CHAR_BASE + 27),
            _ => None,
        }
    }

    fn id_to_char(id: TokenId) -> Option<char> {
        match id.checked_sub(CHAR_BASE)? {
            i @ 0..=25 => Some((b'a' + i as u8) as char),
            26 => Some(' '),
            27 => Some('\''),
            _ => None,
        }
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        id < CHAR_BASE
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| {
                Self::char_to_id(c).ok_or_else(|| {
                    Error::Vocab(format!("character {c:?} is not in the vocabulary"))
                })
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().filter_map(|&id| Self::id_to_char(id)).collect()
    }

    pub fn in_vocab(&self, text: &str) -> bool {
        text.chars().all(|c| Self::char_to_id(c).is_some())
    }
}
