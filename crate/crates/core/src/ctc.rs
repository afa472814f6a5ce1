//! CTC head: forward-backward loss with analytic gradient, greedy decoding,
//! and prefix beam search with optional shallow LM fusion.
//!
//! All probability arithmetic is carried in log space. Blank is class 0 of
//! the posterior grid; classes 1.. map to emittable tokens through CtcVocab.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::lm::TokenId;
use crate::search::{rank_hypotheses, DecodeHypothesis};
use crate::tensor::{log_add, log_sum_exp, Tensor2D};

/// Frame-wise log-posteriors, T' x (|V|+1), column 0 = blank.
/// Each row must log-sum-exp to 0 within 1e-5.
#[derive(Debug, Clone)]
pub struct CtcPosteriors {
    pub logp: Tensor2D,
}

impl CtcPosteriors {
    pub fn new(logp: Tensor2D) -> Result<Self> {
        for r in 0..logp.rows() {
            let lse = log_sum_exp(logp.row(r));
            if lse.abs() > 1e-5 {
                return Err(Error::State(format!(
                    "posterior row {r} log-sum-exps to {lse:.2e}, not 0"
                )));
            }
        }
        Ok(CtcPosteriors { logp })
    }

    pub fn frames(&self) -> usize {
        self.logp.rows()
    }

    pub fn classes(&self) -> usize {
        self.logp.cols()
    }
}

/// Maps posterior classes 1.. to token ids (class 0 is blank).
#[derive(Debug, Clone)]
pub struct CtcVocab {
    pub tokens: Vec<TokenId>,
}

impl CtcVocab {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        CtcVocab { tokens }
    }

    pub fn classes(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn token_of_class(&self, class: usize) -> TokenId {
        self.tokens[class - 1]
    }

    /// Posterior class of a token id, if the token is in the vocab.
    pub fn class_of_token(&self, token: TokenId) -> Option<usize> {
        self.tokens.iter().position(|&t| t == token).map(|i| i + 1)
    }
}

/// Beam search knobs. With `lm_weight` 0 the fused score reduces exactly to
/// the acoustic score plus the length bonus.
#[derive(Debug, Clone)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub lm_weight: f64,
    pub length_bonus: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 8,
            lm_weight: 0.5,
            length_bonus: 0.3,
        }
    }
}

/// Log-probability of `next` following `prefix`. Implemented by the n-gram
/// scorer and by decoder-only neural LMs.
pub trait LmScorer {
    fn log_prob(&self, prefix: &[TokenId], next: TokenId) -> f64;
}

#[derive(Debug, Clone)]
pub struct CtcLossResult {
    pub loss: f64,
    /// Gradient with respect to the pre-softmax logits; None for infeasible
    /// references (loss is the +inf sentinel then).
    pub grad_logits: Option<Tensor2D>,
}

/// Minimum number of frames needed to emit `reference` (repeats require a
/// separating blank).
pub fn min_frames_for(reference: &[usize]) -> usize {
    let repeats = reference.windows(2).filter(|w| w[0] == w[1]).count();
    reference.len() + repeats
}

/// CTC loss: -log of the total probability over all frame alignments that
/// collapse to `reference` (classes, not raw tokens), plus the analytic
/// gradient with respect to logits.
///
/// Infeasible references (more frames required than available) yield the
/// +inf sentinel with no gradient rather than an error, so training loops
/// can skip and count them.
pub fn ctc_loss(posteriors: &CtcPosteriors, reference: &[usize]) -> Result<CtcLossResult> {
    let t_len = posteriors.frames();
    let classes = posteriors.classes();
    if reference.is_empty() {
        return Err(Error::Config("CTC reference must be nonempty".into()));
    }
    for &r in reference {
        if r == 0 || r >= classes {
            return Err(Error::Vocab(format!(
                "reference class {r} outside posterior classes 1..{classes}"
            )));
        }
    }
    if t_len < min_frames_for(reference) {
        return Ok(CtcLossResult {
            loss: f64::INFINITY,
            grad_logits: None,
        });
    }

    // Extended label sequence: blank, r1, blank, r2, ..., rL, blank.
    let l = reference.len();
    let s_len = 2 * l + 1;
    let label = |s: usize| -> usize {
        if s % 2 == 0 {
            0
        } else {
            reference[s / 2]
        }
    };
    let logp = &posteriors.logp;
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![vec![neg; s_len]; t_len];
    alpha[0][0] = logp.at(0, 0);
    if s_len > 1 {
        alpha[0][1] = logp.at(0, label(1));
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, alpha[t - 1][s - 1]);
            }
            if s >= 2 && label(s) != 0 && label(s) != label(s - 2) {
                acc = log_add(acc, alpha[t - 1][s - 2]);
            }
            if acc != neg {
                alpha[t][s] = acc + logp.at(t, label(s));
            }
        }
    }
    let log_total = log_add(alpha[t_len - 1][s_len - 1], {
        if s_len >= 2 {
            alpha[t_len - 1][s_len - 2]
        } else {
            neg
        }
    });
    if log_total == neg {
        // No feasible path despite the length check (cannot happen with
        // finite posteriors, but stay defensive about -inf inputs).
        return Ok(CtcLossResult {
            loss: f64::INFINITY,
            grad_logits: None,
        });
    }

    // Beta includes the emission at (t, s), mirroring alpha.
    let mut beta = vec![vec![neg; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = logp.at(t_len - 1, 0);
    if s_len >= 2 {
        beta[t_len - 1][s_len - 2] = logp.at(t_len - 1, label(s_len - 2));
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[t + 1][s];
            if s + 1 < s_len {
                acc = log_add(acc, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && label(s + 2) != 0 && label(s + 2) != label(s) {
                acc = log_add(acc, beta[t + 1][s + 2]);
            }
            if acc != neg {
                beta[t][s] = acc + logp.at(t, label(s));
            }
        }
    }

    // Occupancy G(t,k) = sum_{s: label(s)=k} exp(alpha + beta - logp(t,k)
    // - logTotal); gradient wrt logits is softmax(logits) - G = exp(logp) - G.
    let mut grad = Tensor2D::zeros(t_len, classes);
    for t in 0..t_len {
        let mut per_class = vec![neg; classes];
        for s in 0..s_len {
            let ab = if alpha[t][s] == neg || beta[t][s] == neg {
                neg
            } else {
                alpha[t][s] + beta[t][s]
            };
            if ab != neg {
                let k = label(s);
                per_class[k] = log_add(per_class[k], ab);
            }
        }
        for k in 0..classes {
            let occupancy = if per_class[k] == neg {
                0.0
            } else {
                (per_class[k] - logp.at(t, k) - log_total).exp()
            };
            grad.set(t, k, logp.at(t, k).exp() - occupancy);
        }
    }

    Ok(CtcLossResult {
        loss: -log_total,
        grad_logits: Some(grad),
    })
}

/// Best-path decoding: per-frame argmax (ties toward the lowest class id),
/// collapse repeats, drop blanks.
pub fn greedy_decode(posteriors: &CtcPosteriors, vocab: &CtcVocab) -> Vec<TokenId> {
    let mut out = Vec::new();
    let mut prev_class = usize::MAX;
    for t in 0..posteriors.frames() {
        let row = posteriors.logp.row(t);
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if best != prev_class && best != 0 {
            out.push(vocab.token_of_class(best));
        }
        prev_class = best;
    }
    out
}

#[derive(Debug, Clone)]
struct PrefixMass {
    blank: f64,
    non_blank: f64,
    lm_logp: f64,
}

impl PrefixMass {
    fn total(&self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

/// Prefix beam search with optional shallow fusion.
///
/// Tracks the (blank, non-blank) probability pair per prefix; the LM score
/// for a token is added exactly once, when its prefix is first extended.
/// Returns the top `beam_width` hypotheses by fused score
/// `acoustic + lm_weight * lm + length_bonus * len`.
pub fn prefix_beam_decode(
    posteriors: &CtcPosteriors,
    vocab: &CtcVocab,
    config: &DecodeConfig,
    lm: Option<&dyn LmScorer>,
) -> Vec<DecodeHypothesis> {
    assert!(config.beam_width >= 1, "beam_width must be >= 1");
    let neg = f64::NEG_INFINITY;
    let alpha = config.lm_weight;
    let beta = config.length_bonus;
    let fused = |mass: &PrefixMass, len: usize| -> f64 {
        mass.total() + alpha * mass.lm_logp + beta * len as f64
    };

    let mut beams: BTreeMap<Vec<TokenId>, PrefixMass> = BTreeMap::new();
    beams.insert(
        Vec::new(),
        PrefixMass {
            blank: 0.0,
            non_blank: neg,
            lm_logp: 0.0,
        },
    );

    for t in 0..posteriors.frames() {
        let row = posteriors.logp.row(t).to_vec();
        let mut next: BTreeMap<Vec<TokenId>, PrefixMass> = BTreeMap::new();
        for (prefix, mass) in &beams {
            // Blank keeps the prefix.
            {
                let entry = next.entry(prefix.clone()).or_insert(PrefixMass {
                    blank: neg,
                    non_blank: neg,
                    lm_logp: mass.lm_logp,
                });
                entry.blank = log_add(entry.blank, mass.total() + row[0]);
            }
            for class in 1..vocab.classes() {
                let token = vocab.token_of_class(class);
                let token_lp = row[class];
                let repeats_last = prefix.last() == Some(&token);
                if repeats_last {
                    // Same prefix: the frame extends the existing emission.
                    let entry = next.entry(prefix.clone()).or_insert(PrefixMass {
                        blank: neg,
                        non_blank: neg,
                        lm_logp: mass.lm_logp,
                    });
                    entry.non_blank = log_add(entry.non_blank, mass.non_blank + token_lp);
                    // New emission only after an intervening blank.
                    if mass.blank != neg {
                        let mut extended = prefix.clone();
                        extended.push(token);
                        let lm_logp = mass.lm_logp
                            + lm.map_or(0.0, |scorer| scorer.log_prob(prefix, token));
                        let entry = next.entry(extended).or_insert(PrefixMass {
                            blank: neg,
                            non_blank: neg,
                            lm_logp,
                        });
                        entry.non_blank = log_add(entry.non_blank, mass.blank + token_lp);
                    }
                } else {
                    let mut extended = prefix.clone();
                    extended.push(token);
                    let lm_logp =
                        mass.lm_logp + lm.map_or(0.0, |scorer| scorer.log_prob(prefix, token));
                    let entry = next.entry(extended).or_insert(PrefixMass {
                        blank: neg,
                        non_blank: neg,
                        lm_logp,
                    });
                    entry.non_blank = log_add(entry.non_blank, mass.total() + token_lp);
                }
            }
        }
        // Prune to the beam width by fused score; ties resolved by the
        // BTreeMap's ascending prefix order, which is total.
        let mut scored: Vec<(Vec<TokenId>, PrefixMass)> = next.into_iter().collect();
        scored.sort_by(|a, b| {
            fused(&b.1, b.0.len())
                .partial_cmp(&fused(&a.1, a.0.len()))
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.cmp(&b.0))
        });
        scored.truncate(config.beam_width);
        beams = scored.into_iter().collect();
    }

    let mut hyps: Vec<DecodeHypothesis> = beams
        .into_iter()
        .filter(|(_, mass)| mass.total() != neg)
        .map(|(tokens, mass)| DecodeHypothesis {
            fused_score: fused(&mass, tokens.len()),
            acoustic_logp: mass.total(),
            lm_logp: mass.lm_logp,
            tokens,
        })
        .collect();
    rank_hypotheses(&mut hyps);
    hyps.truncate(config.beam_width);
    hyps
}
