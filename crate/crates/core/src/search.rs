//! Hypothesis types and autoregressive beam search.
//!
//! The beam serves every decoder that emits tokens left to right conditioned
//! on some context (attention decoder, prefix-coupled LM, cross-attention
//! LM). Scorers carry incremental state (K/V caches) per beam, so a step
//! costs one decoder row rather than a full forward. CTC prefix beam search
//! lives in the ctc module and shares the hypothesis type and ranking rules.

use crate::lm::TokenId;

/// A ranked transcription candidate.
///
/// `fused_score` is what lists are sorted by (descending). For CTC fusion it
/// decomposes exactly as `acoustic_logp + alpha * lm_logp + beta * len`; for
/// autoregressive decoders it is the length-normalized model log-probability
/// and `lm_logp` is zero.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeHypothesis {
    pub tokens: Vec<TokenId>,
    pub acoustic_logp: f64,
    pub lm_logp: f64,
    pub fused_score: f64,
}

/// Total order for ranking: fused score descending, then token sequence
/// ascending so exact ties are deterministic.
pub fn rank_hypotheses(hyps: &mut Vec<DecodeHypothesis>) {
    hyps.sort_by(|a, b| {
        b.fused_score
            .partial_cmp(&a.fused_score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
}

/// Stateful autoregressive scorer. `initial` yields the state after the
/// conditioning context (BOS, pseudo-token prefix, encoder memory) along
/// with log-probabilities for the first emitted token; `advance` consumes
/// one token.
pub trait BeamScorer {
    type State: Clone;
    fn initial(&mut self) -> (Self::State, Vec<f64>);
    fn advance(&mut self, state: &Self::State, token: TokenId) -> (Self::State, Vec<f64>);
}

#[derive(Debug, Clone)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub max_len: usize,
    pub length_norm_power: f64,
    pub eos: TokenId,
    /// Ids that must never be proposed (reserved ids other than EOS).
    pub forbidden: Vec<TokenId>,
}

struct Beam<St> {
    tokens: Vec<TokenId>,
    logp: f64,
    state: St,
    dist: Vec<f64>,
}

/// Beam search over an autoregressive scorer.
///
/// Hypotheses leave the active beam when they emit EOS and wait in a
/// finished pool whose scores are final; remaining actives are closed out at
/// `max_len`. Ranking is by logp / len^power where len counts emitted tokens
/// (EOS excluded, minimum 1).
pub fn ar_beam_search<S: BeamScorer>(
    scorer: &mut S,
    config: &BeamConfig,
) -> Vec<DecodeHypothesis> {
    assert!(config.beam_width >= 1, "beam_width must be >= 1");
    let normalize = |logp: f64, len: usize| -> f64 {
        logp / (len.max(1) as f64).powf(config.length_norm_power)
    };
    let (state0, dist0) = scorer.initial();
    let mut active: Vec<Beam<S::State>> = vec![Beam {
        tokens: Vec::new(),
        logp: 0.0,
        state: state0,
        dist: dist0,
    }];
    let mut finished: Vec<DecodeHypothesis> = Vec::new();

    for _ in 0..config.max_len {
        // Candidate extensions of every active beam, scored from the
        // distribution each beam already carries.
        let mut candidates: Vec<(usize, TokenId, Vec<TokenId>, f64)> = Vec::new();
        for (bi, beam) in active.iter().enumerate() {
            for (id, &token_lp) in beam.dist.iter().enumerate() {
                let id = id as TokenId;
                if config.forbidden.contains(&id) || token_lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = beam.tokens.clone();
                tokens.push(id);
                candidates.push((bi, id, tokens, beam.logp + token_lp));
            }
        }
        candidates.sort_by(|a, b| {
            b.3.partial_cmp(&a.3)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.2.cmp(&b.2))
        });
        candidates.truncate(config.beam_width);

        let mut next_active: Vec<Beam<S::State>> = Vec::new();
        for (bi, token, tokens, logp) in candidates {
            if token == config.eos {
                let emitted = tokens[..tokens.len() - 1].to_vec();
                finished.push(DecodeHypothesis {
                    fused_score: normalize(logp, emitted.len()),
                    acoustic_logp: logp,
                    lm_logp: 0.0,
                    tokens: emitted,
                });
            } else {
                let (state, dist) = scorer.advance(&active[bi].state, token);
                next_active.push(Beam {
                    tokens,
                    logp,
                    state,
                    dist,
                });
            }
        }
        active = next_active;
        if active.is_empty() {
            break;
        }
    }
    // Close out hypotheses that hit the length cap without EOS.
    for beam in active {
        finished.push(DecodeHypothesis {
            fused_score: normalize(beam.logp, beam.tokens.len()),
            acoustic_logp: beam.logp,
            lm_logp: 0.0,
            tokens: beam.tokens,
        });
    }
    rank_hypotheses(&mut finished);
    finished.truncate(config.beam_width);
    finished
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed two-step conditional distribution over {0=eos, 1, 2}: a 9-leaf
    /// tree whose path scores are enumerable by hand.
    struct ToyTree;

    impl ToyTree {
        fn table(prefix: &[TokenId]) -> [f64; 3] {
            match prefix {
                [] => [0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()],
                [1] => [0.6f64.ln(), 0.3f64.ln(), 0.1f64.ln()],
                [2] => [0.1f64.ln(), 0.2f64.ln(), 0.7f64.ln()],
                // After two emissions everything ends.
                _ => [0.0, f64::NEG_INFINITY, f64::NEG_INFINITY],
            }
        }
    }

    impl BeamScorer for ToyTree {
        type State = Vec<TokenId>;
        fn initial(&mut self) -> (Vec<TokenId>, Vec<f64>) {
            (Vec::new(), Self::table(&[]).to_vec())
        }
        fn advance(&mut self, state: &Vec<TokenId>, token: TokenId) -> (Vec<TokenId>, Vec<f64>) {
            let mut next = state.clone();
            next.push(token);
            let dist = Self::table(&next).to_vec();
            (next, dist)
        }
    }

    fn enumerate_toy() -> Vec<(Vec<TokenId>, f64)> {
        let mut leaves = Vec::new();
        let first = ToyTree::table(&[]);
        for a in 0u32..3 {
            let pa = first[a as usize];
            if a == 0 {
                leaves.push((vec![], pa));
                continue;
            }
            let second = ToyTree::table(&[a]);
            for b in 0u32..3 {
                let pb = second[b as usize];
                if b == 0 {
                    leaves.push((vec![a], pa + pb));
                } else {
                    // Third step is forced EOS with logp 0.
                    leaves.push((vec![a, b], pa + pb));
                }
            }
        }
        leaves
    }

    #[test]
    fn beam_matches_enumeration_on_toy_tree() {
        let config = BeamConfig {
            beam_width: 16,
            max_len: 3,
            length_norm_power: 0.0,
            eos: 0,
            forbidden: vec![],
        };
        let hyps = ar_beam_search(&mut ToyTree, &config);
        let mut expect = enumerate_toy();
        expect.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        assert_eq!(hyps.len(), expect.len().min(16));
        for (h, (tokens, logp)) in hyps.iter().zip(expect.iter()) {
            assert_eq!(&h.tokens, tokens, "ranking mismatch");
            assert!((h.fused_score - logp).abs() < 1e-12);
        }
        // Hand check of the top: p(1, eos) = 0.5 * 0.6 = 0.30 beats
        // p(2,2,eos) = 0.3 * 0.7 * 1.0 = 0.21 and p(eos) = 0.2.
        assert_eq!(hyps[0].tokens, vec![1]);
        assert!((hyps[0].fused_score - (0.5f64 * 0.6).ln()).abs() < 1e-12);
    }

    #[test]
    fn beam_width_one_is_greedy() {
        let config = BeamConfig {
            beam_width: 1,
            max_len: 3,
            length_norm_power: 0.0,
            eos: 0,
            forbidden: vec![],
        };
        let hyps = ar_beam_search(&mut ToyTree, &config);
        assert_eq!(hyps.len(), 1);
        // Greedy: argmax step 1 -> token 1 (0.5); argmax step 2 -> eos (0.6).
        assert_eq!(hyps[0].tokens, vec![1]);
    }

    #[test]
    fn max_len_one_caps_hypothesis_length() {
        let config = BeamConfig {
            beam_width: 4,
            max_len: 1,
            length_norm_power: 0.0,
            eos: 0,
            forbidden: vec![],
        };
        let hyps = ar_beam_search(&mut ToyTree, &config);
        assert!(hyps.iter().all(|h| h.tokens.len() <= 1));
    }

    #[test]
    fn forbidden_ids_never_emitted() {
        let config = BeamConfig {
            beam_width: 8,
            max_len: 3,
            length_norm_power: 0.0,
            eos: 0,
            forbidden: vec![2],
        };
        let hyps = ar_beam_search(&mut ToyTree, &config);
        assert!(!hyps.is_empty());
        assert!(hyps.iter().all(|h| !h.tokens.contains(&2)));
    }

    #[test]
    fn normalized_scores_recompute_from_parts() {
        for power in [0.0, 0.6, 1.0] {
            let config = BeamConfig {
                beam_width: 16,
                max_len: 3,
                length_norm_power: power,
                eos: 0,
                forbidden: vec![],
            };
            let hyps = ar_beam_search(&mut ToyTree, &config);
            for h in &hyps {
                let n = (h.tokens.len().max(1)) as f64;
                assert!((h.fused_score - h.acoustic_logp / n.powf(power)).abs() < 1e-12);
            }
        }
    }
}
