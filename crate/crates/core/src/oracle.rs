//! Exhaustive reference implementations.
//!
//! Everything here exists to check the real implementations from an
//! independent direction: enumeration over all CTC alignment paths,
//! plain-recursion edit distance, and grammar membership by memoized span
//! derivation. Test suites freeze expected values computed by these
//! functions; nothing in this module shares code with the paths it checks.

use std::collections::BTreeMap;

use crate::tensor::{log_add, Tensor2D};

/// Collapse a frame path (class ids, 0 = blank): merge adjacent repeats,
/// then drop blanks.
pub fn collapse_path(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &c in path {
        if c != prev && c != 0 {
            out.push(c);
        }
        prev = c;
    }
    out
}

/// Enumerate all |C|^T frame paths of a posterior grid and accumulate the
/// total log-probability of every collapsed labeling.
pub fn ctc_enumerate_labelings(logp: &Tensor2D) -> BTreeMap<Vec<usize>, f64> {
    let frames = logp.rows();
    let classes = logp.cols();
    let mut totals: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    let mut path = vec![0usize; frames];
    loop {
        let mut lp = 0.0;
        for (t, &c) in path.iter().enumerate() {
            lp += logp.at(t, c);
        }
        let labeling = collapse_path(&path);
        totals
            .entry(labeling)
            .and_modify(|acc| *acc = log_add(*acc, lp))
            .or_insert(lp);
        // Odometer increment.
        let mut i = 0;
        loop {
            if i == frames {
                return totals;
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Brute-force CTC loss: -log of the enumerated mass of `reference`.
pub fn ctc_loss_by_enumeration(logp: &Tensor2D, reference: &[usize]) -> f64 {
    ctc_enumerate_labelings(logp)
        .get(reference)
        .map(|lp| -lp)
        .unwrap_or(f64::INFINITY)
}

/// Most probable collapsed labeling with the same tie-break as the decoder:
/// probability descending, then labeling ascending.
pub fn ctc_best_labeling_by_enumeration(logp: &Tensor2D) -> (Vec<usize>, f64) {
    let totals = ctc_enumerate_labelings(logp);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for (labeling, lp) in totals {
        match &best {
            None => best = Some((labeling, lp)),
            Some((b_lab, b_lp)) => {
                if lp > *b_lp || (lp == *b_lp && labeling < *b_lab) {
                    best = Some((labeling, lp));
                }
            }
        }
    }
    best.expect("at least the empty labeling exists")
}

/// Grammar membership by memoized span derivation: can `symbol` derive
/// exactly `words[lo..hi]`? Independent of the generative sampler.
fn derives_span(
    grammar: &crate::corpus::Grammar,
    symbol: &str,
    words: &[&str],
    lo: usize,
    hi: usize,
    memo: &mut BTreeMap<(String, usize, usize), bool>,
) -> bool {
    match grammar.rules.get(symbol) {
        None => hi - lo == 1 && words[lo] == symbol,
        Some(prods) => {
            let key = (symbol.to_string(), lo, hi);
            if let Some(&cached) = memo.get(&key) {
                return cached;
            }
            // Seed false to cut cycles; grammars here are acyclic anyway.
            memo.insert(key.clone(), false);
            let mut ok = false;
            'prods: for prod in prods {
                // Split the span across the production's symbols.
                fn split_rec(
                    grammar: &crate::corpus::Grammar,
                    syms: &[String],
                    words: &[&str],
                    lo: usize,
                    hi: usize,
                    memo: &mut BTreeMap<(String, usize, usize), bool>,
                ) -> bool {
                    match syms {
                        [] => lo == hi,
                        [first, rest @ ..] => {
                            for mid in lo + 1..=hi.saturating_sub(rest.len()).max(lo) {
                                if derives_span(grammar, first, words, lo, mid, memo)
                                    && split_rec(grammar, rest, words, mid, hi, memo)
                                {
                                    return true;
                                }
                            }
                            false
                        }
                    }
                }
                if split_rec(grammar, prod, words, lo, hi, memo) {
                    ok = true;
                    break 'prods;
                }
            }
            memo.insert(key, ok);
            ok
        }
    }
}

/// Whether `sentence` (whitespace-separated words) is in the grammar's
/// language.
pub fn grammar_derives_sentence(grammar: &crate::corpus::Grammar, sentence: &str) -> bool {
    let words: Vec<&str> = sentence.split_whitespace().collect();
    if words.is_empty() {
        return false;
    }
    let mut memo = BTreeMap::new();
    derives_span(grammar, &grammar.start, &words, 0, words.len(), &mut memo)
}

/// Plain-recursion Levenshtein distance (unit costs), exponential time.
pub fn edit_distance_by_recursion<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let sub_cost = usize::from(a[0] != b[0]);
    let sub = edit_distance_by_recursion(&a[1..], &b[1..]) + sub_cost;
    let del = edit_distance_by_recursion(&a[1..], b) + 1;
    let ins = edit_distance_by_recursion(a, &b[1..]) + 1;
    sub.min(del).min(ins)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapse_merges_repeats_then_drops_blanks() {
        assert_eq!(collapse_path(&[1, 1, 0, 1, 2]), vec![1, 1, 2]);
        assert_eq!(collapse_path(&[1, 0, 1]), vec![1, 1]);
        assert_eq!(collapse_path(&[0, 0, 0]), Vec::<usize>::new());
    }

    #[test]
    fn enumeration_mass_totals_one() {
        // Any normalized grid: summed mass over all labelings is 1.
        let mut rng = crate::rng::Rng::new(3);
        let mut logits = Tensor2D::from_fn(3, 3, |_, _| rng.gaussian());
        for r in 0..3 {
            let lse = crate::tensor::log_sum_exp(logits.row(r));
            for c in 0..3 {
                *logits.at_mut(r, c) -= lse;
            }
        }
        let totals = ctc_enumerate_labelings(&logits);
        let mass: f64 = totals.values().map(|lp| lp.exp()).sum();
        assert!((mass - 1.0).abs() < 1e-10, "mass {mass}");
    }

    #[test]
    fn grammar_membership_accepts_and_rejects() {
        let g = crate::corpus::Grammar::default_grammar();
        assert!(grammar_derives_sentence(&g, "the hotel owner shrugged"));
        assert!(grammar_derives_sentence(&g, "a quiet dog slept"));
        assert!(!grammar_derives_sentence(&g, "shrugged the hotel"));
        assert!(!grammar_derives_sentence(&g, "the the the"));
        assert!(!grammar_derives_sentence(&g, ""));
    }

    #[test]
    fn recursion_edit_distance_small_cases() {
        assert_eq!(edit_distance_by_recursion(b"abc", b"abc"), 0);
        assert_eq!(edit_distance_by_recursion(b"abc", b"axc"), 1);
        assert_eq!(edit_distance_by_recursion(b"abc", b""), 3);
        assert_eq!(edit_distance_by_recursion(b"kitten", b"sitting"), 3);
    }
}
