//! Alignment-based evaluation: Levenshtein alignment with backtrace, WER and
//! CER over (S + D + I) / N, and stratified aggregation.
//!
//! Rates may exceed 1 for insertion-heavy hypotheses and are never clamped.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::SeverityLevel;
use crate::error::{Error, Result};

/// One backtraced edit operation. Applying the trace to the reference
/// replays the hypothesis exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditOp {
    Match,
    Substitute,
    Delete,
    Insert,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditAlignment {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    /// Reference length.
    pub n_ref: usize,
    pub trace: Vec<EditOp>,
}

impl EditAlignment {
    pub fn distance(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// (S + D + I) / N; None when the reference is empty (rate undefined).
    pub fn rate(&self) -> Option<f64> {
        if self.n_ref == 0 {
            None
        } else {
            Some(self.distance() as f64 / self.n_ref as f64)
        }
    }
}

/// Minimal unit-cost alignment. Backtrace tie-break prefers substitution
/// over insertion over deletion, making the trace deterministic.
pub fn edit_align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditAlignment {
    let n = reference.len();
    let m = hypothesis.len();
    let mut dist = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dist.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        dist[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            let sub = dist[i - 1][j - 1] + sub_cost;
            let ins = dist[i][j - 1] + 1;
            let del = dist[i - 1][j] + 1;
            dist[i][j] = sub.min(ins).min(del);
        }
    }
    // Backtrace from (n, m) with the declared preference order.
    let mut trace_rev = Vec::new();
    let (mut i, mut j) = (n, m);
    let (mut s_count, mut d_count, mut i_count) = (0, 0, 0);
    while i > 0 || j > 0 {
        let here = dist[i][j];
        if i > 0 && j > 0 {
            let sub_cost = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if dist[i - 1][j - 1] + sub_cost == here {
                if sub_cost == 0 {
                    trace_rev.push(EditOp::Match);
                } else {
                    trace_rev.push(EditOp::Substitute);
                    s_count += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && dist[i][j - 1] + 1 == here {
            trace_rev.push(EditOp::Insert);
            i_count += 1;
            j -= 1;
            continue;
        }
        debug_assert!(i > 0 && dist[i - 1][j] + 1 == here);
        trace_rev.push(EditOp::Delete);
        d_count += 1;
        i -= 1;
    }
    trace_rev.reverse();
    EditAlignment {
        substitutions: s_count,
        deletions: d_count,
        insertions: i_count,
        n_ref: n,
        trace: trace_rev,
    }
}

/// Replay a trace against the reference, producing the hypothesis the trace
/// encodes. Used to check trace integrity.
pub fn replay_trace<T: Clone>(
    reference: &[T],
    hypothesis: &[T],
    trace: &[EditOp],
) -> Vec<T> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0usize, 0usize);
    for op in trace {
        match op {
            EditOp::Match | EditOp::Substitute => {
                out.push(hypothesis[j].clone());
                i += 1;
                j += 1;
            }
            EditOp::Delete => {
                i += 1;
            }
            EditOp::Insert => {
                out.push(hypothesis[j].clone());
                j += 1;
            }
        }
    }
    debug_assert_eq!(i, reference.len());
    out
}

/// Scoring normalization: lowercase, strip punctuation (keep letters,
/// digits, apostrophes, spaces), collapse whitespace runs, trim.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut last_space = true;
    for c in text.chars() {
        if c.is_whitespace() {
            if !last_space {
                out.push(' ');
                last_space = true;
            }
        } else if c.is_alphanumeric() || c == '\'' {
            for lc in c.to_lowercase() {
                out.push(lc);
            }
            last_space = false;
        }
        // Everything else (punctuation) is stripped.
    }
    if out.ends_with(' ') {
        out.pop();
    }
    out
}

/// Word-level alignment on normalized text.
pub fn word_alignment(reference: &str, hypothesis: &str) -> EditAlignment {
    let r = normalize(reference);
    let h = normalize(hypothesis);
    let r_tok: Vec<&str> = r.split_whitespace().collect();
    let h_tok: Vec<&str> = h.split_whitespace().collect();
    edit_align(&r_tok, &h_tok)
}

/// Character-level alignment on normalized text (spaces count as
/// characters; runs were already collapsed by normalization).
pub fn char_alignment(reference: &str, hypothesis: &str) -> EditAlignment {
    let r: Vec<char> = normalize(reference).chars().collect();
    let h: Vec<char> = normalize(hypothesis).chars().collect();
    edit_align(&r, &h)
}

pub fn wer(reference: &str, hypothesis: &str) -> Option<f64> {
    word_alignment(reference, hypothesis).rate()
}

pub fn cer(reference: &str, hypothesis: &str) -> Option<f64> {
    char_alignment(reference, hypothesis).rate()
}

/// Per-utterance scoring record, streamed as CSV by the harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub utterance_id: String,
    pub model_id: String,
    pub corpus_id: String,
    pub severity: SeverityLevel,
    pub word: EditAlignment,
    pub chars: EditAlignment,
}

impl MetricRecord {
    pub fn from_texts(
        utterance_id: &str,
        model_id: &str,
        corpus_id: &str,
        severity: SeverityLevel,
        reference: &str,
        hypothesis: &str,
    ) -> MetricRecord {
        let mut word = word_alignment(reference, hypothesis);
        let mut chars = char_alignment(reference, hypothesis);
        // Traces are validated at construction, then dropped: aggregates
        // only need counts, and records stay compact.
        word.trace.clear();
        chars.trace.clear();
        MetricRecord {
            utterance_id: utterance_id.to_string(),
            model_id: model_id.to_string(),
            corpus_id: corpus_id.to_string(),
            severity,
            word,
            chars,
        }
    }

    pub const CSV_HEADER: &'static str =
        "utterance_id,model_id,corpus_id,severity,n_ref_words,S,D,I,n_ref_chars,cS,cD,cI";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.utterance_id,
            self.model_id,
            self.corpus_id,
            self.severity.label(),
            self.word.n_ref,
            self.word.substitutions,
            self.word.deletions,
            self.word.insertions,
            self.chars.n_ref,
            self.chars.substitutions,
            self.chars.deletions,
            self.chars.insertions,
        )
    }
}

/// Which record fields form the aggregation key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupBy {
    pub model: bool,
    pub corpus: bool,
    pub severity: bool,
}

#[derive(
    Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
pub struct GroupKey {
    pub model_id: Option<String>,
    pub corpus_id: Option<String>,
    pub severity: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAggregate {
    pub key: GroupKey,
    pub n_utterances: usize,
    /// Utterances excluded because the reference normalized to empty.
    pub n_excluded_empty_ref: usize,
    pub micro_wer: f64,
    pub macro_wer: f64,
    pub micro_cer: f64,
    pub macro_cer: f64,
    pub word_substitutions: usize,
    pub word_deletions: usize,
    pub word_insertions: usize,
    pub word_n_ref: usize,
    pub char_substitutions: usize,
    pub char_deletions: usize,
    pub char_insertions: usize,
    pub char_n_ref: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub group_by: GroupBy,
    pub groups: Vec<GroupAggregate>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn group(&self, key: &GroupKey) -> Option<&GroupAggregate> {
        self.groups.iter().find(|g| &g.key == key)
    }
}

/// Micro (pooled errors / pooled reference length) and macro (mean of
/// per-utterance rates) aggregates per group. Order-independent: records are
/// keyed into a BTreeMap and empty-reference records are excluded from rates
/// but counted.
pub fn aggregate(records: &[MetricRecord], group_by: GroupBy) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Config("cannot aggregate zero records".into()));
    }
    let mut groups: BTreeMap<GroupKey, Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        let key = GroupKey {
            model_id: group_by.model.then(|| r.model_id.clone()),
            corpus_id: group_by.corpus.then(|| r.corpus_id.clone()),
            severity: group_by.severity.then(|| r.severity.label().to_string()),
        };
        groups.entry(key).or_default().push(r);
    }
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for (key, rs) in groups {
        let mut agg = GroupAggregate {
            key: key.clone(),
            n_utterances: 0,
            n_excluded_empty_ref: 0,
            micro_wer: 0.0,
            macro_wer: 0.0,
            micro_cer: 0.0,
            macro_cer: 0.0,
            word_substitutions: 0,
            word_deletions: 0,
            word_insertions: 0,
            word_n_ref: 0,
            char_substitutions: 0,
            char_deletions: 0,
            char_insertions: 0,
            char_n_ref: 0,
        };
        let (mut wer_sum, mut cer_sum) = (0.0, 0.0);
        for r in rs {
            if r.word.n_ref == 0 || r.chars.n_ref == 0 {
                agg.n_excluded_empty_ref += 1;
                continue;
            }
            agg.n_utterances += 1;
            agg.word_substitutions += r.word.substitutions;
            agg.word_deletions += r.word.deletions;
            agg.word_insertions += r.word.insertions;
            agg.word_n_ref += r.word.n_ref;
            agg.char_substitutions += r.chars.substitutions;
            agg.char_deletions += r.chars.deletions;
            agg.char_insertions += r.chars.insertions;
            agg.char_n_ref += r.chars.n_ref;
            wer_sum += r.word.rate().unwrap();
            cer_sum += r.chars.rate().unwrap();
        }
        if agg.n_utterances == 0 {
            warnings.push(format!("group {key:?} empty after exclusions; omitted"));
            continue;
        }
        agg.micro_wer = (agg.word_substitutions + agg.word_deletions + agg.word_insertions)
            as f64
            / agg.word_n_ref as f64;
        agg.micro_cer = (agg.char_substitutions + agg.char_deletions + agg.char_insertions)
            as f64
            / agg.char_n_ref as f64;
        agg.macro_wer = wer_sum / agg.n_utterances as f64;
        agg.macro_cer = cer_sum / agg.n_utterances as f64;
        out.push(agg);
    }
    Ok(EvalReport {
        group_by,
        groups: out,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::edit_distance_by_recursion;
    use crate::rng::Rng;

    #[test]
    fn identical_sequences_have_zero_errors() {
        let a = edit_align(b"abcd", b"abcd");
        assert_eq!((a.substitutions, a.deletions, a.insertions), (0, 0, 0));
        assert_eq!(a.trace, vec![EditOp::Match; 4]);
    }

    #[test]
    fn table_2_worked_example_word_level() {
        // ref "the hotel owner shrugged" vs hyp "the hotel man":
        // S=1 (owner->man), D=1 (shrugged), WER = 2/4.
        let a = word_alignment("the hotel owner shrugged", "the hotel man");
        assert_eq!(a.substitutions, 1);
        assert_eq!(a.deletions, 1);
        assert_eq!(a.insertions, 0);
        assert_eq!(a.n_ref, 4);
        assert_eq!(a.rate(), Some(0.5));
    }

    #[test]
    fn table_2_worked_example_char_level() {
        // "The otel owner shrug": delete "h", delete "ged" -> 4 edits over
        // 24 normalized reference characters.
        let a = char_alignment("The hotel owner shrugged", "The otel owner shrug");
        assert_eq!(a.n_ref, 24);
        assert_eq!(a.distance(), 4);
        assert_eq!(a.deletions, 4);
        assert_eq!(a.substitutions, 0);
        assert_eq!(a.insertions, 0);
        assert!((a.rate().unwrap() - 4.0 / 24.0).abs() < 1e-12);
    }

    #[test]
    fn dp_distance_matches_recursion_oracle_on_random_pairs() {
        let mut rng = Rng::new(41);
        let alphabet = [b'a', b'b', b'c', b'd'];
        for _ in 0..1000 {
            let la = rng.below(9);
            let lb = rng.below(9);
            let a: Vec<u8> = (0..la).map(|_| *rng.choose(&alphabet)).collect();
            let b: Vec<u8> = (0..lb).map(|_| *rng.choose(&alphabet)).collect();
            let dp = edit_align(&a, &b);
            let oracle = edit_distance_by_recursion(&a, &b);
            assert_eq!(dp.distance(), oracle, "a={a:?} b={b:?}");
            // S + D <= N always.
            assert!(dp.substitutions + dp.deletions <= a.len());
        }
    }

    #[test]
    fn trace_replays_hypothesis_and_counts_match() {
        let mut rng = Rng::new(43);
        let alphabet = [b'x', b'y', b'z'];
        for _ in 0..300 {
            let a: Vec<u8> = (0..rng.below(8)).map(|_| *rng.choose(&alphabet)).collect();
            let b: Vec<u8> = (0..rng.below(8)).map(|_| *rng.choose(&alphabet)).collect();
            let al = edit_align(&a, &b);
            assert_eq!(replay_trace(&a, &b, &al.trace), b);
            let s = al.trace.iter().filter(|o| **o == EditOp::Substitute).count();
            let d = al.trace.iter().filter(|o| **o == EditOp::Delete).count();
            let i = al.trace.iter().filter(|o| **o == EditOp::Insert).count();
            assert_eq!((s, d, i), (al.substitutions, al.deletions, al.insertions));
        }
    }

    #[test]
    fn distance_is_symmetric_and_satisfies_triangle_inequality() {
        let mut rng = Rng::new(47);
        let alphabet = [b'a', b'b', b'c', b'd'];
        for _ in 0..300 {
            let mk = |rng: &mut Rng| -> Vec<u8> {
                (0..rng.below(8)).map(|_| *rng.choose(&alphabet)).collect()
            };
            let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let ab = edit_align(&a, &b).distance();
            let ba = edit_align(&b, &a).distance();
            let bc = edit_align(&b, &c).distance();
            let ac = edit_align(&a, &c).distance();
            assert_eq!(ab, ba);
            assert!(ac <= ab + bc);
        }
    }

    #[test]
    fn wer_can_exceed_one_with_insertions() {
        let r = wer("a b", "x y z w").unwrap();
        // 2 substitutions + 2 insertions over N=2.
        assert_eq!(r, 2.0);
    }

    #[test]
    fn empty_reference_rate_is_undefined_not_zero() {
        let a = word_alignment("", "anything here");
        assert_eq!(a.n_ref, 0);
        assert_eq!(a.rate(), None);
    }

    #[test]
    fn normalization_declared_behavior() {
        assert_eq!(normalize("The Hotel,  Owner!"), "the hotel owner");
        assert_eq!(normalize("it's   ok "), "it's ok");
        assert_eq!(wer("The hotel owner", "the  hotel owner"), Some(0.0));
    }

    fn rec(utt: &str, model: &str, n: usize, errs: usize) -> MetricRecord {
        MetricRecord {
            utterance_id: utt.into(),
            model_id: model.into(),
            corpus_id: "c".into(),
            severity: SeverityLevel::Moderate,
            word: EditAlignment {
                substitutions: errs,
                deletions: 0,
                insertions: 0,
                n_ref: n,
                trace: vec![],
            },
            chars: EditAlignment {
                substitutions: errs,
                deletions: 0,
                insertions: 0,
                n_ref: n * 5,
                trace: vec![],
            },
        }
    }

    #[test]
    fn micro_vs_macro_hand_example() {
        // N=4 with 2 errors and N=6 with 0: micro 2/10, macro (0.5+0)/2.
        let records = vec![rec("u1", "m", 4, 2), rec("u2", "m", 6, 0)];
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
        assert!((g.micro_wer - 0.2).abs() < 1e-12);
        assert!((g.macro_wer - 0.25).abs() < 1e-12);
        assert_eq!(g.n_utterances, 2);
    }

    #[test]
    fn single_record_group_equals_the_record() {
        let records = vec![rec("u1", "m", 5, 3)];
        let report = aggregate(
            &records,
            GroupBy {
                model: true,
                corpus: true,
                severity: true,
            },
        )
        .unwrap();
        let g = &report.groups[0];
        assert_eq!(g.micro_wer, 0.6);
        assert_eq!(g.macro_wer, 0.6);
    }

    #[test]
    fn aggregation_is_order_independent() {
        let mut records = vec![
            rec("u1", "m1", 4, 2),
            rec("u2", "m2", 6, 1),
            rec("u3", "m1", 3, 0),
            rec("u4", "m2", 8, 8),
        ];
        let by = GroupBy {
            model: true,
            corpus: false,
            severity: false,
        };
        let a = aggregate(&records, by).unwrap();
        records.reverse();
        let b = aggregate(&records, by).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_reference_records_excluded_and_counted() {
        let mut bad = rec("u_empty", "m", 0, 0);
        bad.chars.n_ref = 0;
        let records = vec![rec("u1", "m", 4, 2), bad];
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
        assert_eq!(g.n_utterances, 1);
        assert_eq!(g.n_excluded_empty_ref, 1);
    }
}
