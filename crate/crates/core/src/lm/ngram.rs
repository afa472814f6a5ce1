//! Character-level n-gram language model with interpolated Kneser-Ney
//! smoothing, used as the shallow-fusion scorer.
//!
//! The distribution at every context covers the 28 character units plus EOS
//! and sums to 1 exactly: stored probabilities are the interpolated values
//! and the per-context backoff weight equals the interpolation weight, so
//! the usual ARPA-style algebra closes.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use super::{TokenId, Tokenizer, BOS, EOS};
use crate::ctc::LmScorer;
use crate::error::{Error, Result};

const DISCOUNT: f64 = 0.75;

#[derive(Debug, Clone, Default)]
struct ContextEntry {
    /// token -> ln P_interp(token | context)
    probs: BTreeMap<TokenId, f64>,
    /// ln lambda(context)
    log_backoff: f64,
}

#[derive(Debug, Clone)]
pub struct NGramLm {
    pub order: usize,
    /// tables[k-1]: order-k contexts (length k-1) -> entry.
    tables: Vec<BTreeMap<Vec<TokenId>, ContextEntry>>,
    /// Raw highest-order counts for the unsmoothed MLE test mode.
    raw_counts: BTreeMap<Vec<TokenId>, u64>,
    vocab: Vec<TokenId>,
}

fn lower_order_prob(
    tables: &[BTreeMap<Vec<TokenId>, ContextEntry>],
    k: usize,
    context: &[TokenId],
    token: TokenId,
) -> f64 {
    if k == 1 {
        return tables[0]
            .get(&Vec::new())
            .expect("unigram table present")
            .probs[&token]
            .exp();
    }
    match tables[k - 1].get(context) {
        Some(entry) => match entry.probs.get(&token) {
            Some(&lp) => lp.exp(),
            None => {
                entry.log_backoff.exp() * lower_order_prob(tables, k - 1, &context[1..], token)
            }
        },
        None => lower_order_prob(tables, k - 1, &context[1..], token),
    }
}

impl NGramLm {
    /// Train with interpolated Kneser-Ney: raw counts at the top order,
    /// continuation counts below, uniform interpolation at the unigram base.
    pub fn train(corpus: &[String], order: usize) -> Result<NGramLm> {
        if corpus.is_empty() {
            return Err(Error::Config("n-gram corpus must be nonempty".into()));
        }
        if !(1..=5).contains(&order) {
            return Err(Error::Config(format!("n-gram order {order} outside 1..=5")));
        }
        let tokenizer = Tokenizer::new();
        let mut vocab = tokenizer.unit_ids();
        vocab.push(EOS);

        // Raw k-gram counts for every order.
        let mut counts: Vec<BTreeMap<Vec<TokenId>, u64>> = vec![BTreeMap::new(); order];
        for line in corpus {
            let mut seq = vec![BOS; order.saturating_sub(1)];
            seq.extend(tokenizer.encode(line)?);
            seq.push(EOS);
            for k in 1..=order {
                for w in seq.windows(k) {
                    // Grams ending in BOS are padding artifacts.
                    if *w.last().unwrap() == BOS {
                        continue;
                    }
                    *counts[k - 1].entry(w.to_vec()).or_insert(0) += 1;
                }
            }
        }

        // Effective counts per order: raw at the top, continuation below
        // (distinct predecessors of the suffix k-gram).
        let mut effective: Vec<BTreeMap<Vec<TokenId>, u64>> = Vec::with_capacity(order);
        for k in 1..=order {
            if k == order {
                effective.push(counts[k - 1].clone());
            } else {
                let mut cont: BTreeMap<Vec<TokenId>, u64> = BTreeMap::new();
                for gram in counts[k].keys() {
                    *cont.entry(gram[1..].to_vec()).or_insert(0) += 1;
                }
                effective.push(cont);
            }
        }

        // Build tables bottom-up so interpolation can consult lower orders.
        let mut tables: Vec<BTreeMap<Vec<TokenId>, ContextEntry>> = Vec::with_capacity(order);
        for k in 1..=order {
            let mut table: BTreeMap<Vec<TokenId>, ContextEntry> = BTreeMap::new();
            let mut by_context: BTreeMap<Vec<TokenId>, Vec<(TokenId, u64)>> = BTreeMap::new();
            for (gram, &cnt) in &effective[k - 1] {
                if cnt == 0 {
                    continue;
                }
                by_context
                    .entry(gram[..k - 1].to_vec())
                    .or_default()
                    .push((gram[k - 1], cnt));
            }
            for (context, toks) in by_context {
                let total: u64 = toks.iter().map(|(_, c)| c).sum();
                let types = toks.len() as f64;
                let total_f = total as f64;
                let lambda = DISCOUNT * types / total_f;
                let mut entry = ContextEntry {
                    probs: BTreeMap::new(),
                    log_backoff: lambda.ln(),
                };
                if k == 1 {
                    // Unigram base: every vocab token gets
                    // max(cnt-D,0)/T + D*types/T * 1/|V|.
                    let uniform = 1.0 / vocab.len() as f64;
                    let seen: BTreeMap<TokenId, u64> = toks.iter().cloned().collect();
                    for &w in &vocab {
                        let c = *seen.get(&w).unwrap_or(&0) as f64;
                        let p = (c - DISCOUNT).max(0.0) / total_f + lambda * uniform;
                        entry.probs.insert(w, p.ln());
                    }
                    entry.log_backoff = 0.0; // nothing below the base
                } else {
                    for (w, cnt) in toks {
                        let low = lower_order_prob(&tables, k - 1, &context[1..], w);
                        let p = ((cnt as f64) - DISCOUNT).max(0.0) / total_f + lambda * low;
                        entry.probs.insert(w, p.ln());
                    }
                }
                table.insert(context, entry);
            }
            tables.push(table);
        }

        Ok(NGramLm {
            order,
            raw_counts: counts[order - 1].clone(),
            tables,
            vocab,
        })
    }

    pub fn vocab(&self) -> &[TokenId] {
        &self.vocab
    }

    /// ln P(token | context) with full backoff. The context may be any
    /// length; only its last order-1 tokens matter.
    pub fn log_prob(&self, context: &[TokenId], token: TokenId) -> Result<f64> {
        if !self.vocab.contains(&token) {
            return Err(Error::Vocab(format!(
                "token {token} is not scoreable (characters and EOS only)"
            )));
        }
        for &t in context {
            if t != BOS && !self.vocab.contains(&t) {
                return Err(Error::Vocab(format!("context token {t} out of vocabulary")));
            }
        }
        let start = context.len().saturating_sub(self.order - 1);
        let mut ctx = vec![BOS; (self.order - 1).saturating_sub(context.len())];
        ctx.extend_from_slice(&context[start..]);
        Ok(self.score_at(self.order, &ctx, token))
    }

    fn score_at(&self, k: usize, context: &[TokenId], token: TokenId) -> f64 {
        if k == 1 {
            let entry = self.tables[0]
                .get(&Vec::new())
                .expect("unigram table always present");
            return entry.probs[&token];
        }
        match self.tables[k - 1].get(context) {
            Some(entry) => match entry.probs.get(&token) {
                Some(&lp) => lp,
                None => entry.log_backoff + self.score_at(k - 1, &context[1..], token),
            },
            // Unseen context: fall through with weight 1.
            None => self.score_at(k - 1, &context[1..], token),
        }
    }

    /// Unsmoothed highest-order count ratio; None when the context was
    /// never observed. Test mode for count-oracle comparisons.
    pub fn mle_log_prob(&self, context: &[TokenId], token: TokenId) -> Option<f64> {
        let n = self.order;
        let start = context.len().saturating_sub(n - 1);
        let mut ctx = vec![BOS; (n - 1).saturating_sub(context.len())];
        ctx.extend_from_slice(&context[start..]);
        let mut gram = ctx.clone();
        gram.push(token);
        let joint = *self.raw_counts.get(&gram)? as f64;
        let ctx_total: u64 = self
            .raw_counts
            .iter()
            .filter(|(g, _)| g[..n - 1] == ctx[..])
            .map(|(_, c)| c)
            .sum();
        if ctx_total == 0 {
            return None;
        }
        Some((joint / ctx_total as f64).ln())
    }

    /// ln P(sentence) including the EOS transition.
    pub fn sentence_log_prob(&self, tokens: &[TokenId]) -> Result<f64> {
        let mut total = 0.0;
        for (i, &t) in tokens.iter().enumerate() {
            total += self.log_prob(&tokens[..i], t)?;
        }
        total += self.log_prob(tokens, EOS)?;
        Ok(total)
    }

    /// Flat text serialization:
    /// `order<TAB>context<TAB>token<TAB>logp<TAB>backoff` per line, where
    /// symbols are space-joined (`<s>`, `</s>`, `<sp>` for the specials).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (k_idx, table) in self.tables.iter().enumerate() {
            let k = k_idx + 1;
            for (context, entry) in table {
                let ctx_str = symbols_to_string(context);
                for (&token, &lp) in &entry.probs {
                    writeln!(
                        f,
                        "{}\t{}\t{}\t{:.17e}\t{:.17e}",
                        k,
                        ctx_str,
                        symbol_name(token),
                        lp,
                        entry.log_backoff
                    )?;
                }
            }
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<NGramLm> {
        let tokenizer = Tokenizer::new();
        let mut vocab = tokenizer.unit_ids();
        vocab.push(EOS);
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut tables: Vec<BTreeMap<Vec<TokenId>, ContextEntry>> = Vec::new();
        let mut max_order = 0;
        for (line_no, line) in f.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let parse_err = |message: String| Error::Parse {
                path: path.display().to_string(),
                line: line_no + 1,
                column: 1,
                message,
            };
            if fields.len() != 5 {
                return Err(parse_err(format!(
                    "expected 5 tab fields, got {}",
                    fields.len()
                )));
            }
            let k: usize = fields[0]
                .parse()
                .map_err(|_| parse_err(format!("bad order {}", fields[0])))?;
            let context = string_to_symbols(fields[1])
                .map_err(|e| parse_err(format!("bad context: {e}")))?;
            let token = name_to_symbol(fields[2])
                .map_err(|e| parse_err(format!("bad token: {e}")))?;
            let lp: f64 = fields[3]
                .parse()
                .map_err(|_| parse_err(format!("bad logp {}", fields[3])))?;
            let backoff: f64 = fields[4]
                .parse()
                .map_err(|_| parse_err(format!("bad backoff {}", fields[4])))?;
            if k == 0 || k > 5 {
                return Err(parse_err(format!("order {k} outside 1..=5")));
            }
            while tables.len() < k {
                tables.push(BTreeMap::new());
            }
            max_order = max_order.max(k);
            let entry = tables[k - 1].entry(context).or_default();
            entry.probs.insert(token, lp);
            entry.log_backoff = backoff;
        }
        if max_order == 0 {
            return Err(Error::Format("empty n-gram table".into()));
        }
        Ok(NGramLm {
            order: max_order,
            tables,
            raw_counts: BTreeMap::new(),
            vocab,
        })
    }
}

impl LmScorer for NGramLm {
    fn log_prob(&self, prefix: &[TokenId], next: TokenId) -> f64 {
        NGramLm::log_prob(self, prefix, next)
            .expect("fusion queries stay inside the scoreable vocabulary")
    }
}

fn symbol_name(t: TokenId) -> String {
    let tokenizer = Tokenizer::new();
    match t {
        BOS => "<s>".to_string(),
        EOS => "</s>".to_string(),
        _ => {
            let s = tokenizer.decode(&[t]);
            if s == " " {
                "<sp>".to_string()
            } else {
                s
            }
        }
    }
}

fn symbols_to_string(ts: &[TokenId]) -> String {
    if ts.is_empty() {
        return "<empty>".to_string();
    }
    ts.iter()
        .map(|&t| symbol_name(t))
        .collect::<Vec<_>>()
        .join(" ")
}

fn name_to_symbol(name: &str) -> std::result::Result<TokenId, String> {
    let tokenizer = Tokenizer::new();
    match name {
        "<s>" => Ok(BOS),
        "</s>" => Ok(EOS),
        "<sp>" => tokenizer
            .encode(" ")
            .map(|v| v[0])
            .map_err(|e| e.to_string()),
        _ => {
            let ids = tokenizer.encode(name).map_err(|e| e.to_string())?;
            if ids.len() != 1 {
                return Err(format!("symbol {name:?} is not a single unit"));
            }
            Ok(ids[0])
        }
    }
}

fn string_to_symbols(s: &str) -> std::result::Result<Vec<TokenId>, String> {
    if s == "<empty>" {
        return Ok(Vec::new());
    }
    s.split(' ').map(name_to_symbol).collect()
}
