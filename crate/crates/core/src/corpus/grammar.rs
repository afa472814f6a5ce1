//! Finite context-free grammar and seeded sentence sampling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grammar {
    pub start: String,
    /// nonterminal -> list of productions, each a sequence of symbol names;
    /// names not present as keys are terminals.
    pub rules: BTreeMap<String, Vec<Vec<String>>>,
}

impl Grammar {
    pub fn is_terminal(&self, symbol: &str) -> bool {
        !self.rules.contains_key(symbol)
    }

    /// The built-in lexicon and sentence shapes. Productions keep sentences
    /// within 2..=8 words and include "the hotel owner shrugged"
    /// (Det N N IV) in the language.
    pub fn default_grammar() -> Grammar {
        let mut rules: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
        let add = |rules: &mut BTreeMap<String, Vec<Vec<String>>>, nt: &str, prods: &[&str]| {
            rules.insert(
                nt.to_string(),
                prods
                    .iter()
                    .map(|p| p.split_whitespace().map(str::to_string).collect())
                    .collect(),
            );
        };
        add(&mut rules, "S", &["NP VP"]);
        add(&mut rules, "NP", &["Det N", "Det Adj N", "Det N N"]);
        add(&mut rules, "VP", &["IV", "IV Adv", "TV NP"]);
        add(&mut rules, "Det", &["the", "a"]);
        add(
            &mut rules,
            "N",
            &[
                "hotel", "owner", "dog", "cat", "man", "woman", "teacher", "student", "doctor",
                "driver", "farmer", "baker", "singer", "writer", "river", "garden", "house",
                "boat", "bird", "horse",
            ],
        );
        add(
            &mut rules,
            "Adj",
            &["old", "young", "tall", "small", "quiet", "happy", "tired", "busy"],
        );
        add(
            &mut rules,
            "IV",
            &[
                "shrugged", "smiled", "laughed", "slept", "waited", "nodded", "shouted",
                "whispered", "arrived", "stumbled",
            ],
        );
        add(
            &mut rules,
            "TV",
            &["saw", "met", "helped", "watched", "followed", "greeted"],
        );
        add(
            &mut rules,
            "Adv",
            &["quietly", "slowly", "today", "loudly", "again"],
        );
        Grammar {
            start: "S".to_string(),
            rules,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rules.is_empty() {
            return Err(Error::Config("grammar has no rules".into()));
        }
        if self.is_terminal(&self.start) {
            return Err(Error::Config(format!(
                "start symbol {} has no productions",
                self.start
            )));
        }
        for (nt, prods) in &self.rules {
            if prods.is_empty() {
                return Err(Error::Config(format!("nonterminal {nt} has no productions")));
            }
        }
        // Finite-language check: the nonterminal dependency graph must be
        // acyclic, otherwise sampling may not terminate.
        let mut visiting = std::collections::BTreeSet::new();
        let mut done = std::collections::BTreeSet::new();
        fn dfs(
            g: &Grammar,
            nt: &str,
            visiting: &mut std::collections::BTreeSet<String>,
            done: &mut std::collections::BTreeSet<String>,
        ) -> Result<()> {
            if done.contains(nt) {
                return Ok(());
            }
            if !visiting.insert(nt.to_string()) {
                return Err(Error::Config(format!(
                    "grammar is recursive through {nt}; a finite language is required"
                )));
            }
            for prod in &g.rules[nt] {
                for sym in prod {
                    if !g.is_terminal(sym) {
                        dfs(g, sym, visiting, done)?;
                    }
                }
            }
            visiting.remove(nt);
            done.insert(nt.to_string());
            Ok(())
        }
        dfs(self, &self.start, &mut visiting, &mut done)
    }

    fn expand(&self, symbol: &str, rng: &mut Rng, out: &mut Vec<String>) {
        match self.rules.get(symbol) {
            None => out.push(symbol.to_string()),
            Some(prods) => {
                let prod = rng.choose(prods);
                for sym in prod.clone() {
                    self.expand(&sym, rng, out);
                }
            }
        }
    }

    /// One derivation from the start symbol.
    pub fn sample(&self, rng: &mut Rng) -> String {
        let mut words = Vec::new();
        self.expand(&self.start, rng, &mut words);
        words.join(" ")
    }
}

const MIN_WORDS: usize = 2;
const MAX_WORDS: usize = 8;

/// Sample `n_sentences` sentences, deterministic under `seed`. Sentences
/// outside the 2..=8-word band are resampled.
pub fn generate_text_corpus(grammar: &Grammar, n_sentences: usize, seed: u64) -> Result<Vec<String>> {
    if n_sentences == 0 {
        return Err(Error::Config("n_sentences must be >= 1".into()));
    }
    grammar.validate()?;
    let mut rng = Rng::from_parts(&[seed, 0x7e57]);
    let mut out = Vec::with_capacity(n_sentences);
    while out.len() < n_sentences {
        let mut attempts = 0;
        let sentence = loop {
            let s = grammar.sample(&mut rng);
            let words = s.split_whitespace().count();
            if (MIN_WORDS..=MAX_WORDS).contains(&words) {
                break s;
            }
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::Config(
                    "grammar cannot produce sentences of 2..=8 words".into(),
                ));
            }
        };
        out.push(sentence);
    }
    Ok(out)
}
