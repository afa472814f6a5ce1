//! Experiment configuration: corpora, architectures, seeds, training knobs.
//! Loadable from TOML or JSON; hashed so every artifact records exactly what
//! produced it.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dysbench_core::asr::{Architecture, AsrTrainConfig};
use dysbench_core::corpus::{synth_torgo_config, synth_uaspeech_config, CorpusConfig};
use dysbench_core::error::{Error, Result};
use dysbench_core::lm::PretrainConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmSuiteConfig {
    /// Sentences in the LM pretraining text corpus.
    pub text_sentences: usize,
    pub gpt_epochs: usize,
    pub bart_epochs: usize,
    /// The frozen-LM analogue pretrains longer than the small decoder LM.
    pub vicuna_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub ngram_order: usize,
}

impl Default for LmSuiteConfig {
    fn default() -> Self {
        LmSuiteConfig {
            text_sentences: 4000,
            gpt_epochs: 8,
            bart_epochs: 16,
            vicuna_epochs: 12,
            lr: 3e-3,
            batch_size: 16,
            ngram_order: 4,
        }
    }
}

impl LmSuiteConfig {
    pub fn pretrain_config(&self, epochs: usize) -> PretrainConfig {
        PretrainConfig {
            epochs,
            lr: self.lr,
            warmup_steps: 200,
            batch_size: self.batch_size,
            held_out_fraction: 0.05,
            span_mask_coverage: 0.25,
            evals_per_run: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpora: Vec<CorpusConfig>,
    pub architectures: Vec<Architecture>,
    pub seeds: Vec<u64>,
    pub lm: LmSuiteConfig,
    pub train: AsrTrainConfig,
    /// Side-by-side examples in the error report.
    pub error_report_samples: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpora: vec![synth_torgo_config(110), synth_uaspeech_config(108)],
            architectures: Architecture::ALL.to_vec(),
            seeds: vec![1, 2, 3, 4, 5],
            lm: LmSuiteConfig::default(),
            train: AsrTrainConfig::default(),
            error_report_samples: 5,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.architectures.is_empty() {
            return Err(Error::Config("need at least one architecture".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("need at least one seed".into()));
        }
        if self.corpora.is_empty() {
            return Err(Error::Config("need at least one corpus".into()));
        }
        let mut ids = std::collections::BTreeSet::new();
        for c in &self.corpora {
            c.validate()?;
            if !ids.insert(&c.corpus_id) {
                return Err(Error::Config(format!("duplicate corpus id {}", c.corpus_id)));
            }
        }
        Ok(())
    }

    /// Stable hash of the canonical JSON form; recorded in every artifact.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let is_toml = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("toml"))
            .unwrap_or(false);
        let config: ExperimentConfig = if is_toml {
            toml::from_str(&text).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: e.span().map(|s| s.start).unwrap_or(0),
                column: 0,
                message: e.message().to_string(),
            })?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?
        };
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())?;
        Ok(())
    }
}

/// Output root resolution: explicit flag, then config, then the
/// DYSBENCH_OUT environment variable, then ./dysbench-out.
pub fn resolve_out_dir(flag: Option<&Path>, config: &ExperimentConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(p) = &config.out_dir {
        return p.clone();
    }
    if let Ok(env) = std::env::var("DYSBENCH_OUT") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from("dysbench-out")
}
