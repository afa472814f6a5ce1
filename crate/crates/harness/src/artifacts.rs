//! On-disk artifact layout and caching.
//!
//! Everything an experiment produces lives under one output root, keyed by
//! config hash and seed so reruns with identical configuration reuse (and
//! byte-match) earlier artifacts:
//!
//! ```text
//! <out>/
//!   corpora/<corpus_id>-s<seed>/manifest.json (+ features/)
//!   lms/<role>-s<seed>-<hash>.dysc (+ .json sidecar) / .ngram
//!   checkpoints/<arch>-<corpus_id>-s<seed>-<hash>.dysc
//!   records/<arch>-<corpus_id>-on-<test_corpus>-s<seed>-<hash>.csv
//!   reports/...
//! ```

use std::path::{Path, PathBuf};

use dysbench_core::corpus::{
    build_corpus, manifest_content_hash, read_manifest, write_manifest, CorpusConfig,
    CorpusManifest,
};
use dysbench_core::error::Result;
use dysbench_core::metrics::MetricRecord;

#[derive(Debug, Clone)]
pub struct ArtifactStore {
    pub root: PathBuf,
    pub config_hash: String,
}

impl ArtifactStore {
    pub fn new(root: &Path, config_hash: &str) -> Result<ArtifactStore> {
        for sub in ["corpora", "lms", "checkpoints", "records", "reports"] {
            std::fs::create_dir_all(root.join(sub))?;
        }
        Ok(ArtifactStore {
            root: root.to_path_buf(),
            config_hash: config_hash.to_string(),
        })
    }

    pub fn corpus_dir(&self, corpus_id: &str, seed: u64) -> PathBuf {
        self.root.join("corpora").join(format!("{corpus_id}-s{seed}"))
    }

    pub fn manifest_path(&self, corpus_id: &str, seed: u64) -> PathBuf {
        self.corpus_dir(corpus_id, seed).join("manifest.json")
    }

    /// Build (or reload) a corpus deterministically; the manifest on disk is
    /// the canonical copy all architectures share.
    pub fn ensure_corpus(&self, config: &CorpusConfig, seed: u64) -> Result<CorpusManifest> {
        let path = self.manifest_path(&config.corpus_id, seed);
        if path.exists() {
            return read_manifest(&path);
        }
        let manifest = build_corpus(config, seed)?;
        std::fs::create_dir_all(self.corpus_dir(&config.corpus_id, seed))?;
        write_manifest(&manifest, &path)?;
        Ok(manifest)
    }

    pub fn corpus_hash(&self, corpus_id: &str, seed: u64) -> Result<u64> {
        manifest_content_hash(&self.manifest_path(corpus_id, seed))
    }

    pub fn lm_path(&self, role: &str, seed: u64) -> PathBuf {
        self.root
            .join("lms")
            .join(format!("{role}-s{seed}-{}.dysc", self.config_hash))
    }

    pub fn ngram_path(&self, seed: u64) -> PathBuf {
        self.root
            .join("lms")
            .join(format!("ngram-s{seed}-{}.txt", self.config_hash))
    }

    pub fn checkpoint_path(&self, arch: &str, corpus_id: &str, seed: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!(
            "{arch}-{corpus_id}-s{seed}-{}.dysc",
            self.config_hash
        ))
    }

    pub fn loss_curve_path(&self, arch: &str, corpus_id: &str, seed: u64) -> PathBuf {
        self.root.join("checkpoints").join(format!(
            "{arch}-{corpus_id}-s{seed}-{}.loss.json",
            self.config_hash
        ))
    }

    pub fn records_path(
        &self,
        arch: &str,
        train_corpus: &str,
        test_corpus: &str,
        seed: u64,
    ) -> PathBuf {
        self.root.join("records").join(format!(
            "{arch}-{train_corpus}-on-{test_corpus}-s{seed}-{}.csv",
            self.config_hash
        ))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    pub fn write_records(&self, path: &Path, records: &[MetricRecord]) -> Result<()> {
        let mut out = String::new();
        out.push_str(MetricRecord::CSV_HEADER);
        out.push('\n');
        for r in records {
            out.push_str(&r.to_csv_row());
            out.push('\n');
        }
        atomic_write(path, out.as_bytes())
    }

    pub fn read_records(&self, path: &Path) -> Result<Vec<MetricRecord>> {
        let text = std::fs::read_to_string(path)?;
        parse_records_csv(&text, &path.display().to_string())
    }
}

/// Parse the metric-record CSV stream format.
pub fn parse_records_csv(text: &str, origin: &str) -> Result<Vec<MetricRecord>> {
    use dysbench_core::corpus::SeverityLevel;
    use dysbench_core::error::Error;
    use dysbench_core::metrics::EditAlignment;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != MetricRecord::CSV_HEADER {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: 1,
                    column: 1,
                    message: "unexpected records header".into(),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let parse_err = |message: String| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            column: 1,
            message,
        };
        if f.len() != 12 {
            return Err(parse_err(format!("expected 12 fields, got {}", f.len())));
        }
        let severity = match f[3] {
            "VL" => SeverityLevel::VeryLow,
            "L" => SeverityLevel::Low,
            "M" => SeverityLevel::Moderate,
            "H" => SeverityLevel::High,
            "TYPICAL" => SeverityLevel::Typical,
            other => return Err(parse_err(format!("unknown severity {other}"))),
        };
        let num = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| parse_err(format!("bad count {s}")))
        };
        out.push(MetricRecord {
            utterance_id: f[0].to_string(),
            model_id: f[1].to_string(),
            corpus_id: f[2].to_string(),
            severity,
            word: EditAlignment {
                n_ref: num(f[4])?,
                substitutions: num(f[5])?,
                deletions: num(f[6])?,
                insertions: num(f[7])?,
                trace: vec![],
            },
            chars: EditAlignment {
                n_ref: num(f[8])?,
                substitutions: num(f[9])?,
                deletions: num(f[10])?,
                insertions: num(f[11])?,
                trace: vec![],
            },
        });
    }
    Ok(out)
}

/// Write via temp file + rename so partial artifacts never appear.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
