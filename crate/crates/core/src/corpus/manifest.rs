//! Manifest JSON and feature sidecar I/O.
//!
//! The manifest is a single JSON file; each utterance's feature matrix lives
//! in a sidecar binary next to it (header: magic "DYSA", version u32, T u32,
//! d u32, then little-endian f32 rows) referenced by relative path. Writes
//! are atomic (temp file + rename), so a failed write never leaves a partial
//! manifest behind.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::synth::Segment;
use super::{CorpusManifest, SeverityLevel, SpeakerProfile, Split, Utterance};
use crate::error::{Error, Result};
use crate::lm::TokenId;
use crate::tensor::Tensor2D;

const FEATURE_MAGIC: &[u8; 4] = b"DYSA";
const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct UtteranceRecord {
    utterance_id: String,
    transcript: String,
    units: Vec<TokenId>,
    features_path: String,
    segments: Vec<Segment>,
    speaker: String,
    severity: SeverityLevel,
    block: u8,
    #[serde(default)]
    perturbation_capped: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    corpus_id: String,
    prototype_seed: u64,
    split_style: super::SplitStyle,
    speakers: Vec<SpeakerProfile>,
    utterances: Vec<UtteranceRecord>,
    split: BTreeMap<String, Split>,
}

fn write_features(path: &Path, features: &Tensor2D) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        f.write_all(FEATURE_MAGIC)?;
        f.write_all(&FEATURE_VERSION.to_le_bytes())?;
        f.write_all(&(features.rows() as u32).to_le_bytes())?;
        f.write_all(&(features.cols() as u32).to_le_bytes())?;
        for &v in features.data() {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
        f.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_features(path: &Path) -> Result<Tensor2D> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format(format!(
            "bad feature magic in {}",
            path.display()
        )));
    }
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    let version = u32::from_le_bytes(b);
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature version {version}")));
    }
    f.read_exact(&mut b)?;
    let rows = u32::from_le_bytes(b) as usize;
    f.read_exact(&mut b)?;
    let cols = u32::from_le_bytes(b) as usize;
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        f.read_exact(&mut b).map_err(|_| Error::Format(format!(
            "feature file {} truncated",
            path.display()
        )))?;
        data.push(f32::from_le_bytes(b) as f64);
    }
    Ok(Tensor2D::from_vec(rows, cols, data))
}

/// Write `manifest.json` at `path` and sidecars under `<dir>/features/`.
pub fn write_manifest(manifest: &CorpusManifest, path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let feat_dir = dir.join("features");
    std::fs::create_dir_all(&feat_dir)?;
    let mut records = Vec::with_capacity(manifest.utterances.len());
    for utt in &manifest.utterances {
        let rel = format!("features/{}.dysa", utt.utterance_id);
        write_features(&dir.join(&rel), &utt.features)?;
        records.push(UtteranceRecord {
            utterance_id: utt.utterance_id.clone(),
            transcript: utt.transcript.clone(),
            units: utt.units.clone(),
            features_path: rel,
            segments: utt.segments.clone(),
            speaker: utt.speaker.clone(),
            severity: utt.severity,
            block: utt.block,
            perturbation_capped: utt.perturbation_capped,
        });
    }
    let file = ManifestFile {
        corpus_id: manifest.corpus_id.clone(),
        prototype_seed: manifest.prototype_seed,
        split_style: manifest.split_style,
        speakers: manifest.speakers.clone(),
        utterances: records,
        split: manifest.split.clone(),
    };
    let json = serde_json::to_string_pretty(&file).expect("manifest serializes");
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, json.as_bytes())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Read and fully validate a manifest; parse failures carry line/column
/// diagnostics and never return a partial manifest.
pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    let text = std::fs::read_to_string(path)?;
    let file: ManifestFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut utterances = Vec::with_capacity(file.utterances.len());
    for rec in file.utterances {
        let features = read_features(&dir.join(&rec.features_path))?;
        utterances.push(Utterance {
            utterance_id: rec.utterance_id,
            transcript: rec.transcript,
            units: rec.units,
            features,
            segments: rec.segments,
            speaker: rec.speaker,
            severity: rec.severity,
            block: rec.block,
            perturbation_capped: rec.perturbation_capped,
        });
    }
    let manifest = CorpusManifest {
        corpus_id: file.corpus_id,
        prototype_seed: file.prototype_seed,
        split_style: file.split_style,
        speakers: file.speakers,
        utterances,
        split: file.split,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// FNV-1a over the manifest JSON bytes plus every sidecar's bytes; used by
/// the harness to prove all architectures consumed identical partitions.
pub fn manifest_content_hash(path: &Path) -> Result<u64> {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    let text = std::fs::read(path)?;
    eat(&text);
    let file: ManifestFile =
        serde_json::from_slice(&text).map_err(|e| Error::Format(e.to_string()))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut paths: Vec<PathBuf> = file
        .utterances
        .iter()
        .map(|r| dir.join(&r.features_path))
        .collect();
    paths.sort();
    for p in paths {
        eat(&std::fs::read(p)?);
    }
    Ok(h)
}
