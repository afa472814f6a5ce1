//! Acoustic feature synthesis from per-unit prototype vectors.
//!
//! Each corpus identity (prototype_seed) gets its own prototype table, which
//! is what creates the acoustic domain shift between corpora. Features are
//! quantized to f32 at synthesis time so the binary sidecar round-trip is
//! exactly lossless.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{TokenId, Tokenizer};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor2D;

pub const DEFAULT_FEATURE_DIM: usize = 16;

/// Per-unit frame span within an utterance's feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub unit: TokenId,
    pub start: usize,
    pub len: usize,
}

/// Uniform per-unit duration band (frames), inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DurationConfig {
    pub min_frames: usize,
    pub max_frames: usize,
}

impl Default for DurationConfig {
    fn default() -> Self {
        DurationConfig {
            min_frames: 2,
            max_frames: 5,
        }
    }
}

impl DurationConfig {
    pub fn fixed(n: usize) -> Self {
        DurationConfig {
            min_frames: n,
            max_frames: n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return Err(Error::Config(format!(
                "invalid duration band {}..={}",
                self.min_frames, self.max_frames
            )));
        }
        Ok(())
    }
}

/// Prototype vectors per unit id plus the nearest-prototype confusability
/// table, both a pure function of (prototype_seed, unit id).
#[derive(Debug, Clone)]
pub struct SynthesisTable {
    pub prototype_seed: u64,
    pub feature_dim: usize,
    prototypes: BTreeMap<TokenId, Vec<f64>>,
    confusables: BTreeMap<TokenId, TokenId>,
}

impl SynthesisTable {
    pub fn new(prototype_seed: u64, feature_dim: usize) -> Self {
        let tokenizer = Tokenizer::new();
        let mut prototypes = BTreeMap::new();
        for unit in tokenizer.unit_ids() {
            let mut rng = Rng::new(derive_seed(&[prototype_seed, 0x9270, unit as u64]));
            let proto: Vec<f64> = (0..feature_dim)
                .map(|_| (rng.gaussian() as f32) as f64)
                .collect();
            prototypes.insert(unit, proto);
        }
        // Nearest prototype per unit, ties toward the lowest id.
        let mut confusables = BTreeMap::new();
        for (&u, pu) in &prototypes {
            let mut best: Option<(TokenId, f64)> = None;
            for (&v, pv) in &prototypes {
                if v == u {
                    continue;
                }
                let d2: f64 = pu.iter().zip(pv.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if best.map_or(true, |(_, bd)| d2 < bd) {
                    best = Some((v, d2));
                }
            }
            confusables.insert(u, best.expect("at least two units").0);
        }
        SynthesisTable {
            prototype_seed,
            feature_dim,
            prototypes,
            confusables,
        }
    }

    pub fn prototype(&self, unit: TokenId) -> Result<&[f64]> {
        self.prototypes
            .get(&unit)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Vocab(format!("unit id {unit} has no prototype")))
    }

    pub fn confusable(&self, unit: TokenId) -> Result<TokenId> {
        self.confusables
            .get(&unit)
            .copied()
            .ok_or_else(|| Error::Vocab(format!("unit id {unit} has no confusable entry")))
    }

    /// Mean pairwise distance between this table's prototypes and another's
    /// (same units). Positive distance is what makes cross-corpus testing a
    /// domain shift.
    pub fn mean_prototype_distance(&self, other: &SynthesisTable) -> f64 {
        let mut total = 0.0;
        let mut n = 0;
        for (unit, pu) in &self.prototypes {
            if let Some(pv) = other.prototypes.get(unit) {
                let d2: f64 = pu.iter().zip(pv.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                total += d2.sqrt();
                n += 1;
            }
        }
        total / n.max(1) as f64
    }
}

/// Emit, per unit, a run of consecutive frames equal to the unit's prototype
/// plus Gaussian noise of scale `noise_floor`. Returns the feature matrix
/// and the per-unit alignment.
pub fn synthesize_features(
    units: &[TokenId],
    table: &SynthesisTable,
    duration: &DurationConfig,
    noise_floor: f64,
    rng_seed: u64,
) -> Result<(Tensor2D, Vec<Segment>)> {
    if units.is_empty() {
        return Err(Error::Config("cannot synthesize an empty unit sequence".into()));
    }
    duration.validate()?;
    let mut rng = Rng::new(rng_seed);
    let mut rows: Vec<f64> = Vec::new();
    let mut segments = Vec::with_capacity(units.len());
    let mut start = 0;
    for &unit in units {
        let proto = table.prototype(unit)?;
        let n = rng.range_inclusive(duration.min_frames, duration.max_frames);
        for _ in 0..n {
            for &p in proto {
                let v = p + noise_floor * rng.gaussian();
                rows.push((v as f32) as f64);
            }
        }
        segments.push(Segment {
            unit,
            start,
            len: n,
        });
        start += n;
    }
    let t = start;
    Ok((Tensor2D::from_vec(t, table.feature_dim, rows), segments))
}
