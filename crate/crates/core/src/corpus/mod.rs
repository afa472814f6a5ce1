//! Synthetic severity-controlled corpus generation.
//!
//! Text comes from a finite context-free grammar; acoustics are per-unit
//! prototype vectors (a deterministic function of the corpus prototype seed)
//! with noise, durations, and severity-controlled dysarthric perturbations
//! layered on top. Manifests carry speaker-independent train/test splits.

mod build;
mod grammar;
mod manifest;
mod perturb;
mod synth;

pub use build::{build_corpus, synth_torgo_config, synth_uaspeech_config, CorpusConfig, SplitStyle};
pub use manifest::manifest_content_hash;
pub use grammar::{generate_text_corpus, Grammar};
pub use manifest::{read_manifest, write_manifest};
pub use perturb::apply_dysarthric_perturbation;
pub use synth::{synthesize_features, DurationConfig, Segment, SynthesisTable, DEFAULT_FEATURE_DIM};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{TokenId, Tokenizer};
use crate::tensor::Tensor2D;

/// Dysarthria severity grades, ordered VL < L < M < H. Typical speakers are
/// controls: the identity perturbation, never seen in training.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum SeverityLevel {
    #[serde(rename = "VL")]
    VeryLow,
    #[serde(rename = "L")]
    Low,
    #[serde(rename = "M")]
    Moderate,
    #[serde(rename = "H")]
    High,
    #[serde(rename = "TYPICAL")]
    Typical,
}

impl SeverityLevel {
    pub const DYSARTHRIC: [SeverityLevel; 4] = [
        SeverityLevel::VeryLow,
        SeverityLevel::Low,
        SeverityLevel::Moderate,
        SeverityLevel::High,
    ];

    pub fn is_dysarthric(self) -> bool {
        self != SeverityLevel::Typical
    }

    pub fn label(self) -> &'static str {
        match self {
            SeverityLevel::VeryLow => "VL",
            SeverityLevel::Low => "L",
            SeverityLevel::Moderate => "M",
            SeverityLevel::High => "H",
            SeverityLevel::Typical => "TYPICAL",
        }
    }

    /// Default severity -> perturbation mapping. Overridable in corpus
    /// config; chosen as a smooth knob so recognition difficulty climbs
    /// monotonically with the grade.
    pub fn default_profile(self) -> PerturbationProfile {
        let (p_delete, p_substitute, elongation_max, noise_sigma) = match self {
            SeverityLevel::VeryLow => (0.02, 0.03, 1.2, 0.10),
            SeverityLevel::Low => (0.05, 0.08, 1.5, 0.20),
            SeverityLevel::Moderate => (0.12, 0.15, 2.0, 0.35),
            SeverityLevel::High => (0.25, 0.30, 3.0, 0.50),
            SeverityLevel::Typical => (0.0, 0.0, 1.0, 0.0),
        };
        PerturbationProfile {
            p_delete,
            p_substitute,
            elongation_max,
            noise_sigma,
            unit_delete_overrides: BTreeMap::new(),
        }
    }
}

/// Per-unit corruption knobs. The override map is a test hook forcing a
/// specific unit's deletion probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationProfile {
    pub p_delete: f64,
    pub p_substitute: f64,
    pub elongation_max: f64,
    pub noise_sigma: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub unit_delete_overrides: BTreeMap<TokenId, f64>,
}

impl PerturbationProfile {
    pub fn identity() -> Self {
        SeverityLevel::Typical.default_profile()
    }

    pub fn validate(&self) -> Result<()> {
        let probs_ok = (0.0..=1.0).contains(&self.p_delete)
            && (0.0..=1.0).contains(&self.p_substitute)
            && self
                .unit_delete_overrides
                .values()
                .all(|p| (0.0..=1.0).contains(p));
        if !probs_ok {
            return Err(Error::Config(
                "perturbation probabilities must lie in [0,1]".into(),
            ));
        }
        if self.p_delete + self.p_substitute > 1.0 {
            return Err(Error::Config(
                "p_delete + p_substitute must not exceed 1".into(),
            ));
        }
        if self.elongation_max < 1.0 {
            return Err(Error::Config("elongation_max must be >= 1".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub severity: SeverityLevel,
    pub articulation_seed: u64,
}

/// One utterance: intended transcript (never mutated by perturbation), its
/// unit ids, the realized feature matrix, and the per-unit frame alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub utterance_id: String,
    pub transcript: String,
    pub units: Vec<TokenId>,
    pub features: Tensor2D,
    pub segments: Vec<Segment>,
    pub speaker: String,
    pub severity: SeverityLevel,
    pub block: u8,
    pub perturbation_capped: bool,
}

impl Utterance {
    pub fn validate(&self, tokenizer: &Tokenizer) -> Result<()> {
        if self.features.rows() == 0 {
            return Err(Error::Validation {
                path: self.utterance_id.clone(),
                message: "feature matrix must have T >= 1 frames".into(),
            });
        }
        if !self.features.is_finite() {
            return Err(Error::Validation {
                path: self.utterance_id.clone(),
                message: "non-finite feature values".into(),
            });
        }
        if self
            .units
            .iter()
            .any(|&u| tokenizer.is_reserved(u) || u as usize >= tokenizer.vocab_size())
        {
            return Err(Error::Validation {
                path: self.utterance_id.clone(),
                message: "unit id outside the character vocabulary".into(),
            });
        }
        if !(1..=3).contains(&self.block) {
            return Err(Error::Validation {
                path: self.utterance_id.clone(),
                message: format!("block {} outside 1..=3", self.block),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub corpus_id: String,
    pub prototype_seed: u64,
    pub split_style: SplitStyle,
    pub speakers: Vec<SpeakerProfile>,
    pub utterances: Vec<Utterance>,
    pub split: BTreeMap<String, Split>,
}

impl CorpusManifest {
    pub fn utterances_in(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances
            .iter()
            .filter(move |u| self.split.get(&u.utterance_id) == Some(&split))
    }

    pub fn speaker(&self, id: &str) -> Option<&SpeakerProfile> {
        self.speakers.iter().find(|s| s.speaker_id == id)
    }

    /// Enforce the manifest invariants: unique speakers, a total split, no
    /// typical-severity utterance in train, and the style-appropriate
    /// independence rule — disjoint speakers for fraction_by_speaker,
    /// disjoint per-speaker blocks ({1,3} train / {2} test) for block_based.
    pub fn validate(&self) -> Result<()> {
        let tokenizer = Tokenizer::new();
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.speakers {
            if !seen.insert(&s.speaker_id) {
                return Err(Error::Validation {
                    path: self.corpus_id.clone(),
                    message: format!("duplicate speaker_id {}", s.speaker_id),
                });
            }
        }
        let mut train_speakers = std::collections::BTreeSet::new();
        let mut test_speakers = std::collections::BTreeSet::new();
        for u in &self.utterances {
            u.validate(&tokenizer)?;
            if self.speaker(&u.speaker).is_none() {
                return Err(Error::Validation {
                    path: self.corpus_id.clone(),
                    message: format!("utterance {} names unknown speaker {}", u.utterance_id, u.speaker),
                });
            }
            match self.split.get(&u.utterance_id) {
                None => {
                    return Err(Error::Validation {
                        path: self.corpus_id.clone(),
                        message: format!("utterance {} missing from split", u.utterance_id),
                    })
                }
                Some(Split::Train) => {
                    if u.severity == SeverityLevel::Typical {
                        return Err(Error::Validation {
                            path: self.corpus_id.clone(),
                            message: format!(
                                "typical-severity utterance {} assigned to train",
                                u.utterance_id
                            ),
                        });
                    }
                    if self.split_style == SplitStyle::BlockBased && u.block == 2 {
                        return Err(Error::Validation {
                            path: self.corpus_id.clone(),
                            message: format!(
                                "block-2 utterance {} assigned to train",
                                u.utterance_id
                            ),
                        });
                    }
                    train_speakers.insert(u.speaker.clone());
                }
                Some(Split::Test) => {
                    if self.split_style == SplitStyle::BlockBased
                        && u.block != 2
                        && u.severity != SeverityLevel::Typical
                    {
                        return Err(Error::Validation {
                            path: self.corpus_id.clone(),
                            message: format!(
                                "dysarthric utterance {} from train block {} assigned to test",
                                u.utterance_id, u.block
                            ),
                        });
                    }
                    test_speakers.insert(u.speaker.clone());
                }
            }
        }
        if self.split_style == SplitStyle::FractionBySpeaker {
            if let Some(shared) = train_speakers.intersection(&test_speakers).next() {
                return Err(Error::Validation {
                    path: self.corpus_id.clone(),
                    message: format!("speaker {shared} appears in both train and test"),
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn severity_ordering_is_vl_l_m_h() {
        use SeverityLevel::*;
        assert!(VeryLow < Low && Low < Moderate && Moderate < High);
    }

    #[test]
    fn default_profiles_are_monotone_in_each_knob() {
        use SeverityLevel::*;
        let grades = [VeryLow, Low, Moderate, High];
        for w in grades.windows(2) {
            let (a, b) = (w[0].default_profile(), w[1].default_profile());
            assert!(a.p_delete < b.p_delete);
            assert!(a.p_substitute < b.p_substitute);
            assert!(a.elongation_max < b.elongation_max);
            assert!(a.noise_sigma < b.noise_sigma);
        }
        assert_eq!(Typical.default_profile(), PerturbationProfile::identity());
    }

    #[test]
    fn profile_validation_rejects_bad_knobs() {
        let mut p = PerturbationProfile::identity();
        p.p_delete = 0.7;
        p.p_substitute = 0.5;
        assert!(p.validate().is_err());
        p.p_substitute = 0.1;
        assert!(p.validate().is_ok());
        p.elongation_max = 0.5;
        assert!(p.validate().is_err());
    }
}
