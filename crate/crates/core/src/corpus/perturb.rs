//! Severity-controlled dysarthric perturbation of synthesized utterances.
//!
//! Operates on the unit-aligned feature matrix only; transcript and
//! reference units are never touched, so recognition must recover the
//! intended text from the corrupted acoustics.

use super::synth::{Segment, SynthesisTable};
use super::{PerturbationProfile, Utterance};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnitFate {
    Keep,
    Delete,
    Substitute,
}

/// Apply deletion / substitution / elongation / noise to an utterance.
///
/// Draw order per utterance is fixed: one fate draw per unit, then one
/// stretch draw per surviving unit, then noise row-major over the surviving
/// frames. If every unit would be deleted, the unit with the largest fate
/// draw survives instead and the cap is recorded on the utterance.
pub fn apply_dysarthric_perturbation(
    utterance: &Utterance,
    table: &SynthesisTable,
    profile: &PerturbationProfile,
    seed: u64,
) -> Result<Utterance> {
    profile.validate()?;
    let mut rng = Rng::new(seed);
    let segments = &utterance.segments;
    let features = &utterance.features;
    let dim = features.cols();

    // Phase 1: per-unit fate.
    let mut fates = Vec::with_capacity(segments.len());
    let mut draws = Vec::with_capacity(segments.len());
    for seg in segments {
        let p_delete = profile
            .unit_delete_overrides
            .get(&seg.unit)
            .copied()
            .unwrap_or(profile.p_delete);
        let u = rng.uniform();
        draws.push(u);
        let fate = if u < p_delete {
            UnitFate::Delete
        } else if u < p_delete + profile.p_substitute {
            UnitFate::Substitute
        } else {
            UnitFate::Keep
        };
        fates.push(fate);
    }
    let mut capped = false;
    if fates.iter().all(|&f| f == UnitFate::Delete) && !fates.is_empty() {
        // Deletion cap: the unit closest to surviving survives.
        let mut best = 0;
        for (i, &d) in draws.iter().enumerate() {
            if d > draws[best] {
                best = i;
            }
        }
        fates[best] = UnitFate::Keep;
        capped = true;
    }

    // Phase 2: rebuild surviving segments with stretch and (for
    // substitutions) the confusable unit's prototype plus the original
    // noise residual.
    let mut rows: Vec<f64> = Vec::new();
    let mut new_segments: Vec<Segment> = Vec::new();
    let mut cursor = 0usize;
    for (seg, &fate) in segments.iter().zip(fates.iter()) {
        if fate == UnitFate::Delete {
            continue;
        }
        let stretch = rng.uniform_in(1.0, profile.elongation_max);
        let new_len = ((seg.len as f64 * stretch).round() as usize).max(1);
        let orig_proto = table.prototype(seg.unit)?.to_vec();
        let swap_proto = if fate == UnitFate::Substitute {
            Some(table.prototype(table.confusable(seg.unit)?)?.to_vec())
        } else {
            None
        };
        for j in 0..new_len {
            let src = seg.start + (j * seg.len) / new_len;
            for d in 0..dim {
                let orig = features.at(src, d);
                let v = match &swap_proto {
                    Some(proto) => proto[d] + (orig - orig_proto[d]),
                    None => orig,
                };
                rows.push(v);
            }
        }
        new_segments.push(Segment {
            unit: seg.unit,
            start: cursor,
            len: new_len,
        });
        cursor += new_len;
    }

    // Phase 3: additive noise, then f32 quantization for lossless sidecars.
    for v in rows.iter_mut() {
        *v += profile.noise_sigma * rng.gaussian();
        *v = (*v as f32) as f64;
    }

    let features = Tensor2D::from_vec(cursor, dim, rows);
    Ok(Utterance {
        features,
        segments: new_segments,
        perturbation_capped: capped,
        ..utterance.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth::{synthesize_features, DurationConfig, DEFAULT_FEATURE_DIM};
    use crate::corpus::SeverityLevel;
    use crate::lm::Tokenizer;

    fn make_utterance(text: &str, seed: u64) -> (Utterance, SynthesisTable) {
        let tok = Tokenizer::new();
        let table = SynthesisTable::new(11, DEFAULT_FEATURE_DIM);
        let units = tok.encode(text).unwrap();
        let (features, segments) =
            synthesize_features(&units, &table, &DurationConfig::default(), 0.05, seed)
                .unwrap();
        (
            Utterance {
                utterance_id: "u0".into(),
                transcript: text.into(),
                units,
                features,
                segments,
                speaker: "spk0".into(),
                severity: SeverityLevel::Moderate,
                block: 1,
                perturbation_capped: false,
            },
            table,
        )
    }

    #[test]
    fn identity_profile_leaves_features_bit_identical() {
        let (utt, table) = make_utterance("the dog slept", 3);
        let out =
            apply_dysarthric_perturbation(&utt, &table, &PerturbationProfile::identity(), 9)
                .unwrap();
        assert_eq!(out.features, utt.features);
        assert_eq!(out.segments, utt.segments);
        assert!(!out.perturbation_capped);
    }

    #[test]
    fn full_deletion_capped_to_exactly_one_survivor() {
        let (utt, table) = make_utterance("abc", 4);
        let profile = PerturbationProfile {
            p_delete: 1.0,
            p_substitute: 0.0,
            elongation_max: 1.0,
            noise_sigma: 0.0,
            unit_delete_overrides: Default::default(),
        };
        let out = apply_dysarthric_perturbation(&utt, &table, &profile, 5).unwrap();
        assert_eq!(out.segments.len(), 1);
        assert!(out.perturbation_capped);
        assert_eq!(out.transcript, utt.transcript);
        assert_eq!(out.units, utt.units);
    }

    #[test]
    fn targeted_h_deletion_removes_exactly_those_segments() {
        let (utt, table) = make_utterance("the hotel owner shrugged", 6);
        let tok = Tokenizer::new();
        let h_id = tok.encode("h").unwrap()[0];
        let mut profile = PerturbationProfile::identity();
        profile.unit_delete_overrides.insert(h_id, 1.0);
        let out = apply_dysarthric_perturbation(&utt, &table, &profile, 7).unwrap();
        // Reference stays the intended text.
        assert_eq!(out.transcript, "the hotel owner shrugged");
        assert_eq!(out.units, utt.units);
        // Surviving unit stream reads "te otel owner srugged".
        let surviving: String = tok.decode(&out.segments.iter().map(|s| s.unit).collect::<Vec<_>>());
        assert_eq!(surviving, "te otel owner srugged");
        // Segment boundaries replay: surviving features equal the original
        // segments concatenated in order, untouched.
        let expected_rows: Vec<&Segment> =
            utt.segments.iter().filter(|s| s.unit != h_id).collect();
        let mut cursor = 0;
        for (new_seg, old_seg) in out.segments.iter().zip(expected_rows.iter()) {
            assert_eq!(new_seg.unit, old_seg.unit);
            assert_eq!(new_seg.len, old_seg.len);
            assert_eq!(new_seg.start, cursor);
            for j in 0..old_seg.len {
                for d in 0..utt.features.cols() {
                    assert_eq!(
                        out.features.at(new_seg.start + j, d),
                        utt.features.at(old_seg.start + j, d)
                    );
                }
            }
            cursor += new_seg.len;
        }
    }

    #[test]
    fn expected_deletions_monotone_in_severity() {
        // Monte Carlo, >= 1000 utterances per grade; mean deleted units must
        // be nondecreasing and VL vs H separated far beyond sampling noise.
        let (utt, table) = make_utterance("the hotel owner shrugged again", 8);
        let grades = SeverityLevel::DYSARTHRIC;
        let mut means = Vec::new();
        for (gi, grade) in grades.iter().enumerate() {
            let profile = grade.default_profile();
            let mut total_deleted = 0usize;
            let n = 1200;
            for i in 0..n {
                let out = apply_dysarthric_perturbation(
                    &utt,
                    &table,
                    &profile,
                    (gi * 100_000 + i) as u64,
                )
                .unwrap();
                total_deleted += utt.segments.len() - out.segments.len();
            }
            means.push(total_deleted as f64 / n as f64);
        }
        for w in means.windows(2) {
            assert!(w[0] <= w[1] + 1e-9, "means not monotone: {means:?}");
        }
        // 30 units, p 0.02 vs 0.25: expected ~0.6 vs ~7.5 deletions.
        assert!(
            means[3] - means[0] > 3.0,
            "VL vs H not separated: {means:?}"
        );
    }

    #[test]
    fn elongation_stretches_but_preserves_unit_order() {
        let (utt, table) = make_utterance("cat", 10);
        let profile = PerturbationProfile {
            p_delete: 0.0,
            p_substitute: 0.0,
            elongation_max: 3.0,
            noise_sigma: 0.0,
            unit_delete_overrides: Default::default(),
        };
        let out = apply_dysarthric_perturbation(&utt, &table, &profile, 11).unwrap();
        assert_eq!(out.segments.len(), utt.segments.len());
        for (new_seg, old_seg) in out.segments.iter().zip(utt.segments.iter()) {
            assert_eq!(new_seg.unit, old_seg.unit);
            assert!(new_seg.len >= old_seg.len);
            assert!(new_seg.len <= old_seg.len * 3 + 1);
        }
        assert!(out.features.rows() >= utt.features.rows());
    }
}
