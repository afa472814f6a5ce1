//! Shared acoustic encoder: frame stacking followed by transformer blocks.
//!
//! Downsampling is frame stacking (concatenate k frames, project) so the
//! length contract is exactly T' = ceil(T/k). Positions are sinusoidal; a
//! zero-block encoder is a pure projection (no positions, no final norm),
//! which is what the identity test mode relies on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sinusoidal_positions, AttnMask, Layer, LayerCache, LayerInput, LayerSpec, ParamStore};
use crate::rng::Rng;
use crate::stacks::{BlockStack, BlockStackCache};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub n_blocks: usize,
    pub head_count: usize,
    /// Frame stacking factor k >= 1.
    pub downsample_stride: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: crate::corpus::DEFAULT_FEATURE_DIM,
            model_dim: 32,
            n_blocks: 2,
            head_count: 4,
            downsample_stride: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_stride == 0 {
            return Err(Error::Config("downsample_stride must be >= 1".into()));
        }
        if self.head_count == 0 || self.model_dim % self.head_count != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by head_count {}",
                self.model_dim, self.head_count
            )));
        }
        Ok(())
    }
}

/// Encoded frames: T' x model_dim plus provenance.
#[derive(Debug, Clone)]
pub struct EncodedSequence {
    pub frames: Tensor2D,
    pub utterance_id: String,
}

#[derive(Debug, Clone)]
pub struct AcousticEncoder {
    pub config: EncoderConfig,
    pub proj: Layer,
    pub stack: BlockStack,
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    proj: LayerCache,
    stack: Option<BlockStackCache>,
}

impl AcousticEncoder {
    pub fn new(prefix: &str, config: EncoderConfig) -> Result<AcousticEncoder> {
        config.validate()?;
        Ok(AcousticEncoder {
            proj: Layer::new(
                LayerSpec::Linear {
                    d_in: config.input_dim * config.downsample_stride,
                    d_out: config.model_dim,
                },
                format!("{prefix}.proj"),
            ),
            stack: BlockStack::new(
                prefix,
                config.model_dim,
                config.head_count,
                config.n_blocks,
                false,
            ),
            config,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.proj.init(store, rng)?;
        self.stack.init(store, rng)
    }

    /// Concatenate each group of k frames (zero-padding the final group)
    /// into one row of width k*d.
    fn stack_frames(&self, features: &Tensor2D) -> Tensor2D {
        let k = self.config.downsample_stride;
        let d = self.config.input_dim;
        let t = features.rows();
        let t_out = t.div_ceil(k);
        let mut out = Tensor2D::zeros(t_out, k * d);
        for g in 0..t_out {
            for j in 0..k {
                let src = g * k + j;
                if src >= t {
                    break;
                }
                for c in 0..d {
                    out.set(g, j * d + c, features.at(src, c));
                }
            }
        }
        out
    }

    /// Encode one utterance's features. `frame_mask`, when given, marks
    /// usable input frames (padding exclusion); it is downsampled to the
    /// stacked rate, and a stacked position is usable if any of its source
    /// frames is.
    pub fn encode(
        &self,
        store: &ParamStore,
        features: &Tensor2D,
        frame_mask: Option<&[bool]>,
        utterance_id: &str,
    ) -> Result<(EncodedSequence, EncoderCache)> {
        let k = self.config.downsample_stride;
        if features.rows() < k {
            return Err(Error::InputTooShort(format!(
                "{} frames with stride {k}",
                features.rows()
            )));
        }
        if features.cols() != self.config.input_dim {
            return Err(Error::dim(
                format!("Tx{}", self.config.input_dim),
                features.shape_str(),
                "encoder input",
            ));
        }
        let stacked = self.stack_frames(features);
        let (projected, proj_cache) = self.proj.forward(store, LayerInput::Dense(&stacked), None)?;
        let mask = frame_mask.map(|fm| {
            let usable = (0..stacked.rows())
                .map(|g| (g * k..((g + 1) * k).min(fm.len())).any(|i| fm[i]))
                .collect();
            AttnMask { usable }
        });
        if self.config.n_blocks == 0 {
            return Ok((
                EncodedSequence {
                    frames: projected,
                    utterance_id: utterance_id.to_string(),
                },
                EncoderCache {
                    proj: proj_cache,
                    stack: None,
                },
            ));
        }
        let pos = sinusoidal_positions(projected.rows(), self.config.model_dim);
        let with_pos = projected.add(&pos);
        let (encoded, stack_cache) = self.stack.forward(store, &with_pos, mask.as_ref())?;
        Ok((
            EncodedSequence {
                frames: encoded,
                utterance_id: utterance_id.to_string(),
            },
            EncoderCache {
                proj: proj_cache,
                stack: Some(stack_cache),
            },
        ))
    }

    /// Backward to the parameter store (input gradients are not needed:
    /// features are data).
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &EncoderCache,
        upstream: &Tensor2D,
    ) -> Result<()> {
        let d_proj = match &cache.stack {
            Some(stack_cache) => self.stack.backward(store, stack_cache, upstream)?,
            None => upstream.clone(),
        };
        self.proj.backward(store, &cache.proj, &d_proj)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn make_encoder(n_blocks: usize, k: usize) -> (AcousticEncoder, ParamStore) {
        let config = EncoderConfig {
            input_dim: 6,
            model_dim: 12,
            n_blocks,
            head_count: 2,
            downsample_stride: k,
        };
        let enc = AcousticEncoder::new("enc", config).unwrap();
        let mut store = ParamStore::new(1);
        let mut rng = Rng::new(1);
        enc.init(&mut store, &mut rng).unwrap();
        (enc, store)
    }

    #[test]
    fn length_contract_t_prime_is_ceil_t_over_k() {
        for k in [1usize, 2, 3] {
            let (enc, store) = make_encoder(1, k);
            for t in k..=10 {
                let mut rng = Rng::new(t as u64);
                let x = Tensor2D::from_fn(t, 6, |_, _| rng.gaussian());
                let (seq, _) = enc.encode(&store, &x, None, "u").unwrap();
                assert_eq!(seq.frames.rows(), t.div_ceil(k), "t={t} k={k}");
            }
        }
    }

    #[test]
    fn too_few_frames_is_input_too_short() {
        let (enc, store) = make_encoder(1, 3);
        let x = Tensor2D::zeros(2, 6);
        let err = enc.encode(&store, &x, None, "u").unwrap_err();
        assert!(matches!(err, Error::InputTooShort(_)), "{err}");
    }

    #[test]
    fn zero_block_identity_projection_returns_stacked_frames() {
        let config = EncoderConfig {
            input_dim: 6,
            model_dim: 12,
            n_blocks: 0,
            head_count: 2,
            downsample_stride: 2,
        };
        let enc = AcousticEncoder::new("enc", config).unwrap();
        let mut store = ParamStore::new(1);
        let mut rng = Rng::new(1);
        enc.init(&mut store, &mut rng).unwrap();
        // Identity test mode: square projection set to the identity.
        *store.get_mut("enc.proj.w") = Tensor2D::identity(12);
        store.get_mut("enc.proj.b").fill(0.0);
        let mut xr = Rng::new(2);
        let x = Tensor2D::from_fn(4, 6, |_, _| xr.gaussian());
        let (seq, _) = enc.encode(&store, &x, None, "u").unwrap();
        // Hand-computed stacking: row g = [x[2g], x[2g+1]].
        for g in 0..2 {
            for j in 0..2 {
                for c in 0..6 {
                    assert_eq!(seq.frames.at(g, j * 6 + c), x.at(2 * g + j, c));
                }
            }
        }
    }

    #[test]
    fn padding_invariance_on_unpadded_positions() {
        let (enc, store) = make_encoder(2, 2);
        let mut rng = Rng::new(5);
        let x = Tensor2D::from_fn(8, 6, |_, _| rng.gaussian());
        let (clean, _) = enc.encode(&store, &x, None, "u").unwrap();
        // Append 4 padding frames and mask them out.
        let pad = Tensor2D::zeros(4, 6);
        let padded = Tensor2D::vcat(&[&x, &pad]);
        let mut mask = vec![true; 8];
        mask.extend([false; 4]);
        let (masked, _) = enc.encode(&store, &padded, Some(&mask), "u").unwrap();
        for r in 0..clean.frames.rows() {
            for c in 0..clean.frames.cols() {
                assert!(
                    (clean.frames.at(r, c) - masked.frames.at(r, c)).abs() < 1e-5,
                    "row {r} col {c}"
                );
            }
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let config = EncoderConfig {
            input_dim: 4,
            model_dim: 8,
            n_blocks: 2,
            head_count: 2,
            downsample_stride: 2,
        };
        let enc = AcousticEncoder::new("enc", config).unwrap();
        let mut store = ParamStore::new(7);
        let mut rng = Rng::new(7);
        enc.init(&mut store, &mut rng).unwrap();
        let x = Tensor2D::from_fn(6, 4, |_, _| rng.gaussian());
        let target = Tensor2D::from_fn(3, 8, |_, _| rng.gaussian());
        let report = crate::nn::grad_check(&mut store, 1e-3, |s, acc| {
            let (seq, cache) = enc.encode(s, &x, None, "u")?;
            let mut loss = 0.0;
            let mut up = Tensor2D::zeros(seq.frames.rows(), seq.frames.cols());
            for r in 0..seq.frames.rows() {
                for c in 0..seq.frames.cols() {
                    let d = seq.frames.at(r, c) - target.at(r, c);
                    loss += 0.5 * d * d;
                    up.set(r, c, d);
                }
            }
            if acc {
                enc.backward(s, &cache, &up)?;
            }
            Ok(loss)
        })
        .unwrap();
        assert!(report.passed, "{}", report.summary());
    }

    #[test]
    fn encoding_is_deterministic() {
        let (enc, store) = make_encoder(2, 2);
        let mut rng = Rng::new(11);
        let x = Tensor2D::from_fn(7, 6, |_, _| rng.gaussian());
        let (a, _) = enc.encode(&store, &x, None, "u").unwrap();
        let (b, _) = enc.encode(&store, &x, None, "u").unwrap();
        assert_eq!(a.frames, b.frames);
    }
}
