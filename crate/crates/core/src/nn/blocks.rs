//! Pre-norm transformer blocks built from the layer primitives.
//!
//! Residual wiring: x + Attn(LN(x)), then h + FF(LN(h)) with a GELU between
//! the two projections. The feed-forward hidden width is 2x the model width.

use super::layers::{AttnMask, Layer, LayerCache, LayerInput};
use super::{LayerSpec, ParamStore};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor2D;

/// Sinusoidal position table, T x dim.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor2D {
    let mut out = Tensor2D::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let rate = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let angle = pos as f64 * rate;
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            out.set(pos, i, v);
        }
    }
    out
}

/// Self-attention block (optionally causal).
#[derive(Debug, Clone)]
pub struct SelfAttnBlock {
    pub ln1: Layer,
    pub attn: Layer,
    pub ln2: Layer,
    pub ff1: Layer,
    pub act: Layer,
    pub ff2: Layer,
}

#[derive(Debug, Clone)]
pub struct SelfBlockCache {
    ln1: LayerCache,
    attn: LayerCache,
    ln2: LayerCache,
    ff1: LayerCache,
    act: LayerCache,
    ff2: LayerCache,
}

impl SelfAttnBlock {
    pub fn new(prefix: &str, model_dim: usize, heads: usize, causal: bool) -> Self {
        let hidden = model_dim * 2;
        SelfAttnBlock {
            ln1: Layer::new(LayerSpec::LayerNorm { dim: model_dim }, format!("{prefix}.ln1")),
            attn: Layer::new(
                LayerSpec::MultiHeadAttention {
                    model_dim,
                    heads,
                    causal,
                },
                format!("{prefix}.attn"),
            ),
            ln2: Layer::new(LayerSpec::LayerNorm { dim: model_dim }, format!("{prefix}.ln2")),
            ff1: Layer::new(
                LayerSpec::Linear {
                    d_in: model_dim,
                    d_out: hidden,
                },
                format!("{prefix}.ff1"),
            ),
            act: Layer::new(LayerSpec::Gelu, format!("{prefix}.act")),
            ff2: Layer::new(
                LayerSpec::Linear {
                    d_in: hidden,
                    d_out: model_dim,
                },
                format!("{prefix}.ff2"),
            ),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.ln1.init(store, rng)?;
        self.attn.init(store, rng)?;
        self.ln2.init(store, rng)?;
        self.ff1.init(store, rng)?;
        self.act.init(store, rng)?;
        self.ff2.init(store, rng)?;
        Ok(())
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor2D,
        mask: Option<&AttnMask>,
    ) -> Result<(Tensor2D, SelfBlockCache)> {
        let (n1, c_ln1) = self.ln1.forward(store, LayerInput::Dense(x), None)?;
        let (a, c_attn) = self.attn.forward(store, LayerInput::Dense(&n1), mask)?;
        let h = x.add(&a);
        let (n2, c_ln2) = self.ln2.forward(store, LayerInput::Dense(&h), None)?;
        let (f1, c_ff1) = self.ff1.forward(store, LayerInput::Dense(&n2), None)?;
        let (g, c_act) = self.act.forward(store, LayerInput::Dense(&f1), None)?;
        let (f2, c_ff2) = self.ff2.forward(store, LayerInput::Dense(&g), None)?;
        let y = h.add(&f2);
        Ok((
            y,
            SelfBlockCache {
                ln1: c_ln1,
                attn: c_attn,
                ln2: c_ln2,
                ff1: c_ff1,
                act: c_act,
                ff2: c_ff2,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &SelfBlockCache,
        upstream: &Tensor2D,
    ) -> Result<Tensor2D> {
        // y = h + ff2(act(ff1(ln2(h)))), h = x + attn(ln1(x))
        let d_f2 = self.ff2.backward(store, &cache.ff2, upstream)?.input;
        let d_g = self.act.backward(store, &cache.act, &d_f2)?.input;
        let d_n2 = self.ff1.backward(store, &cache.ff1, &d_g)?.input;
        let mut d_h = self.ln2.backward(store, &cache.ln2, &d_n2)?.input;
        d_h.add_assign(upstream);
        let d_a = d_h.clone();
        let d_n1 = self.attn.backward(store, &cache.attn, &d_a)?.input;
        let mut d_x = self.ln1.backward(store, &cache.ln1, &d_n1)?.input;
        d_x.add_assign(&d_h);
        Ok(d_x)
    }
}

/// Decoder block: causal self-attention, cross-attention to a memory
/// sequence, then the feed-forward.
#[derive(Debug, Clone)]
pub struct CrossAttnBlock {
    pub ln1: Layer,
    pub self_attn: Layer,
    pub ln2: Layer,
    pub cross: Layer,
    pub ln3: Layer,
    pub ff1: Layer,
    pub act: Layer,
    pub ff2: Layer,
}

#[derive(Debug, Clone)]
pub struct CrossBlockCache {
    ln1: LayerCache,
    self_attn: LayerCache,
    ln2: LayerCache,
    cross: LayerCache,
    ln3: LayerCache,
    ff1: LayerCache,
    act: LayerCache,
    ff2: LayerCache,
}

impl CrossAttnBlock {
    pub fn new(prefix: &str, model_dim: usize, memory_dim: usize, heads: usize) -> Self {
        let hidden = model_dim * 2;
        CrossAttnBlock {
            ln1: Layer::new(LayerSpec::LayerNorm { dim: model_dim }, format!("{prefix}.ln1")),
            self_attn: Layer::new(
                LayerSpec::MultiHeadAttention {
                    model_dim,
                    heads,
                    causal: true,
                },
                format!("{prefix}.self"),
            ),
            ln2: Layer::new(LayerSpec::LayerNorm { dim: model_dim }, format!("{prefix}.ln2")),
            cross: Layer::new(
                LayerSpec::CrossAttention {
                    model_dim,
                    memory_dim,
                    heads,
                },
                format!("{prefix}.cross"),
            ),
            ln3: Layer::new(LayerSpec::LayerNorm { dim: model_dim }, format!("{prefix}.ln3")),
            ff1: Layer::new(
                LayerSpec::Linear {
                    d_in: model_dim,
                    d_out: hidden,
                },
                format!("{prefix}.ff1"),
            ),
            act: Layer::new(LayerSpec::Gelu, format!("{prefix}.act")),
            ff2: Layer::new(
                LayerSpec::Linear {
                    d_in: hidden,
                    d_out: model_dim,
                },
                format!("{prefix}.ff2"),
            ),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.ln1.init(store, rng)?;
        self.self_attn.init(store, rng)?;
        self.ln2.init(store, rng)?;
        self.cross.init(store, rng)?;
        self.ln3.init(store, rng)?;
        self.ff1.init(store, rng)?;
        self.act.init(store, rng)?;
        self.ff2.init(store, rng)?;
        Ok(())
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor2D,
        memory: &Tensor2D,
        memory_mask: Option<&AttnMask>,
    ) -> Result<(Tensor2D, CrossBlockCache)> {
        let (n1, c_ln1) = self.ln1.forward(store, LayerInput::Dense(x), None)?;
        let (sa, c_self) = self.self_attn.forward(store, LayerInput::Dense(&n1), None)?;
        let h1 = x.add(&sa);
        let (n2, c_ln2) = self.ln2.forward(store, LayerInput::Dense(&h1), None)?;
        let (ca, c_cross) = self.cross.forward(
            store,
            LayerInput::QueryMemory {
                query: &n2,
                memory,
            },
            memory_mask,
        )?;
        let h2 = h1.add(&ca);
        let (n3, c_ln3) = self.ln3.forward(store, LayerInput::Dense(&h2), None)?;
        let (f1, c_ff1) = self.ff1.forward(store, LayerInput::Dense(&n3), None)?;
        let (g, c_act) = self.act.forward(store, LayerInput::Dense(&f1), None)?;
        let (f2, c_ff2) = self.ff2.forward(store, LayerInput::Dense(&g), None)?;
        let y = h2.add(&f2);
        Ok((
            y,
            CrossBlockCache {
                ln1: c_ln1,
                self_attn: c_self,
                ln2: c_ln2,
                cross: c_cross,
                ln3: c_ln3,
                ff1: c_ff1,
                act: c_act,
                ff2: c_ff2,
            },
        ))
    }

    /// Returns (d_input, d_memory).
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &CrossBlockCache,
        upstream: &Tensor2D,
    ) -> Result<(Tensor2D, Tensor2D)> {
        let d_f2 = self.ff2.backward(store, &cache.ff2, upstream)?.input;
        let d_g = self.act.backward(store, &cache.act, &d_f2)?.input;
        let d_n3 = self.ff1.backward(store, &cache.ff1, &d_g)?.input;
        let mut d_h2 = self.ln3.backward(store, &cache.ln3, &d_n3)?.input;
        d_h2.add_assign(upstream);

        let cross_grad = self.cross.backward(store, &cache.cross, &d_h2)?;
        let d_memory = cross_grad
            .memory
            .expect("cross attention returns memory grad");
        let mut d_h1 = self.ln2.backward(store, &cache.ln2, &cross_grad.input)?.input;
        d_h1.add_assign(&d_h2);

        let d_n1 = self.self_attn.backward(store, &cache.self_attn, &d_h1)?.input;
        let mut d_x = self.ln1.backward(store, &cache.ln1, &d_n1)?.input;
        d_x.add_assign(&d_h1);
        Ok((d_x, d_memory))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_alternate_sin_cos_and_start_at_zero_pattern() {
        let p = sinusoidal_positions(4, 6);
        // pos 0: sin(0)=0 on even dims, cos(0)=1 on odd dims.
        for i in 0..6 {
            let expect = if i % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(p.at(0, i), expect);
        }
        // Values bounded.
        assert!(p.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn self_block_residual_passes_shape_through() {
        let block = SelfAttnBlock::new("b0", 8, 2, false);
        let mut store = ParamStore::new(1);
        let mut rng = Rng::new(1);
        block.init(&mut store, &mut rng).unwrap();
        let mut xr = Rng::new(2);
        let x = Tensor2D::from_fn(5, 8, |_, _| xr.gaussian());
        let (y, _) = block.forward(&store, &x, None).unwrap();
        assert_eq!(y.shape(), (5, 8));
        assert!(y.is_finite());
    }
}
