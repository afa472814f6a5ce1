//! Transformer stacks shared by the decoders.
//!
//! Three composites cover every decoding head in the benchmark:
//! `BlockStack` (non-causal self-attention blocks + final norm, used by the
//! acoustic and text encoders), `CausalStack` (decoder-only token core), and
//! `CrossStack` (token decoder with cross-attention to a memory sequence).
//!
//! Each composite has a training path (forward with caches, hand-coded
//! backward) and an incremental inference path that carries per-block K/V
//! state so beam search costs one row per step, not one full forward.
//! Equality of the two paths is covered by tests.

use crate::error::Result;
use crate::lm::TokenId;
use crate::nn::{
    sinusoidal_positions, AttnMask, CrossAttnBlock, CrossBlockCache, Layer, LayerCache,
    LayerInput, LayerSpec, ParamStore, SelfAttnBlock, SelfBlockCache,
};
use crate::rng::Rng;
use crate::tensor::Tensor2D;

/// Embedding tables initialize at sigma 0.02 and are brought to unit scale
/// at use, matching the unit-amplitude sinusoids added on top.
pub const EMB_UNIT_SCALE: f64 = 50.0;
const TOKEN_POS_SCALE: f64 = 1.0;

/// Non-causal self-attention blocks with a final layer norm.
#[derive(Debug, Clone)]
pub struct BlockStack {
    pub blocks: Vec<SelfAttnBlock>,
    pub final_ln: Layer,
    pub model_dim: usize,
}

#[derive(Debug, Clone)]
pub struct BlockStackCache {
    blocks: Vec<SelfBlockCache>,
    final_ln: LayerCache,
}

impl BlockStack {
    pub fn new(prefix: &str, model_dim: usize, heads: usize, n_blocks: usize, causal: bool) -> Self {
        let blocks = (0..n_blocks)
            .map(|i| SelfAttnBlock::new(&format!("{prefix}.block{i}"), model_dim, heads, causal))
            .collect();
        BlockStack {
            blocks,
            final_ln: Layer::new(
                LayerSpec::LayerNorm { dim: model_dim },
                format!("{prefix}.final_ln"),
            ),
            model_dim,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        for b in &self.blocks {
            b.init(store, rng)?;
        }
        self.final_ln.init(store, rng)
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor2D,
        mask: Option<&AttnMask>,
    ) -> Result<(Tensor2D, BlockStackCache)> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward(store, &h, mask)?;
            caches.push(cache);
            h = next;
        }
        let (y, ln_cache) = self.final_ln.forward(store, LayerInput::Dense(&h), None)?;
        Ok((
            y,
            BlockStackCache {
                blocks: caches,
                final_ln: ln_cache,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &BlockStackCache,
        upstream: &Tensor2D,
    ) -> Result<Tensor2D> {
        let mut d = self
            .final_ln
            .backward(store, &cache.final_ln, upstream)?
            .input;
        for (b, c) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            d = b.backward(store, c, &d)?;
        }
        Ok(d)
    }
}

/// Decoder-only core: token embedding + sinusoidal positions + causal
/// blocks + final norm + vocab projection. Accepts raw embedding rows too,
/// which is how pseudo-token prefixes enter.
#[derive(Debug, Clone)]
pub struct CausalStack {
    pub emb: Layer,
    pub blocks: Vec<SelfAttnBlock>,
    pub final_ln: Layer,
    pub out: Layer,
    pub model_dim: usize,
    pub vocab: usize,
}

#[derive(Debug, Clone)]
pub struct CausalStackCache {
    blocks: Vec<SelfBlockCache>,
    final_ln: LayerCache,
    out: LayerCache,
}

impl CausalStack {
    pub fn new(prefix: &str, model_dim: usize, heads: usize, n_blocks: usize, vocab: usize) -> Self {
        CausalStack {
            emb: Layer::new(
                LayerSpec::Embedding {
                    vocab,
                    dim: model_dim,
                    scale: EMB_UNIT_SCALE,
                },
                format!("{prefix}.emb"),
            ),
            blocks: (0..n_blocks)
                .map(|i| {
                    SelfAttnBlock::new(&format!("{prefix}.block{i}"), model_dim, heads, true)
                })
                .collect(),
            final_ln: Layer::new(
                LayerSpec::LayerNorm { dim: model_dim },
                format!("{prefix}.final_ln"),
            ),
            out: Layer::new(
                LayerSpec::Linear {
                    d_in: model_dim,
                    d_out: vocab,
                },
                format!("{prefix}.out"),
            ),
            model_dim,
            vocab,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.emb.init(store, rng)?;
        for b in &self.blocks {
            b.init(store, rng)?;
        }
        self.final_ln.init(store, rng)?;
        self.out.init(store, rng)?;
        // Zero the vocab head so an untrained model is exactly uniform.
        store.get_mut(&self.out.name_of("w")).fill(0.0);
        Ok(())
    }

    /// Embedding rows plus positions for token ids, starting at position
    /// `pos_offset` (nonzero when a pseudo-token prefix precedes the text).
    pub fn embed_tokens(
        &self,
        store: &ParamStore,
        ids: &[TokenId],
        pos_offset: usize,
    ) -> Result<Tensor2D> {
        let (mut rows, _) = self.emb.forward(store, LayerInput::Ids(ids), None)?;
        let pos = sinusoidal_positions(pos_offset + ids.len(), self.model_dim);
        for r in 0..rows.rows() {
            for c in 0..self.model_dim {
                *rows.at_mut(r, c) += TOKEN_POS_SCALE * pos.at(pos_offset + r, c);
            }
        }
        Ok(rows)
    }

    /// Add positions to raw (pseudo-token) rows starting at `pos_offset`.
    pub fn position_rows(&self, rows: &Tensor2D, pos_offset: usize) -> Tensor2D {
        let pos = sinusoidal_positions(pos_offset + rows.rows(), self.model_dim);
        let mut out = rows.clone();
        for r in 0..out.rows() {
            for c in 0..self.model_dim {
                *out.at_mut(r, c) += TOKEN_POS_SCALE * pos.at(pos_offset + r, c);
            }
        }
        out
    }

    /// Forward over already-positioned embedding rows.
    pub fn forward_embedded(
        &self,
        store: &ParamStore,
        embs: &Tensor2D,
    ) -> Result<(Tensor2D, CausalStackCache)> {
        let mut h = embs.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward(store, &h, None)?;
            caches.push(cache);
            h = next;
        }
        let (n, ln_cache) = self.final_ln.forward(store, LayerInput::Dense(&h), None)?;
        let (logits, out_cache) = self.out.forward(store, LayerInput::Dense(&n), None)?;
        Ok((
            logits,
            CausalStackCache {
                blocks: caches,
                final_ln: ln_cache,
                out: out_cache,
            },
        ))
    }

    /// Backward to the embedding rows (caller routes rows to the embedding
    /// table or to the upstream network that produced them).
    pub fn backward_embedded(
        &self,
        store: &mut ParamStore,
        cache: &CausalStackCache,
        dlogits: &Tensor2D,
    ) -> Result<Tensor2D> {
        let d_n = self.out.backward(store, &cache.out, dlogits)?.input;
        let mut d = self.final_ln.backward(store, &cache.final_ln, &d_n)?.input;
        for (b, c) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            d = b.backward(store, c, &d)?;
        }
        Ok(d)
    }

    /// Scatter embedding-row gradients back into the table for rows that
    /// came from real tokens (positions are additive, so gradients pass
    /// through unchanged).
    pub fn accumulate_token_grads(
        &self,
        store: &mut ParamStore,
        ids: &[TokenId],
        d_rows: &Tensor2D,
        row_offset: usize,
    ) {
        let mut d_table = Tensor2D::zeros(self.vocab, self.model_dim);
        for (i, &id) in ids.iter().enumerate() {
            for c in 0..self.model_dim {
                *d_table.at_mut(id as usize, c) += d_rows.at(row_offset + i, c) * EMB_UNIT_SCALE;
            }
        }
        store.accum_grad(&self.emb.name_of("table"), &d_table);
    }

    pub fn start_state(&self) -> CausalState {
        CausalState {
            blocks: vec![BlockKv::default(); self.blocks.len()],
            pos: 0,
        }
    }

    /// Append one already-positioned embedding row; returns the vocab
    /// log-probabilities at this position.
    pub fn step_embedded(
        &self,
        store: &ParamStore,
        state: &mut CausalState,
        emb_row: &[f64],
    ) -> Vec<f64> {
        let mut h = emb_row.to_vec();
        for (b, kv) in self.blocks.iter().zip(state.blocks.iter_mut()) {
            h = self_block_step(store, b, kv, &h);
        }
        let n = ln_row(store, &self.final_ln, &h);
        let logits = linear_row(store, &self.out, &n);
        state.pos += 1;
        log_softmax_vec(&logits)
    }

    pub fn step_token(
        &self,
        store: &ParamStore,
        state: &mut CausalState,
        token: TokenId,
    ) -> Vec<f64> {
        let table = store.get(&self.emb.name_of("table"));
        let pos = sinusoidal_positions(state.pos + 1, self.model_dim);
        let row: Vec<f64> = (0..self.model_dim)
            .map(|c| {
                table.at(token as usize, c) * EMB_UNIT_SCALE + TOKEN_POS_SCALE * pos.at(state.pos, c)
            })
            .collect();
        self.step_embedded(store, state, &row)
    }
}

/// Token decoder with cross-attention to a fixed memory.
#[derive(Debug, Clone)]
pub struct CrossStack {
    pub emb: Layer,
    pub blocks: Vec<CrossAttnBlock>,
    pub final_ln: Layer,
    pub out: Layer,
    pub model_dim: usize,
    pub memory_dim: usize,
    pub vocab: usize,
}

#[derive(Debug, Clone)]
pub struct CrossStackCache {
    blocks: Vec<CrossBlockCache>,
    final_ln: LayerCache,
    out: LayerCache,
    memory_rows: usize,
}

impl CrossStack {
    pub fn new(
        prefix: &str,
        model_dim: usize,
        memory_dim: usize,
        heads: usize,
        n_blocks: usize,
        vocab: usize,
    ) -> Self {
        CrossStack {
            emb: Layer::new(
                LayerSpec::Embedding {
                    vocab,
                    dim: model_dim,
                    scale: EMB_UNIT_SCALE,
                },
                format!("{prefix}.emb"),
            ),
            blocks: (0..n_blocks)
                .map(|i| {
                    CrossAttnBlock::new(
                        &format!("{prefix}.block{i}"),
                        model_dim,
                        memory_dim,
                        heads,
                    )
                })
                .collect(),
            final_ln: Layer::new(
                LayerSpec::LayerNorm { dim: model_dim },
                format!("{prefix}.final_ln"),
            ),
            out: Layer::new(
                LayerSpec::Linear {
                    d_in: model_dim,
                    d_out: vocab,
                },
                format!("{prefix}.out"),
            ),
            model_dim,
            memory_dim,
            vocab,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.emb.init(store, rng)?;
        for b in &self.blocks {
            b.init(store, rng)?;
        }
        self.final_ln.init(store, rng)?;
        self.out.init(store, rng)?;
        store.get_mut(&self.out.name_of("w")).fill(0.0);
        Ok(())
    }

    /// Teacher-forced forward: embed `input_ids`, run the blocks against
    /// `memory`, project to vocab logits.
    pub fn forward_train(
        &self,
        store: &ParamStore,
        input_ids: &[TokenId],
        memory: &Tensor2D,
        memory_mask: Option<&AttnMask>,
    ) -> Result<(Tensor2D, CrossStackCache)> {
        let (mut h, _) = self.emb.forward(store, LayerInput::Ids(input_ids), None)?;
        let pos = sinusoidal_positions(input_ids.len(), self.model_dim);
        for r in 0..h.rows() {
            for c in 0..self.model_dim {
                *h.at_mut(r, c) += TOKEN_POS_SCALE * pos.at(r, c);
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward(store, &h, memory, memory_mask)?;
            caches.push(cache);
            h = next;
        }
        let (n, ln_cache) = self.final_ln.forward(store, LayerInput::Dense(&h), None)?;
        let (logits, out_cache) = self.out.forward(store, LayerInput::Dense(&n), None)?;
        Ok((
            logits,
            CrossStackCache {
                blocks: caches,
                final_ln: ln_cache,
                out: out_cache,
                memory_rows: memory.rows(),
            },
        ))
    }

    /// Backward; accumulates parameter and embedding gradients internally
    /// and returns the memory gradient.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &CrossStackCache,
        input_ids: &[TokenId],
        dlogits: &Tensor2D,
    ) -> Result<Tensor2D> {
        let d_n = self.out.backward(store, &cache.out, dlogits)?.input;
        let mut d = self.final_ln.backward(store, &cache.final_ln, &d_n)?.input;
        let mut d_memory = Tensor2D::zeros(cache.memory_rows, self.memory_dim);
        for (b, c) in self.blocks.iter().zip(cache.blocks.iter()).rev() {
            let (d_x, d_mem) = b.backward(store, c, &d)?;
            d = d_x;
            d_memory.add_assign(&d_mem);
        }
        let mut d_table = Tensor2D::zeros(self.vocab, self.model_dim);
        for (i, &id) in input_ids.iter().enumerate() {
            for c in 0..self.model_dim {
                *d_table.at_mut(id as usize, c) += d.at(i, c) * EMB_UNIT_SCALE;
            }
        }
        store.accum_grad(&self.emb.name_of("table"), &d_table);
        Ok(d_memory)
    }

    /// Precompute per-block cross K/V for a memory sequence and start an
    /// incremental decode.
    pub fn start_state(
        &self,
        store: &ParamStore,
        memory: &Tensor2D,
        memory_mask: Option<&AttnMask>,
    ) -> CrossState {
        let cross_kv = self
            .blocks
            .iter()
            .map(|b| {
                let k = memory
                    .matmul(store.get(&b.cross.name_of("wk")))
                    .add_row_broadcast(store.get(&b.cross.name_of("bk")));
                let v = memory
                    .matmul(store.get(&b.cross.name_of("wv")))
                    .add_row_broadcast(store.get(&b.cross.name_of("bv")));
                (k, v)
            })
            .collect();
        CrossState {
            self_kv: vec![BlockKv::default(); self.blocks.len()],
            cross_kv,
            usable: memory_mask.map(|m| m.usable.clone()),
            pos: 0,
        }
    }

    pub fn step_token(
        &self,
        store: &ParamStore,
        state: &mut CrossState,
        token: TokenId,
    ) -> Vec<f64> {
        let table = store.get(&self.emb.name_of("table"));
        let pos = sinusoidal_positions(state.pos + 1, self.model_dim);
        let mut h: Vec<f64> = (0..self.model_dim)
            .map(|c| {
                table.at(token as usize, c) * EMB_UNIT_SCALE + TOKEN_POS_SCALE * pos.at(state.pos, c)
            })
            .collect();
        let heads = match self.blocks[0].self_attn.spec {
            LayerSpec::MultiHeadAttention { heads, .. } => heads,
            _ => unreachable!(),
        };
        for (bi, b) in self.blocks.iter().enumerate() {
            // Causal self-attention over cached rows.
            let n1 = ln_row(store, &b.ln1, &h);
            let sa = attn_step(store, &b.self_attn, &mut state.self_kv[bi], &n1, heads);
            let h1: Vec<f64> = h.iter().zip(sa.iter()).map(|(a, b)| a + b).collect();
            // Cross attention over the fixed memory K/V.
            let n2 = ln_row(store, &b.ln2, &h1);
            let (mem_k, mem_v) = &state.cross_kv[bi];
            let ca = cross_attn_row(
                store,
                &b.cross,
                mem_k,
                mem_v,
                state.usable.as_deref(),
                &n2,
                heads,
            );
            let h2: Vec<f64> = h1.iter().zip(ca.iter()).map(|(a, b)| a + b).collect();
            let n3 = ln_row(store, &b.ln3, &h2);
            let f1 = linear_row(store, &b.ff1, &n3);
            let g: Vec<f64> = f1.iter().map(|&x| crate::nn::gelu_scalar(x)).collect();
            let f2 = linear_row(store, &b.ff2, &g);
            h = h2.iter().zip(f2.iter()).map(|(a, b)| a + b).collect();
        }
        let n = ln_row(store, &self.final_ln, &h);
        let logits = linear_row(store, &self.out, &n);
        state.pos += 1;
        log_softmax_vec(&logits)
    }
}

/// Growing K/V rows for one self-attention block.
#[derive(Debug, Clone, Default)]
pub struct BlockKv {
    k_rows: Vec<Vec<f64>>,
    v_rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct CausalState {
    blocks: Vec<BlockKv>,
    pub pos: usize,
}

#[derive(Debug, Clone)]
pub struct CrossState {
    self_kv: Vec<BlockKv>,
    cross_kv: Vec<(Tensor2D, Tensor2D)>,
    usable: Option<Vec<bool>>,
    pub pos: usize,
}

fn ln_row(store: &ParamStore, layer: &Layer, row: &[f64]) -> Vec<f64> {
    let gain = store.get(&layer.name_of("gain"));
    let bias = store.get(&layer.name_of("bias"));
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let istd = 1.0 / (var + 1e-5).sqrt();
    row.iter()
        .enumerate()
        .map(|(c, &v)| gain.at(0, c) * ((v - mean) * istd) + bias.at(0, c))
        .collect()
}

fn linear_row(store: &ParamStore, layer: &Layer, row: &[f64]) -> Vec<f64> {
    let w = store.get(&layer.name_of("w"));
    let b = store.get(&layer.name_of("b"));
    let mut out: Vec<f64> = (0..w.cols()).map(|c| b.at(0, c)).collect();
    for (i, &x) in row.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        let w_row = w.row(i);
        for (o, &wv) in out.iter_mut().zip(w_row.iter()) {
            *o += x * wv;
        }
    }
    out
}

/// One causal self-attention step: project the new row, append K/V, attend
/// over everything cached (including self).
fn attn_step(
    store: &ParamStore,
    layer: &Layer,
    kv: &mut BlockKv,
    row: &[f64],
    heads: usize,
) -> Vec<f64> {
    let model_dim = row.len();
    let dh = model_dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = proj_row(store, layer, row, "wq", "bq");
    let k = proj_row(store, layer, row, "wk", "bk");
    let v = proj_row(store, layer, row, "wv", "bv");
    kv.k_rows.push(k);
    kv.v_rows.push(v);
    let t = kv.k_rows.len();
    let mut context = vec![0.0; model_dim];
    for h in 0..heads {
        let off = h * dh;
        let mut scores = Vec::with_capacity(t);
        for j in 0..t {
            let mut s = 0.0;
            for d in 0..dh {
                s += q[off + d] * kv.k_rows[j][off + d];
            }
            scores.push(s * scale);
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for (j, s) in scores.iter().enumerate() {
            let w = s / sum;
            for d in 0..dh {
                context[off + d] += w * kv.v_rows[j][off + d];
            }
        }
    }
    let mut out = proj_vec(store, layer, &context, "wo");
    let bo = store.get(&layer.name_of("bo"));
    for (c, o) in out.iter_mut().enumerate() {
        *o += bo.at(0, c);
    }
    out
}

/// Cross-attention of one query row over precomputed memory K/V.
fn cross_attn_row(
    store: &ParamStore,
    layer: &Layer,
    mem_k: &Tensor2D,
    mem_v: &Tensor2D,
    usable: Option<&[bool]>,
    row: &[f64],
    heads: usize,
) -> Vec<f64> {
    let model_dim = row.len();
    let dh = model_dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = proj_row(store, layer, row, "wq", "bq");
    let tk = mem_k.rows();
    let mut context = vec![0.0; model_dim];
    for h in 0..heads {
        let off = h * dh;
        let mut scores = vec![f64::NEG_INFINITY; tk];
        let mut any = false;
        for j in 0..tk {
            if let Some(u) = usable {
                if !u[j] {
                    continue;
                }
            }
            let mut s = 0.0;
            for d in 0..dh {
                s += q[off + d] * mem_k.at(j, off + d);
            }
            scores[j] = s * scale;
            any = true;
        }
        if !any {
            continue; // zero context
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in scores.iter_mut() {
            if *s == f64::NEG_INFINITY {
                *s = 0.0;
            } else {
                *s = (*s - max).exp();
                sum += *s;
            }
        }
        for (j, s) in scores.iter().enumerate() {
            let w = s / sum;
            if w == 0.0 {
                continue;
            }
            for d in 0..dh {
                context[off + d] += w * mem_v.at(j, off + d);
            }
        }
    }
    let mut out = proj_vec(store, layer, &context, "wo");
    let bo = store.get(&layer.name_of("bo"));
    for (c, o) in out.iter_mut().enumerate() {
        *o += bo.at(0, c);
    }
    out
}

fn proj_row(store: &ParamStore, layer: &Layer, row: &[f64], w: &str, b: &str) -> Vec<f64> {
    let wm = store.get(&layer.name_of(w));
    let bm = store.get(&layer.name_of(b));
    let mut out: Vec<f64> = (0..wm.cols()).map(|c| bm.at(0, c)).collect();
    for (i, &x) in row.iter().enumerate() {
        let w_row = wm.row(i);
        for (o, &wv) in out.iter_mut().zip(w_row.iter()) {
            *o += x * wv;
        }
    }
    out
}

fn proj_vec(store: &ParamStore, layer: &Layer, row: &[f64], w: &str) -> Vec<f64> {
    let wm = store.get(&layer.name_of(w));
    let mut out = vec![0.0; wm.cols()];
    for (i, &x) in row.iter().enumerate() {
        let w_row = wm.row(i);
        for (o, &wv) in out.iter_mut().zip(w_row.iter()) {
            *o += x * wv;
        }
    }
    out
}

fn self_block_step(
    store: &ParamStore,
    block: &SelfAttnBlock,
    kv: &mut BlockKv,
    row: &[f64],
) -> Vec<f64> {
    let heads = match block.attn.spec {
        LayerSpec::MultiHeadAttention { heads, .. } => heads,
        _ => unreachable!(),
    };
    let n1 = ln_row(store, &block.ln1, row);
    let sa = attn_step(store, &block.attn, kv, &n1, heads);
    let h: Vec<f64> = row.iter().zip(sa.iter()).map(|(a, b)| a + b).collect();
    let n2 = ln_row(store, &block.ln2, &h);
    let f1 = linear_row(store, &block.ff1, &n2);
    let g: Vec<f64> = f1.iter().map(|&x| crate::nn::gelu_scalar(x)).collect();
    let f2 = linear_row(store, &block.ff2, &g);
    h.iter().zip(f2.iter()).map(|(a, b)| a + b).collect()
}

fn log_softmax_vec(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .map(|v| (v - max).exp())
            .sum::<f64>()
            .ln();
    logits.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::cross_entropy_from_logits;
    use crate::nn::XentOptions;

    #[test]
    fn causal_stack_incremental_matches_full_forward() {
        let stack = CausalStack::new("lm", 16, 4, 2, 12);
        let mut store = ParamStore::new(3);
        let mut rng = Rng::new(3);
        stack.init(&mut store, &mut rng).unwrap();
        let ids: Vec<TokenId> = vec![1, 5, 3, 9, 0, 7];
        let embs = stack.embed_tokens(&store, &ids, 0).unwrap();
        let (logits, _) = stack.forward_embedded(&store, &embs).unwrap();
        let (full_logp, _) = crate::nn::log_softmax_pair(&logits);

        let mut state = stack.start_state();
        for (t, &id) in ids.iter().enumerate() {
            let step_logp = stack.step_token(&store, &mut state, id);
            for c in 0..12 {
                assert!(
                    (step_logp[c] - full_logp.at(t, c)).abs() < 1e-9,
                    "pos {t} class {c}: {} vs {}",
                    step_logp[c],
                    full_logp.at(t, c)
                );
            }
        }
    }

    #[test]
    fn causal_stack_incremental_matches_full_with_pseudo_prefix() {
        let stack = CausalStack::new("lm", 16, 2, 2, 10);
        let mut store = ParamStore::new(7);
        let mut rng = Rng::new(7);
        stack.init(&mut store, &mut rng).unwrap();
        let prefix = Tensor2D::from_fn(3, 16, |_, _| rng.gaussian() * 0.3);
        let ids: Vec<TokenId> = vec![2, 8, 4];

        let placed_prefix = stack.position_rows(&prefix, 0);
        let token_rows = stack.embed_tokens(&store, &ids, 3).unwrap();
        let joint = Tensor2D::vcat(&[&placed_prefix, &token_rows]);
        let (logits, _) = stack.forward_embedded(&store, &joint).unwrap();
        let (full_logp, _) = crate::nn::log_softmax_pair(&logits);

        let mut state = stack.start_state();
        for r in 0..3 {
            let _ = stack.step_embedded(&store, &mut state, placed_prefix.row(r));
        }
        for (t, &id) in ids.iter().enumerate() {
            let step_logp = stack.step_token(&store, &mut state, id);
            for c in 0..10 {
                assert!((step_logp[c] - full_logp.at(3 + t, c)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cross_stack_incremental_matches_full_forward() {
        let stack = CrossStack::new("dec", 16, 12, 4, 2, 9);
        let mut store = ParamStore::new(11);
        let mut rng = Rng::new(11);
        stack.init(&mut store, &mut rng).unwrap();
        let memory = Tensor2D::from_fn(5, 12, |_, _| rng.gaussian());
        let ids: Vec<TokenId> = vec![4, 1, 7, 2];
        let (logits, _) = stack.forward_train(&store, &ids, &memory, None).unwrap();
        let (full_logp, _) = crate::nn::log_softmax_pair(&logits);

        let mut state = stack.start_state(&store, &memory, None);
        for (t, &id) in ids.iter().enumerate() {
            let step_logp = stack.step_token(&store, &mut state, id);
            for c in 0..9 {
                assert!(
                    (step_logp[c] - full_logp.at(t, c)).abs() < 1e-9,
                    "pos {t} class {c}"
                );
            }
        }
    }

    #[test]
    fn cross_stack_memory_mask_matches_truncated_memory() {
        let stack = CrossStack::new("dec", 16, 12, 2, 1, 9);
        let mut store = ParamStore::new(13);
        let mut rng = Rng::new(13);
        stack.init(&mut store, &mut rng).unwrap();
        let memory = Tensor2D::from_fn(6, 12, |_, _| rng.gaussian());
        let truncated = memory.slice_rows(0, 4);
        let mask = AttnMask {
            usable: vec![true, true, true, true, false, false],
        };
        let ids: Vec<TokenId> = vec![3, 6];
        let (a, _) = stack
            .forward_train(&store, &ids, &memory, Some(&mask))
            .unwrap();
        let (b, _) = stack.forward_train(&store, &ids, &truncated, None).unwrap();
        assert!(a.approx_eq(&b, 1e-9));
    }

    #[test]
    fn causal_stack_gradients_match_finite_differences() {
        let stack = CausalStack::new("lm", 8, 2, 1, 6);
        let mut store = ParamStore::new(17);
        let mut rng = Rng::new(17);
        stack.init(&mut store, &mut rng).unwrap();
        let ids: Vec<TokenId> = vec![1, 4, 2];
        let targets: Vec<TokenId> = vec![4, 2, 5];
        let include = vec![true, true, true];
        let report = crate::nn::grad_check(&mut store, 1e-3, |s, acc| {
            let embs = stack.embed_tokens(s, &ids, 0)?;
            let (logits, cache) = stack.forward_embedded(s, &embs)?;
            let (loss, dlogits) = cross_entropy_from_logits(
                &logits,
                &targets,
                &include,
                XentOptions::default(),
            )?;
            if acc {
                let d_embs = stack.backward_embedded(s, &cache, &dlogits)?;
                stack.accumulate_token_grads(s, &ids, &d_embs, 0);
            }
            Ok(loss)
        })
        .unwrap();
        assert!(report.passed, "{}", report.summary());
    }

    #[test]
    fn cross_stack_gradients_match_finite_differences() {
        let stack = CrossStack::new("dec", 8, 6, 2, 1, 6);
        let pre = Layer::new(LayerSpec::Linear { d_in: 6, d_out: 6 }, "pre");
        let mut store = ParamStore::new(19);
        let mut rng = Rng::new(19);
        stack.init(&mut store, &mut rng).unwrap();
        pre.init(&mut store, &mut rng).unwrap();
        let mem_raw = Tensor2D::from_fn(4, 6, |_, _| rng.gaussian());
        let ids: Vec<TokenId> = vec![1, 3];
        let targets: Vec<TokenId> = vec![3, 0];
        let include = vec![true, true];
        let report = crate::nn::grad_check(&mut store, 1e-3, |s, acc| {
            let (memory, pre_cache) = pre.forward(s, LayerInput::Dense(&mem_raw), None)?;
            let (logits, cache) = stack.forward_train(s, &ids, &memory, None)?;
            let (loss, dlogits) = cross_entropy_from_logits(
                &logits,
                &targets,
                &include,
                XentOptions::default(),
            )?;
            if acc {
                let d_mem = stack.backward(s, &cache, &ids, &dlogits)?;
                pre.backward(s, &pre_cache, &d_mem)?;
            }
            Ok(loss)
        })
        .unwrap();
        assert!(report.passed, "{}", report.summary());
    }
}
