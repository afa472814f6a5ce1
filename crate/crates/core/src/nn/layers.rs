//! Layer forward/backward primitives.
//!
//! Each forward returns the output plus a cache holding exactly what the
//! matching backward needs. Backward accumulates parameter gradients into the
//! store (+=) and returns input gradients.

use super::{LayerSpec, ParamStore};
use crate::error::{Error, Result};
use crate::lm::TokenId;
use crate::rng::Rng;
use crate::tensor::Tensor2D;

/// Key-position usability mask. Causality is a property of the layer spec;
/// this mask only marks padded positions.
#[derive(Debug, Clone)]
pub struct AttnMask {
    pub usable: Vec<bool>,
}

impl AttnMask {
    pub fn all_usable(n: usize) -> Self {
        AttnMask {
            usable: vec![true; n],
        }
    }
}

pub enum LayerInput<'a> {
    Dense(&'a Tensor2D),
    Ids(&'a [TokenId]),
    QueryMemory {
        query: &'a Tensor2D,
        memory: &'a Tensor2D,
    },
}

/// Input gradients from a backward pass. `memory` is present only for
/// cross-attention.
#[derive(Debug)]
pub struct LayerGrad {
    pub input: Tensor2D,
    pub memory: Option<Tensor2D>,
}

#[derive(Debug, Clone)]
pub enum LayerCache {
    Linear {
        input: Tensor2D,
    },
    Embedding {
        ids: Vec<TokenId>,
        dim: usize,
    },
    LayerNorm {
        normalized: Tensor2D,
        inv_std: Vec<f64>,
    },
    Attention {
        query_in: Tensor2D,
        memory_in: Tensor2D,
        q: Tensor2D,
        k: Tensor2D,
        v: Tensor2D,
        // Per head: Tq x Tk attention weights after softmax (zeroed rows for
        // fully masked queries).
        weights: Vec<Tensor2D>,
        context: Tensor2D,
        all_masked_rows: Vec<usize>,
        self_attention: bool,
    },
    Gelu {
        input: Tensor2D,
    },
    LogSoftmax {
        probs: Tensor2D,
    },
}

/// A layer spec bound to a parameter-name prefix in some store.
#[derive(Debug, Clone)]
pub struct Layer {
    pub spec: LayerSpec,
    pub prefix: String,
}

impl Layer {
    pub fn new(spec: LayerSpec, prefix: impl Into<String>) -> Self {
        Layer {
            spec,
            prefix: prefix.into(),
        }
    }

    pub fn name_of(&self, suffix: &str) -> String {
        format!("{}.{}", self.prefix, suffix)
    }

    /// Create and register this layer's parameters.
    pub fn init(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.spec.validate()?;
        match self.spec {
            LayerSpec::Linear { d_in, d_out } => {
                store.add(&self.name_of("w"), super::xavier_uniform(d_in, d_out, rng));
                store.add(&self.name_of("b"), Tensor2D::zeros(1, d_out));
            }
            LayerSpec::Embedding { vocab, dim, .. } => {
                store.add(&self.name_of("table"), super::embedding_init(vocab, dim, rng));
            }
            LayerSpec::LayerNorm { dim } => {
                store.add(&self.name_of("gain"), Tensor2D::from_vec(1, dim, vec![1.0; dim]));
                store.add(&self.name_of("bias"), Tensor2D::zeros(1, dim));
            }
            LayerSpec::MultiHeadAttention { model_dim, .. } => {
                self.init_attention(store, rng, model_dim, model_dim);
            }
            LayerSpec::CrossAttention {
                model_dim,
                memory_dim,
                ..
            } => {
                self.init_attention(store, rng, model_dim, memory_dim);
            }
            LayerSpec::Gelu | LayerSpec::SoftmaxXent { .. } => {}
        }
        Ok(())
    }

    fn init_attention(
        &self,
        store: &mut ParamStore,
        rng: &mut Rng,
        model_dim: usize,
        memory_dim: usize,
    ) {
        store.add(
            &self.name_of("wq"),
            super::xavier_uniform(model_dim, model_dim, rng),
        );
        store.add(&self.name_of("bq"), Tensor2D::zeros(1, model_dim));
        store.add(
            &self.name_of("wk"),
            super::xavier_uniform(memory_dim, model_dim, rng),
        );
        store.add(&self.name_of("bk"), Tensor2D::zeros(1, model_dim));
        store.add(
            &self.name_of("wv"),
            super::xavier_uniform(memory_dim, model_dim, rng),
        );
        store.add(&self.name_of("bv"), Tensor2D::zeros(1, model_dim));
        store.add(
            &self.name_of("wo"),
            super::xavier_uniform(model_dim, model_dim, rng),
        );
        store.add(&self.name_of("bo"), Tensor2D::zeros(1, model_dim));
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        input: LayerInput<'_>,
        mask: Option<&AttnMask>,
    ) -> Result<(Tensor2D, LayerCache)> {
        match (&self.spec, input) {
            (LayerSpec::Linear { d_in, d_out }, LayerInput::Dense(x)) => {
                if x.cols() != *d_in {
                    return Err(Error::dim(
                        format!("Tx{d_in}"),
                        x.shape_str(),
                        "linear input",
                    ));
                }
                let w = store.get(&self.name_of("w"));
                let b = store.get(&self.name_of("b"));
                debug_assert_eq!(w.shape(), (*d_in, *d_out));
                let y = x.matmul(w).add_row_broadcast(b);
                Ok((y, LayerCache::Linear { input: x.clone() }))
            }
            (LayerSpec::Embedding { vocab, dim, scale }, LayerInput::Ids(ids)) => {
                let table = store.get(&self.name_of("table"));
                let mut out = Tensor2D::zeros(ids.len(), *dim);
                for (r, &id) in ids.iter().enumerate() {
                    if id as usize >= *vocab {
                        return Err(Error::Vocab(format!(
                            "token id {id} outside embedding vocab {vocab}"
                        )));
                    }
                    for (o, &t) in out.row_mut(r).iter_mut().zip(table.row(id as usize)) {
                        *o = t * scale;
                    }
                }
                Ok((
                    out,
                    LayerCache::Embedding {
                        ids: ids.to_vec(),
                        dim: *dim,
                    },
                ))
            }
            (LayerSpec::LayerNorm { dim }, LayerInput::Dense(x)) => {
                if x.cols() != *dim {
                    return Err(Error::dim(
                        format!("Tx{dim}"),
                        x.shape_str(),
                        "layer_norm input",
                    ));
                }
                let gain = store.get(&self.name_of("gain"));
                let bias = store.get(&self.name_of("bias"));
                let eps = 1e-5;
                let mut normalized = Tensor2D::zeros(x.rows(), x.cols());
                let mut inv_std = Vec::with_capacity(x.rows());
                let mut out = Tensor2D::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let row = x.row(r);
                    let n = row.len() as f64;
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let istd = 1.0 / (var + eps).sqrt();
                    inv_std.push(istd);
                    for c in 0..x.cols() {
                        let nv = (row[c] - mean) * istd;
                        normalized.set(r, c, nv);
                        out.set(r, c, gain.at(0, c) * nv + bias.at(0, c));
                    }
                }
                Ok((out, LayerCache::LayerNorm { normalized, inv_std }))
            }
            (
                LayerSpec::MultiHeadAttention {
                    model_dim,
                    heads,
                    causal,
                },
                LayerInput::Dense(x),
            ) => self.attention_forward(store, x, x, *model_dim, *heads, *causal, mask, true),
            (
                LayerSpec::CrossAttention {
                    model_dim,
                    memory_dim,
                    heads,
                },
                LayerInput::QueryMemory { query, memory },
            ) => {
                if memory.cols() != *memory_dim {
                    return Err(Error::dim(
                        format!("Tx{memory_dim}"),
                        memory.shape_str(),
                        "cross_attention memory",
                    ));
                }
                self.attention_forward(store, query, memory, *model_dim, *heads, false, mask, false)
            }
            (LayerSpec::Gelu, LayerInput::Dense(x)) => {
                let mut y = x.clone();
                for v in y.data_mut() {
                    *v = gelu(*v);
                }
                Ok((y, LayerCache::Gelu { input: x.clone() }))
            }
            (LayerSpec::SoftmaxXent { classes }, LayerInput::Dense(logits)) => {
                if logits.cols() != *classes {
                    return Err(Error::dim(
                        format!("Tx{classes}"),
                        logits.shape_str(),
                        "softmax_xent logits",
                    ));
                }
                let (logp, probs) = log_softmax_rows(logits);
                Ok((logp, LayerCache::LogSoftmax { probs }))
            }
            _ => Err(Error::State(format!(
                "input kind does not match layer {:?}",
                self.spec
            ))),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_forward(
        &self,
        store: &ParamStore,
        query_in: &Tensor2D,
        memory_in: &Tensor2D,
        model_dim: usize,
        heads: usize,
        causal: bool,
        mask: Option<&AttnMask>,
        self_attention: bool,
    ) -> Result<(Tensor2D, LayerCache)> {
        if query_in.cols() != model_dim {
            return Err(Error::dim(
                format!("Tx{model_dim}"),
                query_in.shape_str(),
                "attention query",
            ));
        }
        if let Some(m) = mask {
            if m.usable.len() != memory_in.rows() {
                return Err(Error::dim(
                    format!("{} mask entries", memory_in.rows()),
                    format!("{}", m.usable.len()),
                    "attention mask",
                ));
            }
        }
        let dh = model_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = query_in
            .matmul(store.get(&self.name_of("wq")))
            .add_row_broadcast(store.get(&self.name_of("bq")));
        let k = memory_in
            .matmul(store.get(&self.name_of("wk")))
            .add_row_broadcast(store.get(&self.name_of("bk")));
        let v = memory_in
            .matmul(store.get(&self.name_of("wv")))
            .add_row_broadcast(store.get(&self.name_of("bv")));
        let tq = q.rows();
        let tk = k.rows();
        let mut weights = Vec::with_capacity(heads);
        let mut context = Tensor2D::zeros(tq, model_dim);
        let mut all_masked_rows: Vec<usize> = Vec::new();
        for h in 0..heads {
            let off = h * dh;
            let mut a = Tensor2D::zeros(tq, tk);
            for i in 0..tq {
                let q_head = &q.row(i)[off..off + dh];
                // Raw scores with masking.
                let mut row = vec![f64::NEG_INFINITY; tk];
                let mut any = false;
                for (j, slot) in row.iter_mut().enumerate() {
                    if causal && j > i {
                        continue;
                    }
                    if let Some(m) = mask {
                        if !m.usable[j] {
                            continue;
                        }
                    }
                    let k_head = &k.row(j)[off..off + dh];
                    let mut s = 0.0;
                    for (&qv, &kv) in q_head.iter().zip(k_head.iter()) {
                        s += qv * kv;
                    }
                    *slot = s * scale;
                    any = true;
                }
                if !any {
                    // Zero context for fully masked rows; flagged once (on
                    // the first head, rows repeat across heads).
                    if h == 0 {
                        all_masked_rows.push(i);
                    }
                    continue;
                }
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for val in row.iter_mut() {
                    if *val == f64::NEG_INFINITY {
                        *val = 0.0;
                    } else {
                        *val = (*val - max).exp();
                        sum += *val;
                    }
                }
                let inv = 1.0 / sum;
                let ctx_head = &mut context.row_mut(i)[off..off + dh];
                for (j, val) in row.iter().enumerate() {
                    let w = val * inv;
                    a.set(i, j, w);
                    if w == 0.0 {
                        continue;
                    }
                    let v_head = &v.row(j)[off..off + dh];
                    for (c, &vv) in ctx_head.iter_mut().zip(v_head.iter()) {
                        *c += w * vv;
                    }
                }
            }
            weights.push(a);
        }
        let out = context
            .matmul(store.get(&self.name_of("wo")))
            .add_row_broadcast(store.get(&self.name_of("bo")));
        Ok((
            out,
            LayerCache::Attention {
                query_in: query_in.clone(),
                memory_in: memory_in.clone(),
                q,
                k,
                v,
                weights,
                context,
                all_masked_rows,
                self_attention,
            },
        ))
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &LayerCache,
        upstream: &Tensor2D,
    ) -> Result<LayerGrad> {
        match (&self.spec, cache) {
            (LayerSpec::Linear { .. }, LayerCache::Linear { input }) => {
                if upstream.rows() != input.rows() {
                    return Err(Error::State(
                        "stale cache: upstream rows do not match cached input".into(),
                    ));
                }
                let w_name = self.name_of("w");
                let w = store.get(&w_name).clone();
                let dx = upstream.matmul_nt(&w);
                if !store.is_frozen(&w_name) {
                    let dw = input.matmul_tn(upstream);
                    let mut db = Tensor2D::zeros(1, upstream.cols());
                    for r in 0..upstream.rows() {
                        for c in 0..upstream.cols() {
                            *db.at_mut(0, c) += upstream.at(r, c);
                        }
                    }
                    store.accum_grad(&w_name, &dw);
                    store.accum_grad(&self.name_of("b"), &db);
                }
                Ok(LayerGrad {
                    input: dx,
                    memory: None,
                })
            }
            (LayerSpec::Embedding { vocab, scale, .. }, LayerCache::Embedding { ids, dim }) => {
                if upstream.rows() != ids.len() || upstream.cols() != *dim {
                    return Err(Error::State(
                        "stale cache: upstream shape does not match embedded ids".into(),
                    ));
                }
                let table_name = self.name_of("table");
                if !store.is_frozen(&table_name) {
                    let mut dtable = Tensor2D::zeros(*vocab, *dim);
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..*dim {
                            *dtable.at_mut(id as usize, c) += upstream.at(r, c) * scale;
                        }
                    }
                    store.accum_grad(&table_name, &dtable);
                }
                // Ids carry no gradient.
                Ok(LayerGrad {
                    input: Tensor2D::zeros(0, 0),
                    memory: None,
                })
            }
            (LayerSpec::LayerNorm { .. }, LayerCache::LayerNorm { normalized, inv_std }) => {
                if upstream.shape() != normalized.shape() {
                    return Err(Error::State(
                        "stale cache: upstream shape does not match layer_norm cache".into(),
                    ));
                }
                let gain = store.get(&self.name_of("gain")).clone();
                let n = normalized.cols() as f64;
                let mut dx = Tensor2D::zeros(normalized.rows(), normalized.cols());
                let mut dgain = Tensor2D::zeros(1, normalized.cols());
                let mut dbias = Tensor2D::zeros(1, normalized.cols());
                for r in 0..normalized.rows() {
                    let mut sum_dnorm = 0.0;
                    let mut sum_dnorm_norm = 0.0;
                    for c in 0..normalized.cols() {
                        let up = upstream.at(r, c);
                        let dn = up * gain.at(0, c);
                        sum_dnorm += dn;
                        sum_dnorm_norm += dn * normalized.at(r, c);
                        *dgain.at_mut(0, c) += up * normalized.at(r, c);
                        *dbias.at_mut(0, c) += up;
                    }
                    for c in 0..normalized.cols() {
                        let dn = upstream.at(r, c) * gain.at(0, c);
                        let val = inv_std[r]
                            * (dn - sum_dnorm / n - normalized.at(r, c) * sum_dnorm_norm / n);
                        dx.set(r, c, val);
                    }
                }
                store.accum_grad(&self.name_of("gain"), &dgain);
                store.accum_grad(&self.name_of("bias"), &dbias);
                Ok(LayerGrad {
                    input: dx,
                    memory: None,
                })
            }
            (
                LayerSpec::MultiHeadAttention {
                    model_dim, heads, ..
                },
                LayerCache::Attention { .. },
            ) => self.attention_backward(store, cache, upstream, *model_dim, *heads),
            (
                LayerSpec::CrossAttention {
                    model_dim, heads, ..
                },
                LayerCache::Attention { .. },
            ) => self.attention_backward(store, cache, upstream, *model_dim, *heads),
            (LayerSpec::Gelu, LayerCache::Gelu { input }) => {
                if upstream.shape() != input.shape() {
                    return Err(Error::State(
                        "stale cache: upstream shape does not match gelu cache".into(),
                    ));
                }
                let mut dx = upstream.clone();
                for (g, &x) in dx.data_mut().iter_mut().zip(input.data().iter()) {
                    *g *= gelu_derivative(x);
                }
                Ok(LayerGrad {
                    input: dx,
                    memory: None,
                })
            }
            (LayerSpec::SoftmaxXent { .. }, LayerCache::LogSoftmax { probs }) => {
                if upstream.shape() != probs.shape() {
                    return Err(Error::State(
                        "stale cache: upstream shape does not match log-softmax cache".into(),
                    ));
                }
                // d logit = d logp - softmax * rowsum(d logp)
                let mut dx = upstream.clone();
                for r in 0..dx.rows() {
                    let s: f64 = upstream.row(r).iter().sum();
                    for c in 0..dx.cols() {
                        *dx.at_mut(r, c) -= probs.at(r, c) * s;
                    }
                }
                Ok(LayerGrad {
                    input: dx,
                    memory: None,
                })
            }
            _ => Err(Error::State(format!(
                "cache kind does not match layer {:?} (stale or missing cache)",
                self.spec
            ))),
        }
    }

    fn attention_backward(
        &self,
        store: &mut ParamStore,
        cache: &LayerCache,
        upstream: &Tensor2D,
        model_dim: usize,
        heads: usize,
    ) -> Result<LayerGrad> {
        let LayerCache::Attention {
            query_in,
            memory_in,
            q,
            k,
            v,
            weights,
            context,
            self_attention,
            ..
        } = cache
        else {
            return Err(Error::State("missing attention cache".into()));
        };
        if upstream.rows() != q.rows() || upstream.cols() != model_dim {
            return Err(Error::State(
                "stale cache: upstream shape does not match attention output".into(),
            ));
        }
        let dh = model_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let tq = q.rows();
        let tk = k.rows();

        let wo = store.get(&self.name_of("wo")).clone();
        let dcontext = upstream.matmul_nt(&wo);
        let frozen = store.is_frozen(&self.name_of("wq"));
        let (dwo, dbo) = if frozen {
            (Tensor2D::zeros(0, 0), Tensor2D::zeros(0, 0))
        } else {
            let dwo = context.matmul_tn(upstream);
            let mut dbo = Tensor2D::zeros(1, model_dim);
            for r in 0..tq {
                for c in 0..model_dim {
                    *dbo.at_mut(0, c) += upstream.at(r, c);
                }
            }
            (dwo, dbo)
        };

        let mut dq = Tensor2D::zeros(tq, model_dim);
        let mut dk = Tensor2D::zeros(tk, model_dim);
        let mut dv = Tensor2D::zeros(tk, model_dim);
        for h in 0..heads {
            let off = h * dh;
            let a = &weights[h];
            for i in 0..tq {
                // dA_ij = sum_d dcontext[i, off+d] * v[j, off+d]
                // dV accumulate; then softmax backward row-wise.
                let dc_head: Vec<f64> = dcontext.row(i)[off..off + dh].to_vec();
                let a_row = a.row(i).to_vec();
                let mut da = vec![0.0; tk];
                for (j, (slot, &w)) in da.iter_mut().zip(a_row.iter()).enumerate() {
                    let v_head = &v.row(j)[off..off + dh];
                    let mut acc = 0.0;
                    if w != 0.0 {
                        let dv_head = &mut dv.row_mut(j)[off..off + dh];
                        for ((&dc, &vv), dvs) in
                            dc_head.iter().zip(v_head.iter()).zip(dv_head.iter_mut())
                        {
                            acc += dc * vv;
                            *dvs += w * dc;
                        }
                    } else {
                        for (&dc, &vv) in dc_head.iter().zip(v_head.iter()) {
                            acc += dc * vv;
                        }
                    }
                    *slot = acc;
                }
                // softmax backward: ds_j = a_j * (da_j - sum_k a_k da_k).
                // Fully masked rows have a == 0 everywhere, so ds == 0.
                let dot: f64 = a_row.iter().zip(da.iter()).map(|(&w, &g)| w * g).sum();
                let q_head: Vec<f64> = q.row(i)[off..off + dh].to_vec();
                let dq_head = &mut dq.row_mut(i)[off..off + dh];
                for (j, (&w, &g)) in a_row.iter().zip(da.iter()).enumerate() {
                    let ds = w * (g - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let k_head = &k.row(j)[off..off + dh];
                    let dk_head = &mut dk.row_mut(j)[off..off + dh];
                    for d in 0..dh {
                        dq_head[d] += ds * k_head[d];
                        dk_head[d] += ds * q_head[d];
                    }
                }
            }
        }

        let wq_name = self.name_of("wq");
        let wq = store.get(&wq_name).clone();
        let wk = store.get(&self.name_of("wk")).clone();
        let wv = store.get(&self.name_of("wv")).clone();

        let dquery_in = dq.matmul_nt(&wq);
        let dmem_from_k = dk.matmul_nt(&wk);
        let dmem_from_v = dv.matmul_nt(&wv);

        if !frozen {
            store.accum_grad(&wq_name, &query_in.matmul_tn(&dq));
            store.accum_grad(&self.name_of("wk"), &memory_in.matmul_tn(&dk));
            store.accum_grad(&self.name_of("wv"), &memory_in.matmul_tn(&dv));
            store.accum_grad(&self.name_of("wo"), &dwo);
            store.accum_grad(&self.name_of("bq"), &colsum(&dq));
            store.accum_grad(&self.name_of("bk"), &colsum(&dk));
            store.accum_grad(&self.name_of("bv"), &colsum(&dv));
            store.accum_grad(&self.name_of("bo"), &dbo);
        }

        let mut dmemory = dmem_from_k;
        dmemory.add_assign(&dmem_from_v);

        if *self_attention {
            let mut dx = dquery_in;
            dx.add_assign(&dmemory);
            Ok(LayerGrad {
                input: dx,
                memory: None,
            })
        } else {
            Ok(LayerGrad {
                input: dquery_in,
                memory: Some(dmemory),
            })
        }
    }
}

fn colsum(m: &Tensor2D) -> Tensor2D {
    let mut out = Tensor2D::zeros(1, m.cols());
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            *out.at_mut(0, c) += m.at(r, c);
        }
    }
    out
}

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise log-softmax; also returns the probabilities.
pub fn log_softmax_rows(logits: &Tensor2D) -> (Tensor2D, Tensor2D) {
    let mut logp = Tensor2D::zeros(logits.rows(), logits.cols());
    let mut probs = Tensor2D::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for c in 0..logits.cols() {
            let lp = row[c] - lse;
            logp.set(r, c, lp);
            probs.set(r, c, lp.exp());
        }
    }
    (logp, probs)
}

#[derive(Debug, Clone, Copy)]
pub struct XentOptions {
    pub label_smoothing: f64,
}

impl Default for XentOptions {
    fn default() -> Self {
        XentOptions {
            label_smoothing: 0.0,
        }
    }
}

/// Mean cross-entropy over the positions where `include` is true, plus the
/// gradient with respect to the logits. With label smoothing s, the target
/// distribution is (1-s)*onehot + s/C.
pub fn cross_entropy_from_logits(
    logits: &Tensor2D,
    targets: &[TokenId],
    include: &[bool],
    opts: XentOptions,
) -> Result<(f64, Tensor2D)> {
    if targets.len() != logits.rows() || include.len() != logits.rows() {
        return Err(Error::dim(
            format!("{} targets", logits.rows()),
            format!("{}", targets.len()),
            "cross_entropy targets",
        ));
    }
    let n_inc = include.iter().filter(|&&b| b).count();
    if n_inc == 0 {
        return Err(Error::Config("no positions included in loss".into()));
    }
    let classes = logits.cols();
    let s = opts.label_smoothing;
    let (logp, probs) = log_softmax_rows(logits);
    let mut loss = 0.0;
    let mut dlogits = Tensor2D::zeros(logits.rows(), classes);
    let w = 1.0 / n_inc as f64;
    for r in 0..logits.rows() {
        if !include[r] {
            continue;
        }
        let t = targets[r] as usize;
        if t >= classes {
            return Err(Error::Vocab(format!(
                "target id {t} outside class count {classes}"
            )));
        }
        let mean_logp: f64 = logp.row(r).iter().sum::<f64>() / classes as f64;
        loss += -(1.0 - s) * logp.at(r, t) - s * mean_logp;
        for c in 0..classes {
            let target_mass = if c == t { 1.0 - s } else { 0.0 } + s / classes as f64;
            dlogits.set(r, c, (probs.at(r, c) - target_mass) * w);
        }
    }
    Ok((loss * w, dlogits))
}
