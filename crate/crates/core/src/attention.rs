//! Learnable-query cross-attention.
//!
//! A bank of `l` learnable queries attends over a token sequence with
//! multi-head scaled dot-product attention and returns `l` tokens. The same
//! layer distills each modality (`l` = `num_queries`) and compresses the
//! fused tokens (`l` = 2).

use rand::Rng;

use crate::data::{Modality, TokenSequence};
use crate::error::{Error, Result};
use crate::gating::FusedTokens;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Standard deviation of the query bank initialization.
pub const QUERY_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryRole {
    Image,
    Text,
    Bottleneck,
}

impl QueryRole {
    pub fn prefix(self) -> &'static str {
        match self {
            QueryRole::Image => "q_image",
            QueryRole::Text => "q_text",
            QueryRole::Bottleneck => "q_bottleneck",
        }
    }
}

#[derive(Clone, Debug)]
pub struct QueryBank {
    pub queries: ParamId,
    pub role: QueryRole,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct ProjectionWeights {
    pub w_q: Option<ParamId>,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: Option<ParamId>,
    pub num_heads: usize,
}

/// Structural options shared by every query-attention layer in a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionOptions {
    pub num_heads: usize,
    pub query_projection: bool,
    pub output_projection: bool,
    pub residual: bool,
    pub layer_norm: bool,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        AttentionOptions {
            num_heads: 4,
            query_projection: true,
            output_projection: true,
            residual: false,
            layer_norm: false,
        }
    }
}

/// `l` learnable queries cross-attending over a `[seq, d]` token sequence.
#[derive(Clone, Debug)]
pub struct QueryAttention {
    pub bank: QueryBank,
    pub proj: ProjectionWeights,
    pub d_model: usize,
    pub residual: bool,
    pub layer_norm: bool,
}

/// `I_n` or `T_n`: one modality distilled to `l` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct DistilledTokens {
    pub tokens: Tensor,
    pub modality: Modality,
}

/// The fused tokens compressed to two rows.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckOutput {
    pub tokens: Tensor,
}

impl QueryAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        role: QueryRole,
        num_queries: usize,
        d_model: usize,
        opts: AttentionOptions,
        rng: &mut R,
    ) -> Result<Self> {
        if num_queries == 0 {
            return Err(Error::config("query bank needs at least one query"));
        }
        if opts.num_heads == 0 || d_model % opts.num_heads != 0 {
            return Err(Error::config(format!(
                "d_model {d_model} not divisible by num_heads {}",
                opts.num_heads
            )));
        }
        let p = role.prefix();
        let w_std = 1.0 / (d_model as f64).sqrt();
        let queries = store.add(
            format!("{p}.queries"),
            Tensor::randn(&[num_queries, d_model], QUERY_INIT_STD, rng),
        )?;
        let mut square = |name: &str| store.add(format!("{p}.{name}"), Tensor::randn(&[d_model, d_model], w_std, rng));
        let w_q = opts.query_projection.then(|| square("w_q")).transpose()?;
        let w_k = square("w_k")?;
        let w_v = square("w_v")?;
        let w_o = opts.output_projection.then(|| square("w_o")).transpose()?;
        Ok(QueryAttention {
            bank: QueryBank {
                queries,
                role,
                len: num_queries,
            },
            proj: ProjectionWeights {
                w_q,
                w_k,
                w_v,
                w_o,
                num_heads: opts.num_heads,
            },
            d_model,
            residual: opts.residual,
            layer_norm: opts.layer_norm,
        })
    }

    pub fn num_queries(&self) -> usize {
        self.bank.len
    }

    /// `[B, seq, d] -> [B, l, d]`, or `[seq, d] -> [l, d]`.
    pub fn forward<'t>(&self, tape: &'t Tape, store: &ParamStore, tokens: Var<'t>) -> Result<Var<'t>> {
        let shape = tokens.shape();
        let batch = match shape.as_slice() {
            [_, d] if *d == self.d_model => None,
            [b, _, d] if *d == self.d_model => Some(*b),
            _ => {
                return Err(Error::dims(
                    "q_transform",
                    &shape,
                    &[self.bank.len, self.d_model],
                ))
            }
        };
        let bank = tape.param(store, self.bank.queries);
        let mut q = bank;
        if let Some(w_q) = self.proj.w_q {
            q = q.matmul(&tape.param(store, w_q))?;
        }
        if let Some(b) = batch {
            q = q.broadcast_batch(b)?;
        }
        let k = tokens.matmul(&tape.param(store, self.proj.w_k))?;
        let v = tokens.matmul(&tape.param(store, self.proj.w_v))?;

        let heads = self.proj.num_heads;
        let mut out = if heads == 1 {
            scaled_dot_attention(q, k, v)?
        } else {
            let dh = self.d_model / heads;
            let parts = (0..heads)
                .map(|h| {
                    let s = h * dh;
                    scaled_dot_attention(q.slice_cols(s, dh)?, k.slice_cols(s, dh)?, v.slice_cols(s, dh)?)
                })
                .collect::<Result<Vec<_>>>()?;
            Var::concat_cols(&parts)?
        };
        if let Some(w_o) = self.proj.w_o {
            out = out.matmul(&tape.param(store, w_o))?;
        }
        if self.residual {
            let base = match batch {
                Some(b) => bank.broadcast_batch(b)?,
                None => bank,
            };
            out = out.add(&base)?;
        }
        if self.layer_norm {
            out = out.layer_norm()?;
        }
        Ok(out)
    }

    /// Evaluates the layer on a single `[seq, d]` matrix without recording
    /// gradients for the caller.
    pub fn apply(&self, store: &ParamStore, tokens: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(tokens.clone());
        Ok((*self.forward(&tape, store, x)?.value()).clone())
    }
}

/// `softmax(q·kᵀ / √dh) · v`, with `dh` the per-head width.
pub fn scaled_dot_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    let dh = *qs.last().unwrap_or(&0);
    let lk = ks.len().checked_sub(2).map(|i| ks[i]).unwrap_or(0);
    if dh == 0 || lk == 0 || ks != vs || ks.last() != qs.last() {
        return Err(Error::dims("scaled_dot_attention", &qs, &ks));
    }
    let scores = q.bmm_nt(&k)?.scale(1.0 / (dh as f64).sqrt())?;
    scores.softmax_rows()?.bmm(&v)
}

/// Distills one modality's tokens into `l` query tokens.
pub fn q_transform(
    tokens: &TokenSequence,
    layer: &QueryAttention,
    store: &ParamStore,
) -> Result<DistilledTokens> {
    Ok(DistilledTokens {
        tokens: layer.apply(store, &tokens.tokens)?,
        modality: tokens.modality,
    })
}

/// Compresses fused tokens to two rows with a two-query bank.
pub fn q_bottleneck(
    fused: &FusedTokens,
    layer: &QueryAttention,
    store: &ParamStore,
) -> Result<BottleneckOutput> {
    if layer.bank.len != 2 {
        return Err(Error::config(format!(
            "bottleneck bank must have 2 queries, has {}",
            layer.bank.len
        )));
    }
    Ok(BottleneckOutput {
        tokens: layer.apply(store, &fused.tokens)?,
    })
}
