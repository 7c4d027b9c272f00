//! Query-key-value attention, multi-head aggregation, the residual
//! layer-normalization and the feed-forward block.
//!
//! Positional encodings are added to the query and key inputs only; values
//! are projected from the raw key-side features. Padding is handled by giving
//! padded positions zero encodings, never by masking logits.

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Graph, TransformerWeights, Var, LAYERNORM_EPS};

/// Projections of one attention head, each `d×d'`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionHeadWeights<'g> {
    pub wq: Var<'g>,
    pub wk: Var<'g>,
    pub wv: Var<'g>,
}

/// `M` heads plus the `d×d` output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadWeights<'g> {
    pub heads: Vec<AttentionHeadWeights<'g>>,
    pub wo: Var<'g>,
}

impl<'g> MultiHeadWeights<'g> {
    /// Loads `{prefix}.head{m}.{wq,wk,wv}` and `{prefix}.wo`.
    pub fn load(graph: &'g Graph, weights: &TransformerWeights, prefix: &str, n_heads: usize) -> Result<Self> {
        let heads = (0..n_heads)
            .map(|m| {
                Ok(AttentionHeadWeights {
                    wq: graph.param(weights, &format!("{prefix}.head{m}.wq"))?,
                    wk: graph.param(weights, &format!("{prefix}.head{m}.wk"))?,
                    wv: graph.param(weights, &format!("{prefix}.head{m}.wv"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { heads, wo: graph.param(weights, &format!("{prefix}.wo"))? })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormWeights<'g> {
    pub gain: Var<'g>,
    pub bias: Var<'g>,
}

impl<'g> LayerNormWeights<'g> {
    pub fn load(graph: &'g Graph, weights: &TransformerWeights, prefix: &str) -> Result<Self> {
        Ok(Self {
            gain: graph.param(weights, &format!("{prefix}.gain"))?,
            bias: graph.param(weights, &format!("{prefix}.bias"))?,
        })
    }
}

/// Two position-wise linear maps (1×1 convolutions) with a ReLU between, then
/// a residual connection and layer normalization.
#[derive(Debug, Clone, Copy)]
pub struct FfnWeights<'g> {
    pub w1: Var<'g>,
    pub b1: Var<'g>,
    pub w2: Var<'g>,
    pub b2: Var<'g>,
    pub norm: LayerNormWeights<'g>,
}

impl<'g> FfnWeights<'g> {
    /// Loads `{prefix}.{w1,b1,w2,b2}` and the normalization at `{norm_prefix}`.
    pub fn load(graph: &'g Graph, weights: &TransformerWeights, prefix: &str, norm_prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: graph.param(weights, &format!("{prefix}.w1"))?,
            b1: graph.param(weights, &format!("{prefix}.b1"))?,
            w2: graph.param(weights, &format!("{prefix}.w2"))?,
            b2: graph.param(weights, &format!("{prefix}.b2"))?,
            norm: LayerNormWeights::load(graph, weights, norm_prefix)?,
        })
    }
}

/// Query-side and key/value-side sequences with their positional encodings.
#[derive(Debug, Clone, Copy)]
pub struct AttentionInputs<'g> {
    pub xq: Var<'g>,
    pub xkv: Var<'g>,
    pub pq: Var<'g>,
    pub pk: Var<'g>,
}

impl AttentionInputs<'_> {
    fn validate(&self) -> Result<(usize, usize)> {
        let (nq, d) = self.xq.value().dims2()?;
        let (nkv, dk) = self.xkv.value().dims2()?;
        if d != dk {
            return Err(dim_err!("query width {d} differs from key width {dk}"));
        }
        if self.pq.shape() != [nq, d] || self.pk.shape() != [nkv, d] {
            return Err(dim_err!(
                "positional encodings {:?}/{:?} do not match sequences {nq}x{d}/{nkv}x{d}",
                self.pq.shape(),
                self.pk.shape()
            ));
        }
        Ok((nq, nkv))
    }
}

/// `Q = (Xq+Pq)Wq`, `K = (Xkv+Pk)Wk`, `V = Xkv·Wv`.
pub fn project_qkv<'g>(
    inputs: &AttentionInputs<'g>,
    w: &AttentionHeadWeights<'g>,
) -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
    inputs.validate()?;
    let q = inputs.xq.add(&inputs.pq)?.matmul(&w.wq)?;
    let k = inputs.xkv.add(&inputs.pk)?.matmul(&w.wk)?;
    let v = inputs.xkv.matmul(&w.wv)?;
    Ok((q, k, v))
}

/// Row-wise softmax of `Q·Kᵀ/√d'`.
pub fn attention_weights<'g>(q: &Var<'g>, k: &Var<'g>) -> Result<Var<'g>> {
    let (_, dq) = q.value().dims2()?;
    let (_, dk) = k.value().dims2()?;
    if dq != dk {
        return Err(dim_err!("query/key head widths differ: {dq} vs {dk}"));
    }
    q.matmul(&k.transpose()?)?.scale(1.0 / (dq as f64).sqrt()).softmax_rows()
}

pub fn attention_output<'g>(a: &Var<'g>, v: &Var<'g>) -> Result<Var<'g>> {
    a.matmul(v)
}

/// Multi-head output together with each head's attention map.
pub struct MultiHeadOutput<'g> {
    pub output: Var<'g>,
    pub concat: Var<'g>,
    pub maps: Vec<Var<'g>>,
}

pub fn multi_head_attention_detailed<'g>(
    inputs: &AttentionInputs<'g>,
    w: &MultiHeadWeights<'g>,
) -> Result<MultiHeadOutput<'g>> {
    let (_, d) = inputs.xq.value().dims2()?;
    let m = w.heads.len();
    if m == 0 || d % m != 0 {
        return Err(Error::Config(format!("{m} heads do not divide model width {d}")));
    }
    let mut outs = Vec::with_capacity(m);
    let mut maps = Vec::with_capacity(m);
    for head in &w.heads {
        let (q, k, v) = project_qkv(inputs, head)?;
        if q.shape()[1] != d / m {
            return Err(Error::Config(format!(
                "head width {} differs from d/M = {}",
                q.shape()[1],
                d / m
            )));
        }
        let a = attention_weights(&q, &k)?;
        outs.push(attention_output(&a, &v)?);
        maps.push(a);
    }
    let concat = inputs.xq.graph().concat_cols(&outs)?;
    let output = concat.matmul(&w.wo)?;
    Ok(MultiHeadOutput { output, concat, maps })
}

/// Concatenation of `M` heads on the channel axis followed by `Wᵒ`.
pub fn multi_head_attention<'g>(inputs: &AttentionInputs<'g>, w: &MultiHeadWeights<'g>) -> Result<Var<'g>> {
    Ok(multi_head_attention_detailed(inputs, w)?.output)
}

/// `layernorm(attn_out + Xq)`.
pub fn residual_norm<'g>(attn_out: &Var<'g>, xq: &Var<'g>, ln: &LayerNormWeights<'g>) -> Result<Var<'g>> {
    attn_out.add(xq)?.layernorm(&ln.gain, &ln.bias, LAYERNORM_EPS)
}

/// `layernorm(x + relu(x·W1 + b1)·W2 + b2)`.
pub fn ffn<'g>(x: &Var<'g>, w: &FfnWeights<'g>) -> Result<Var<'g>> {
    let hidden = x.matmul(&w.w1)?.add_row(&w.b1)?.relu();
    let out = hidden.matmul(&w.w2)?.add_row(&w.b2)?;
    out.add(x)?.layernorm(&w.norm.gain, &w.norm.bias, LAYERNORM_EPS)
}
