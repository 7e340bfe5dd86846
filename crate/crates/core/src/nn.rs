//! Parameter containers shared by the text encoder and the refinement blocks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// `y = x · weight + bias`, weight stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn random<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LinearVars {
        LinearVars {
            weight: bind(g, &self.weight, trainable),
            bias: bind(g, &self.bias, trainable),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormVars {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(&[d], 1.0),
            beta: Tensor::zeros(&[d]),
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> LayerNormVars {
        LayerNormVars {
            gamma: bind(g, &self.gamma, trainable),
            beta: bind(g, &self.beta, trainable),
        }
    }
}

pub fn bind(g: &mut Graph, t: &Tensor, trainable: bool) -> Var {
    if trainable {
        g.param(t.clone())
    } else {
        g.constant(t.clone())
    }
}

pub fn linear(g: &mut Graph, x: Var, l: LinearVars) -> Result<Var> {
    let y = g.matmul(x, l.weight)?;
    g.add_row(y, l.bias)
}

pub fn layer_norm(g: &mut Graph, x: Var, ln: LayerNormVars, eps: f64) -> Result<Var> {
    g.layer_norm(x, ln.gamma, ln.beta, eps)
}

pub struct AttentionVars {
    pub wq: LinearVars,
    pub wk: LinearVars,
    pub wv: LinearVars,
    pub wo: LinearVars,
}

/// Multi-head scaled dot-product attention of `queries` (rows) over
/// `context` (rows). Returns the projected output and the post-softmax
/// attention of every head (`n_queries × n_context`).
pub fn multi_head_attention(
    g: &mut Graph,
    queries: Var,
    context: Var,
    attn: &AttentionVars,
    heads: usize,
    mask: Option<Var>,
) -> Result<(Var, Vec<Var>)> {
    let d = g.value(attn.wq.weight).shape()[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
    }
    let dh = d / heads;
    let q = linear(g, queries, attn.wq)?;
    let k = linear(g, context, attn.wk)?;
    let v = linear(g, context, attn.wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dh, (h + 1) * dh)?,
                g.slice_cols(k, h * dh, (h + 1) * dh)?,
                g.slice_cols(v, h * dh, (h + 1) * dh)?,
            )
        };
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let mut scores = g.scale(scores, scale);
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let p = g.softmax_rows(scores);
        outs.push(g.matmul(p, vh)?);
        probs.push(p);
    }
    let joined = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    Ok((linear(g, joined, attn.wo)?, probs))
}
