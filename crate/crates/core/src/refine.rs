//! Cross-attention refinement of patch tokens against the anchor set,
//! max-alignment pooling and the embedding head.
//!
//! Patch tokens are the queries; the anchor set supplies keys and values.
//! Each block is pre-norm: `T ← T + MHA(LN(T), LN(A⁺))`, then
//! `T ← T + FFN(LN(T))`, with one layer norm shared by tokens and anchors.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::LN_EPS;
use crate::error::{Error, Result};
use crate::nn::{self, AttentionVars, LayerNorm, LayerNormVars, Linear, LinearVars};
use crate::tensor::{column_stats, Graph, Tensor, Var};
use crate::weights::{expect_shape, WeightBlob};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Attention-output and FFN-output projections start at zero, so the
    /// module is the identity on tokens.
    ZeroOut,
    Random,
    Loaded,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefineBlock {
    pub ln1: LayerNorm,
    pub wq: Linear,
    /// Keys are bias-free; a shared key offset cancels in the softmax.
    pub wk: Tensor,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub fc: Linear,
    pub out: Linear,
}

struct BlockVars {
    ln1: LayerNormVars,
    attn: AttentionVars,
    ln2: LayerNormVars,
    fc: LinearVars,
    out: LinearVars,
}

pub struct RefineVars {
    blocks: Vec<BlockVars>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementModule {
    pub heads: usize,
    pub init_mode: InitMode,
    pub blocks: Vec<RefineBlock>,
}

/// Graph handles produced by [`RefinementModule::forward`].
#[derive(Clone, Copy, Debug)]
pub struct RefineGraphOutput {
    pub refined: Var,
    pub attention: Var,
    pub weights: Var,
    pub f_ref: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinementOutput {
    /// `N × D`.
    pub refined_tokens: Tensor,
    /// `N × (K+M)`, last block, mean over heads.
    pub attention: Tensor,
    /// Normalized max-alignment weights, length `N`.
    pub pooled_weights: Tensor,
    pub f_ref: Tensor,
}

impl RefinementModule {
    pub fn new(dim: usize, n_blocks: usize, heads: usize, ffn_ratio: usize, init: InitMode, seed: u64) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
        }
        if init == InitMode::Loaded {
            return Err(Error::Config("loaded refinement weights come from a weight blob".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = ffn_ratio.max(1) * dim;
        let blocks = (0..n_blocks)
            .map(|_| {
                let wq = Linear::random(dim, dim, &mut rng);
                let wk = Linear::random(dim, dim, &mut rng).weight;
                let wv = Linear::random(dim, dim, &mut rng);
                let fc = Linear::random(dim, hidden, &mut rng);
                let (wo, out) = match init {
                    InitMode::ZeroOut => (Linear::zeros(dim, dim), Linear::zeros(hidden, dim)),
                    _ => (Linear::random(dim, dim, &mut rng), Linear::random(hidden, dim, &mut rng)),
                };
                RefineBlock {
                    ln1: LayerNorm::new(dim),
                    wq,
                    wk,
                    wv,
                    wo,
                    ln2: LayerNorm::new(dim),
                    fc,
                    out,
                }
            })
            .collect();
        Ok(RefinementModule {
            heads,
            init_mode: init,
            blocks,
        })
    }

    /// Every block starts from the exported backbone layer.
    pub fn from_blob(blob: &WeightBlob, dim: usize, n_blocks: usize) -> Result<Self> {
        let heads = blob.meta_usize("vision_heads")?;
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
        }
        let ln = |n: &str| -> Result<LayerNorm> {
            Ok(LayerNorm {
                gamma: expect_shape(blob, &format!("vision.{n}.gamma"), &[dim])?,
                beta: expect_shape(blob, &format!("vision.{n}.beta"), &[dim])?,
            })
        };
        let lin = |n: &str, i: usize, o: usize| -> Result<Linear> {
            Ok(Linear {
                weight: expect_shape(blob, &format!("vision.{n}.weight"), &[i, o])?,
                bias: expect_shape(blob, &format!("vision.{n}.bias"), &[o])?,
            })
        };
        let hidden = blob.get("vision.fc.weight")?.cols();
        let block = RefineBlock {
            ln1: ln("ln1")?,
            wq: lin("wq", dim, dim)?,
            wk: expect_shape(blob, "vision.wk.weight", &[dim, dim])?,
            wv: lin("wv", dim, dim)?,
            wo: lin("wo", dim, dim)?,
            ln2: ln("ln2")?,
            fc: lin("fc", dim, hidden)?,
            out: lin("out", hidden, dim)?,
        };
        Ok(RefinementModule {
            heads,
            init_mode: InitMode::Loaded,
            blocks: vec![block; n_blocks],
        })
    }

    pub fn dim(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.wq.fan_in())
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> RefineVars {
        let vars: Vec<Var> = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| nn::bind(g, t, trainable))
            .collect();
        self.vars_from(g, &vars)
    }

    /// Assembles block handles from vars listed in
    /// [`RefinementModule::named_tensors`] order.
    pub fn vars_from(&self, g: &mut Graph, vars: &[Var]) -> RefineVars {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("one var per refinement tensor");
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let ln1 = LayerNormVars { gamma: next(), beta: next() };
            let wq = LinearVars { weight: next(), bias: next() };
            let wk_weight = next();
            let wv = LinearVars { weight: next(), bias: next() };
            let wo = LinearVars { weight: next(), bias: next() };
            let ln2 = LayerNormVars { gamma: next(), beta: next() };
            let fc = LinearVars { weight: next(), bias: next() };
            let out = LinearVars { weight: next(), bias: next() };
            let wk = LinearVars {
                weight: wk_weight,
                bias: g.constant(Tensor::zeros(&[b.wk.cols()])),
            };
            blocks.push(BlockVars {
                ln1,
                attn: AttentionVars { wq, wk, wv, wo },
                ln2,
                fc,
                out,
            });
        }
        RefineVars { blocks }
    }

    pub fn forward(&self, g: &mut Graph, vars: &RefineVars, tokens: Var, anchors: Var) -> Result<RefineGraphOutput> {
        let (tt, ta) = (g.value(tokens), g.value(anchors));
        if tt.shape().len() != 2 || ta.shape().len() != 2 || tt.cols() != ta.cols() || tt.cols() != self.dim() {
            return Err(Error::Shape {
                op: "refine",
                lhs: tt.shape().to_vec(),
                rhs: ta.shape().to_vec(),
            });
        }
        if tt.rows() == 0 || self.blocks.is_empty() {
            return Err(Error::invalid("refine needs at least one token and one block"));
        }
        let mut x = tokens;
        let mut last_probs = Vec::new();
        for b in &vars.blocks {
            let q = nn::layer_norm(g, x, b.ln1, LN_EPS)?;
            let kv = nn::layer_norm(g, anchors, b.ln1, LN_EPS)?;
            let (a, probs) = nn::multi_head_attention(g, q, kv, &b.attn, self.heads, None)?;
            x = g.add(x, a)?;
            let h = nn::layer_norm(g, x, b.ln2, LN_EPS)?;
            let h = nn::linear(g, h, b.fc)?;
            let h = g.quick_gelu(h);
            let h = nn::linear(g, h, b.out)?;
            x = g.add(x, h)?;
            last_probs = probs;
        }
        let attention = if last_probs.len() == 1 {
            last_probs[0]
        } else {
            let mut acc = last_probs[0];
            for &p in &last_probs[1..] {
                acc = g.add(acc, p)?;
            }
            g.scale(acc, 1.0 / last_probs.len() as f64)
        };
        debug_assert!(g
            .value(attention)
            .data()
            .chunks(g.value(attention).cols())
            .all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-6));
        let (weights, f_ref) = pool_max_alignment(g, attention, x)?;
        Ok(RefineGraphOutput {
            refined: x,
            attention,
            weights,
            f_ref,
        })
    }

    /// Forward pass on plain tensors.
    pub fn run(&self, tokens: &Tensor, anchors: &Tensor) -> Result<RefinementOutput> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let t = g.constant(tokens.clone());
        let a = g.constant(anchors.clone());
        let out = self.forward(&mut g, &vars, t, a)?;
        Ok(RefinementOutput {
            refined_tokens: g.value(out.refined).clone(),
            attention: g.value(out.attention).clone(),
            pooled_weights: g.value(out.weights).clone(),
            f_ref: g.value(out.f_ref).clone(),
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.ln1.gamma"), &b.ln1.gamma));
            out.push((format!("block{i}.ln1.beta"), &b.ln1.beta));
            out.push((format!("block{i}.wq.weight"), &b.wq.weight));
            out.push((format!("block{i}.wq.bias"), &b.wq.bias));
            out.push((format!("block{i}.wk.weight"), &b.wk));
            for (n, l) in [("wv", &b.wv), ("wo", &b.wo)] {
                out.push((format!("block{i}.{n}.weight"), &l.weight));
                out.push((format!("block{i}.{n}.bias"), &l.bias));
            }
            out.push((format!("block{i}.ln2.gamma"), &b.ln2.gamma));
            out.push((format!("block{i}.ln2.beta"), &b.ln2.beta));
            for (n, l) in [("fc", &b.fc), ("out", &b.out)] {
                out.push((format!("block{i}.{n}.weight"), &l.weight));
                out.push((format!("block{i}.{n}.bias"), &l.bias));
            }
        }
        out
    }

    /// Mutable tensors in the same order as [`RefinementModule::named_tensors`]
    /// and [`RefineVars::all`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in self.blocks.iter_mut() {
            out.push(&mut b.ln1.gamma);
            out.push(&mut b.ln1.beta);
            out.push(&mut b.wq.weight);
            out.push(&mut b.wq.bias);
            out.push(&mut b.wk);
            for l in [&mut b.wv, &mut b.wo] {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
            out.push(&mut b.ln2.gamma);
            out.push(&mut b.ln2.beta);
            for l in [&mut b.fc, &mut b.out] {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// `w_n = max_k W[n,k]`, `w̃ = w / Σw`, `f_ref = Σ_n w̃_n · T[n]`.
pub fn pool_max_alignment(g: &mut Graph, attention: Var, refined: Var) -> Result<(Var, Var)> {
    let (ta, tr) = (g.value(attention), g.value(refined));
    if ta.rows() != tr.rows() {
        return Err(Error::Shape {
            op: "pool_max_alignment",
            lhs: ta.shape().to_vec(),
            rhs: tr.shape().to_vec(),
        });
    }
    let n = ta.rows();
    let d = tr.cols();
    let (w, _) = g.max_rows(attention);
    let weights = g.normalize_sum(w)?;
    debug_assert!((g.value(weights).sum() - 1.0).abs() < 1e-9);
    debug_assert!(g.value(weights).data().iter().all(|&v| v >= 0.0));
    let row = g.reshape(weights, &[1, n])?;
    let f = g.matmul(row, refined)?;
    let f_ref = g.reshape(f, &[d])?;
    Ok((weights, f_ref))
}

/// Multiply-accumulate count of the two attention contractions of one
/// block: scores `N×(K+M)` over width `D`, then the weighted value sum.
pub fn count_attention_flops(n: u64, anchors: u64, dim: u64) -> u64 {
    2 * n * anchors * dim
}

/// One CSV row per patch: grid position, pooled weight, best anchor.
pub fn attention_csv(out: &RefinementOutput, grid_w: usize) -> String {
    let mut s = String::from("grid_row,grid_col,pooled_weight,argmax_anchor\n");
    for n in 0..out.attention.rows() {
        let (best, _) = crate::tensor::argmax_first(out.attention.row(n));
        let _ = writeln!(
            s,
            "{},{},{:.9},{}",
            n / grid_w,
            n % grid_w,
            out.pooled_weights.data()[n],
            best
        );
    }
    s
}

/// Linear `D → D` projection (bias-free) followed by feature-wise batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbedHead {
    pub weight: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    /// Number of running-statistic updates so far.
    pub updates: u64,
    pub momentum: f64,
    pub eps: f64,
}

pub struct EmbedVars {
    pub weight: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl EmbedHead {
    pub fn new(dim: usize) -> Self {
        EmbedHead {
            weight: Tensor::eye(dim),
            gamma: Tensor::full(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
            running_mean: Tensor::zeros(&[dim]),
            running_var: Tensor::full(&[dim], 1.0),
            updates: 0,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> EmbedVars {
        EmbedVars {
            weight: nn::bind(g, &self.weight, trainable),
            gamma: nn::bind(g, &self.gamma, trainable),
            beta: nn::bind(g, &self.beta, trainable),
        }
    }

    /// Training-mode forward on a `B × D` batch using batch statistics.
    /// Returns the output and the pre-norm activations for
    /// [`EmbedHead::update_running`].
    pub fn forward_train(&self, g: &mut Graph, vars: &EmbedVars, x: Var) -> Result<(Var, Tensor)> {
        let h = g.matmul(x, vars.weight)?;
        let pre = g.value(h).clone();
        let s = g.standardize_cols(h, self.eps);
        let s = g.mul_row(s, vars.gamma)?;
        Ok((g.add_row(s, vars.beta)?, pre))
    }

    /// Exponential moving average of batch mean and unbiased variance.
    pub fn update_running(&mut self, pre: &Tensor) {
        let b = pre.rows() as f64;
        let (mean, var) = column_stats(pre);
        let unbias = if b > 1.0 { b / (b - 1.0) } else { 1.0 };
        let m = self.momentum;
        for (r, v) in self.running_mean.data_mut().iter_mut().zip(&mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, v) in self.running_var.data_mut().iter_mut().zip(&var) {
            *r = (1.0 - m) * *r + m * v * unbias;
        }
        self.updates += 1;
    }

    /// Inference-mode forward on a `B × D` batch with running statistics.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        if self.updates == 0 {
            return Err(Error::UninitializedStatistics);
        }
        let mut h = x.matmul(&self.weight)?;
        let d = h.cols();
        for row in h.data_mut().chunks_mut(d) {
            for j in 0..d {
                let z = (row[j] - self.running_mean.data()[j]) / (self.running_var.data()[j] + self.eps).sqrt();
                row[j] = z * self.gamma.data()[j] + self.beta.data()[j];
            }
        }
        Ok(h)
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("weight", &self.weight),
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("weight", &mut self.weight),
            ("gamma", &mut self.gamma),
            ("beta", &mut self.beta),
            ("running_mean", &mut self.running_mean),
            ("running_var", &mut self.running_var),
        ]
    }

    pub fn trainable<'a>(&'a mut self, vars: &EmbedVars) -> Vec<(&'a mut Tensor, Var)> {
        vec![
            (&mut self.weight, vars.weight),
            (&mut self.gamma, vars.gamma),
            (&mut self.beta, vars.beta),
        ]
    }
}
