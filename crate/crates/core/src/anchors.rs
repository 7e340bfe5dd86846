//! Structured anchors, per-image domain anchors and the decorrelation loss.
//!
//! A structured anchor is never stored directly: each one is recomputed from
//! its learnable context sequence, bracketed by fixed start and suffix
//! embeddings, run through a frozen causal text transformer and projected to
//! the patch-token width. Only the contexts and the projection are trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, AttentionVars, LayerNorm, LayerNormVars, Linear, LinearVars};
use crate::tensor::{Graph, Tensor, Var};
use crate::weights::{expect_shape, WeightBlob};

pub const LN_EPS: f64 = 1e-5;
/// Domain generator parameter budget at width 768 with three anchors.
const DOMAIN_HIDDEN_AT_768: f64 = 4818.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Toy,
    Loaded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    Structured,
    Free,
}

#[derive(Clone, Debug, PartialEq)]
struct TextBlock {
    ln1: LayerNorm,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ln2: LayerNorm,
    fc: Linear,
    out: Linear,
}

struct TextBlockVars {
    ln1: LayerNormVars,
    attn: AttentionVars,
    ln2: LayerNormVars,
    fc: LinearVars,
    out: LinearVars,
}

/// Frozen causal text transformer; the output is the last position's hidden
/// state after the final layer norm, optionally projected.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTextEncoder {
    pub mode: EncoderMode,
    width: usize,
    heads: usize,
    sos: Tensor,
    suffix: Tensor,
    positional: Tensor,
    blocks: Vec<TextBlock>,
    final_ln: LayerNorm,
    projection: Option<Tensor>,
}

pub struct EncoderVars {
    sos: Var,
    suffix: Var,
    positional: Var,
    blocks: Vec<TextBlockVars>,
    final_ln: LayerNormVars,
    projection: Option<Var>,
    mask: Var,
}

impl FrozenTextEncoder {
    /// Seeded random transformer at CLIP-like embedding scales.
    pub fn toy(width: usize, layers: usize, heads: usize, max_len: usize, seed: u64) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} text heads do not divide width {width}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sos = Tensor::randn(&[width], 0.02, &mut rng);
        let suffix = Tensor::randn(&[width], 0.02, &mut rng);
        let positional = Tensor::randn(&[max_len, width], 0.01, &mut rng);
        let blocks = (0..layers)
            .map(|_| TextBlock {
                ln1: LayerNorm::new(width),
                wq: Linear::random(width, width, &mut rng),
                wk: Linear::random(width, width, &mut rng),
                wv: Linear::random(width, width, &mut rng),
                wo: Linear::random(width, width, &mut rng),
                ln2: LayerNorm::new(width),
                fc: Linear::random(width, 4 * width, &mut rng),
                out: Linear::random(4 * width, width, &mut rng),
            })
            .collect();
        let projection = Some(Tensor::randn(&[width, width], 1.0 / (width as f64).sqrt(), &mut rng));
        Ok(FrozenTextEncoder {
            mode: EncoderMode::Toy,
            width,
            heads,
            sos,
            suffix,
            positional,
            blocks,
            final_ln: LayerNorm::new(width),
            projection,
        })
    }

    /// Reads the `text.*` tensors of an exported weight blob.
    pub fn from_blob(blob: &WeightBlob) -> Result<Self> {
        let heads = blob.meta_usize("text_heads")?;
        let sos = blob.get("text.sos")?.clone();
        let width = sos.len();
        let suffix = expect_shape(blob, "text.suffix", &[width])?;
        let positional = blob.get("text.positional")?.clone();
        if positional.cols() != width {
            return Err(Error::Shape {
                op: "text.positional",
                lhs: positional.shape().to_vec(),
                rhs: vec![width],
            });
        }
        let mut blocks = Vec::new();
        while blob.tensors.contains_key(&format!("text.layers.{}.ln1.gamma", blocks.len())) {
            let p = format!("text.layers.{}", blocks.len());
            let ln = |n: &str| -> Result<LayerNorm> {
                Ok(LayerNorm {
                    gamma: expect_shape(blob, &format!("{p}.{n}.gamma"), &[width])?,
                    beta: expect_shape(blob, &format!("{p}.{n}.beta"), &[width])?,
                })
            };
            let lin = |n: &str, i: usize, o: usize| -> Result<Linear> {
                Ok(Linear {
                    weight: expect_shape(blob, &format!("{p}.{n}.weight"), &[i, o])?,
                    bias: expect_shape(blob, &format!("{p}.{n}.bias"), &[o])?,
                })
            };
            let hidden = blob.get(&format!("{p}.fc.weight"))?.cols();
            blocks.push(TextBlock {
                ln1: ln("ln1")?,
                wq: lin("wq", width, width)?,
                wk: lin("wk", width, width)?,
                wv: lin("wv", width, width)?,
                wo: lin("wo", width, width)?,
                ln2: ln("ln2")?,
                fc: lin("fc", width, hidden)?,
                out: lin("out", hidden, width)?,
            });
        }
        if blocks.is_empty() {
            return Err(Error::Checkpoint("weight blob has no text layers".into()));
        }
        let final_ln = LayerNorm {
            gamma: expect_shape(blob, "text.final_ln.gamma", &[width])?,
            beta: expect_shape(blob, "text.final_ln.beta", &[width])?,
        };
        let projection = match blob.tensors.get("text.projection") {
            Some(t) if t.rows() == width && t.shape().len() == 2 => Some(t.clone()),
            Some(t) => {
                return Err(Error::Shape {
                    op: "text.projection",
                    lhs: t.shape().to_vec(),
                    rhs: vec![width],
                })
            }
            None => None,
        };
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} text heads do not divide width {width}")));
        }
        Ok(FrozenTextEncoder {
            mode: EncoderMode::Loaded,
            width,
            heads,
            sos,
            suffix,
            positional,
            blocks,
            final_ln,
            projection,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn output_dim(&self) -> usize {
        self.projection.as_ref().map_or(self.width, |p| p.cols())
    }

    pub fn max_len(&self) -> usize {
        self.positional.rows()
    }

    /// Registers the frozen weights as constants for one sequence length.
    pub fn bind(&self, g: &mut Graph, seq_len: usize) -> Result<EncoderVars> {
        if seq_len > self.max_len() {
            return Err(Error::Config(format!(
                "sequence of {seq_len} exceeds {} positions",
                self.max_len()
            )));
        }
        let mut mask = Tensor::zeros(&[seq_len, seq_len]);
        for i in 0..seq_len {
            for j in i + 1..seq_len {
                mask.data_mut()[i * seq_len + j] = -1e30;
            }
        }
        let pos = Tensor::matrix(
            seq_len,
            self.width,
            self.positional.data()[..seq_len * self.width].to_vec(),
        )?;
        Ok(EncoderVars {
            sos: g.constant(self.sos.clone().reshaped(&[1, self.width])?),
            suffix: g.constant(self.suffix.clone().reshaped(&[1, self.width])?),
            positional: g.constant(pos),
            blocks: self
                .blocks
                .iter()
                .map(|b| TextBlockVars {
                    ln1: b.ln1.bind(g, false),
                    attn: AttentionVars {
                        wq: b.wq.bind(g, false),
                        wk: b.wk.bind(g, false),
                        wv: b.wv.bind(g, false),
                        wo: b.wo.bind(g, false),
                    },
                    ln2: b.ln2.bind(g, false),
                    fc: b.fc.bind(g, false),
                    out: b.out.bind(g, false),
                })
                .collect(),
            final_ln: self.final_ln.bind(g, false),
            projection: self.projection.as_ref().map(|p| g.constant(p.clone())),
            mask: g.constant(mask),
        })
    }

    /// Encodes `[sos; context; suffix]` and returns a `1 × output_dim` row.
    pub fn encode(&self, g: &mut Graph, vars: &EncoderVars, context: Var) -> Result<Var> {
        let seq = g.concat_rows(&[vars.sos, context, vars.suffix])?;
        let mut x = g.add(seq, vars.positional)?;
        for b in &vars.blocks {
            let h = nn::layer_norm(g, x, b.ln1, LN_EPS)?;
            let (a, _) = nn::multi_head_attention(g, h, h, &b.attn, self.heads, Some(vars.mask))?;
            x = g.add(x, a)?;
            let h = nn::layer_norm(g, x, b.ln2, LN_EPS)?;
            let h = nn::linear(g, h, b.fc)?;
            let h = g.quick_gelu(h);
            let h = nn::linear(g, h, b.out)?;
            x = g.add(x, h)?;
        }
        let len = g.value(x).rows();
        let last = g.slice_rows(x, len - 1, len)?;
        let last = nn::layer_norm(g, last, vars.final_ln, LN_EPS)?;
        match vars.projection {
            Some(p) => g.matmul(last, p),
            None => Ok(last),
        }
    }

    /// Every frozen tensor, for immutability checks.
    pub fn weight_snapshot(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut push = |t: &Tensor| out.extend_from_slice(t.data());
        push(&self.sos);
        push(&self.suffix);
        push(&self.positional);
        for b in &self.blocks {
            for t in [
                &b.ln1.gamma, &b.ln1.beta, &b.wq.weight, &b.wq.bias, &b.wk.weight, &b.wk.bias, &b.wv.weight,
                &b.wv.bias, &b.wo.weight, &b.wo.bias, &b.ln2.gamma, &b.ln2.beta, &b.fc.weight, &b.fc.bias,
                &b.out.weight, &b.out.bias,
            ] {
                push(t);
            }
        }
        push(&self.final_ln.gamma);
        push(&self.final_ln.beta);
        if let Some(p) = &self.projection {
            push(p);
        }
        out
    }
}

/// The shared anchor basis.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorBank {
    pub mode: AnchorMode,
    pub k: usize,
    pub context_len: usize,
    /// `(k · context_len) × text_width`; anchor `i` owns rows
    /// `i·context_len .. (i+1)·context_len`.
    pub contexts: Tensor,
    /// `encoder_output × dim`.
    pub w_proj: Tensor,
    /// `k × dim`, used only in free mode.
    pub free: Tensor,
    pub encoder: FrozenTextEncoder,
}

pub struct AnchorVars {
    pub contexts: Var,
    pub w_proj: Var,
    pub free: Var,
}

impl AnchorBank {
    pub fn new(
        mode: AnchorMode,
        k: usize,
        context_len: usize,
        dim: usize,
        encoder: FrozenTextEncoder,
        seed: u64,
    ) -> Result<Self> {
        if k == 0 || context_len == 0 {
            return Err(Error::Config("anchor count and context length must be positive".into()));
        }
        if context_len + 2 > encoder.max_len() {
            return Err(Error::Config(format!(
                "context length {context_len} exceeds encoder positions"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let width = encoder.width();
        let out = encoder.output_dim();
        Ok(AnchorBank {
            mode,
            k,
            context_len,
            contexts: Tensor::randn(&[k * context_len, width], 0.02, &mut rng),
            w_proj: Tensor::randn(&[out, dim], 1.0 / (out as f64).sqrt(), &mut rng),
            free: Tensor::randn(&[k, dim], 1.0, &mut rng),
            encoder,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_proj.cols()
    }

    /// Binds the bank; only the tensors used by the current mode are trainable.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> AnchorVars {
        let structured = trainable && self.mode == AnchorMode::Structured;
        let free = trainable && self.mode == AnchorMode::Free;
        AnchorVars {
            contexts: nn::bind(g, &self.contexts, structured),
            w_proj: nn::bind(g, &self.w_proj, structured),
            free: nn::bind(g, &self.free, free),
        }
    }

    /// `k × dim` anchor matrix for the current mode.
    pub fn build(&self, g: &mut Graph, vars: &AnchorVars) -> Result<Var> {
        match self.mode {
            AnchorMode::Free => Ok(vars.free),
            AnchorMode::Structured => {
                let enc = self.encoder.bind(g, self.context_len + 2)?;
                let mut rows = Vec::with_capacity(self.k);
                for i in 0..self.k {
                    let ctx = g.slice_rows(vars.contexts, i * self.context_len, (i + 1) * self.context_len)?;
                    let h = self.encoder.encode(g, &enc, ctx)?;
                    rows.push(g.matmul(h, vars.w_proj)?);
                }
                g.concat_rows(&rows)
            }
        }
    }

    /// Forward-only anchor matrix.
    pub fn anchors(&self) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let a = self.build(&mut g, &vars)?;
        Ok(g.value(a).clone())
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("contexts", &self.contexts), ("w_proj", &self.w_proj), ("free", &self.free)]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("contexts", &mut self.contexts),
            ("w_proj", &mut self.w_proj),
            ("free", &mut self.free),
        ]
    }

    /// Trainable tensors and their bound vars, in matching order.
    pub fn trainable<'a>(&'a mut self, vars: &AnchorVars) -> Vec<(&'a mut Tensor, Var)> {
        match self.mode {
            AnchorMode::Structured => vec![(&mut self.contexts, vars.contexts), (&mut self.w_proj, vars.w_proj)],
            AnchorMode::Free => vec![(&mut self.free, vars.free)],
        }
    }
}

/// `λ / (K(K−1)) · Σ_{i≠j} (âᵢ·âⱼ)²` over ordered pairs of unit-normalized rows.
pub fn decorrelation_loss(g: &mut Graph, anchors: Var, lambda: f64) -> Result<Var> {
    let k = g.value(anchors).rows();
    if k < 2 {
        return Err(Error::invalid("decorrelation loss needs at least two anchors"));
    }
    let unit = g.l2_normalize_rows(anchors)?;
    let ut = g.transpose(unit)?;
    let gram = g.matmul(unit, ut)?;
    let mut off = Tensor::full(&[k, k], 1.0);
    for i in 0..k {
        off.data_mut()[i * k + i] = 0.0;
    }
    let off = g.constant(off);
    let masked = g.mul(gram, off)?;
    let sq = g.mul(masked, masked)?;
    let total = g.sum(sq);
    Ok(g.scale(total, lambda / (k * (k - 1)) as f64))
}

/// Hidden width scaled linearly with the token width from the 768-wide budget.
pub fn default_domain_hidden(dim: usize) -> usize {
    ((DOMAIN_HIDDEN_AT_768 * dim as f64 / 768.0).round() as usize).max(1)
}

/// Two-layer MLP decoding `m` anchors from mean-pooled tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainAnchorGenerator {
    pub m: usize,
    /// `dim × hidden`.
    pub w1: Tensor,
    /// `hidden × (m · dim)`.
    pub w2: Tensor,
}

pub struct DomainVars {
    pub w1: Var,
    pub w2: Var,
}

impl DomainAnchorGenerator {
    pub fn new(dim: usize, hidden: usize, m: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DomainAnchorGenerator {
            m,
            w1: Tensor::randn(&[dim, hidden], 1.0 / (dim as f64).sqrt(), &mut rng),
            w2: Tensor::randn(&[hidden, m * dim], 1.0 / (hidden as f64).sqrt(), &mut rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DomainVars {
        DomainVars {
            w1: nn::bind(g, &self.w1, trainable),
            w2: nn::bind(g, &self.w2, trainable),
        }
    }

    /// `m × dim` anchors for one image, or `None` when `m = 0`.
    pub fn forward(&self, g: &mut Graph, vars: &DomainVars, tokens: Var) -> Result<Option<Var>> {
        if self.m == 0 {
            return Ok(None);
        }
        let d = self.dim();
        let pooled = g.mean_rows(tokens);
        let pooled = g.reshape(pooled, &[1, d])?;
        let h = g.matmul(pooled, vars.w1)?;
        let h = g.relu(h);
        let out = g.matmul(h, vars.w2)?;
        Ok(Some(g.reshape(out, &[self.m, d])?))
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![("w1", &self.w1), ("w2", &self.w2)]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![("w1", &mut self.w1), ("w2", &mut self.w2)]
    }

    pub fn trainable<'a>(&'a mut self, vars: &DomainVars) -> Vec<(&'a mut Tensor, Var)> {
        vec![(&mut self.w1, vars.w1), (&mut self.w2, vars.w2)]
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.w2.len()
    }
}

/// `[structured; domain]`, structured rows first.
pub fn assemble_anchor_set(g: &mut Graph, structured: Var, domain: Option<Var>) -> Result<Var> {
    match domain {
        None => Ok(structured),
        Some(d) => {
            let (a, b) = (g.value(structured), g.value(d));
            if a.cols() != b.cols() {
                return Err(Error::Shape {
                    op: "assemble_anchor_set",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            g.concat_rows(&[structured, d])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn small_bank(mode: AnchorMode) -> AnchorBank {
        let enc = FrozenTextEncoder::toy(16, 2, 4, 8, 3).unwrap();
        AnchorBank::new(mode, 4, 2, 8, enc, 5).unwrap()
    }

    fn decor(rows: Vec<Vec<f64>>, lambda: f64) -> f64 {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&rows).unwrap());
        let l = decorrelation_loss(&mut g, a, lambda).unwrap();
        g.value(l).item()
    }

    #[test]
    fn free_mode_returns_parameters() {
        let mut bank = small_bank(AnchorMode::Free);
        let mut eye = Tensor::zeros(&[4, 8]);
        for i in 0..4 {
            eye.data_mut()[i * 8 + i] = 1.0;
        }
        bank.free = eye.clone();
        assert_eq!(bank.anchors().unwrap(), eye);
    }

    #[test]
    fn structured_mode_is_deterministic_and_local() {
        let bank = small_bank(AnchorMode::Structured);
        let a = bank.anchors().unwrap();
        assert_eq!(a, bank.anchors().unwrap());
        assert_eq!(a.shape(), &[4, 8]);

        let mut perturbed = bank.clone();
        // Row 1 of anchor 2's context.
        let w = bank.encoder.width();
        perturbed.contexts.data_mut()[(2 * 2 + 1) * w + 3] += 0.05;
        let b = perturbed.anchors().unwrap();
        for k in 0..4 {
            let same = a.row(k) == b.row(k);
            assert_eq!(same, k != 2, "anchor {k}");
        }
    }

    #[test]
    fn decorrelation_examples() {
        assert_eq!(decor(vec![vec![1.0, 0.0], vec![0.0, 2.0]], 1.0), 0.0);
        assert!((decor(vec![vec![1.0, 2.0], vec![1.0, 2.0]], 1.0) - 1.0).abs() < 1e-12);
        let s = 0.5f64.sqrt();
        let v = decor(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![s, s]], 1.0);
        assert!((v - 1.0 / 3.0).abs() < 1e-12, "{v}");
    }

    #[test]
    fn decorrelation_rejects_zero_anchor() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
        assert!(matches!(decorrelation_loss(&mut g, a, 1.0), Err(Error::DegenerateNorm(_))));
    }

    proptest::proptest! {
        #[test]
        fn decorrelation_is_row_scale_invariant(
            rows in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 4), 2..6),
            scales in proptest::collection::vec(0.1f64..10.0, 6),
        ) {
            proptest::prop_assume!(rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-3));
            let scaled: Vec<Vec<f64>> = rows.iter().zip(&scales).map(|(r, s)| r.iter().map(|v| v * s).collect()).collect();
            let a = decor(rows, 0.7);
            let b = decor(scaled, 0.7);
            proptest::prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn domain_anchor_edge_cases() {
        let gen = DomainAnchorGenerator::new(8, 5, 2, 1);
        let tokens = Tensor::randn(&[6, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let run = |gen: &DomainAnchorGenerator, t: &Tensor| {
            let mut g = Graph::new();
            let v = gen.bind(&mut g, false);
            let x = g.constant(t.clone());
            let d = gen.forward(&mut g, &v, x).unwrap().unwrap();
            g.value(d).clone()
        };
        let mut zero = gen.clone();
        zero.w1 = Tensor::zeros(zero.w1.shape());
        assert!(run(&zero, &tokens).data().iter().all(|&v| v == 0.0));
        let mut zero = gen.clone();
        zero.w2 = Tensor::zeros(zero.w2.shape());
        assert!(run(&zero, &tokens).data().iter().all(|&v| v == 0.0));

        let base = run(&gen, &tokens);
        assert_eq!(base.shape(), &[2, 8]);
        let mut rows: Vec<Vec<f64>> = (0..6).map(|i| tokens.row(i).to_vec()).collect();
        rows.reverse();
        rows.swap(0, 3);
        let permuted = run(&gen, &Tensor::from_rows(&rows).unwrap());
        for (a, b) in base.data().iter().zip(permuted.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn domain_anchor_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gen = DomainAnchorGenerator::new(8, 5, 2, 4);
        let tokens = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[2, 8], 1.0, &mut rng);
        let m = gen.m;
        let report = check_gradients(&[gen.w1.clone(), gen.w2.clone(), tokens], 1e-5, |g, v| {
            let pooled = g.mean_rows(v[2]);
            let pooled = g.reshape(pooled, &[1, 8])?;
            let h = g.matmul(pooled, v[0])?;
            let h = g.relu(h);
            let out = g.matmul(h, v[1])?;
            let out = g.reshape(out, &[m, 8])?;
            let wv = g.constant(w.clone());
            let p = g.mul(out, wv)?;
            Ok(g.sum(p))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn assemble_orders_structured_first() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::randn(&[24, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let d = g.constant(Tensor::randn(&[3, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let all = assemble_anchor_set(&mut g, a, Some(d)).unwrap();
        assert_eq!(g.value(all).rows(), 27);
        assert_eq!(g.value(all).row(0), g.value(a).row(0));
        assert_eq!(assemble_anchor_set(&mut g, a, None).unwrap(), a);
        let bad = g.constant(Tensor::zeros(&[3, 7]));
        assert!(assemble_anchor_set(&mut g, a, Some(bad)).is_err());
    }

    #[test]
    fn structured_gradients_reach_contexts_only() {
        let bank = small_bank(AnchorMode::Structured);
        let frozen = bank.encoder.weight_snapshot();
        let mut g = Graph::new();
        let vars = bank.bind(&mut g, true);
        let a = bank.build(&mut g, &vars).unwrap();
        let l = decorrelation_loss(&mut g, a, 1.0).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(vars.contexts).is_some());
        assert!(g.grad(vars.w_proj).is_some());
        assert!(g.grad(vars.free).is_none());
        assert_eq!(frozen, bank.encoder.weight_snapshot());
    }

    #[test]
    fn structured_anchor_gradcheck() {
        let bank = small_bank(AnchorMode::Structured);
        let bank2 = bank.clone();
        let report = check_gradients(&[bank.contexts.clone(), bank.w_proj.clone()], 1e-5, move |g, v| {
            let enc = bank2.encoder.bind(g, bank2.context_len + 2)?;
            let mut rows = Vec::new();
            for i in 0..bank2.k {
                let ctx = g.slice_rows(v[0], i * 2, i * 2 + 2)?;
                let h = bank2.encoder.encode(g, &enc, ctx)?;
                rows.push(g.matmul(h, v[1])?);
            }
            let a = g.concat_rows(&rows)?;
            decorrelation_loss(g, a, 1.0)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn domain_hidden_budget() {
        let gen_params = 768 * default_domain_hidden(768) * (1 + 3);
        assert!((gen_params as f64 - 14.8e6).abs() / 14.8e6 < 0.01, "{gen_params}");
        assert_eq!(default_domain_hidden(64), 402);
    }
}
