//! The gradient-check suite behind `anchor-reid gradcheck` and the A1 gate:
//! every differentiable graph operation, each learned module, and the full
//! training loss on a four-image micro-batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::anchors::{decorrelation_loss, AnchorBank, AnchorMode, DomainAnchorGenerator, FrozenTextEncoder};
use crate::config::RunConfig;
use crate::corpus::{FeatureRecord, IdentityTextBank, Split};
use crate::error::{Error, Result};
use crate::gradcheck::{check_gradients, GradCheck};
use crate::model::Model;
use crate::objective::{i2t_loss, id_loss, total_loss, triplet_loss_batch_hard, LossConfig};
use crate::refine::{InitMode, RefinementModule};
use crate::tensor::{Graph, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const MODULES: [&str; 5] = ["tensor", "anchors", "refine", "objective", "model"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub module: &'static str,
    pub name: &'static str,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

type Check = fn() -> Result<GradCheck>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Contracts `y` against a fixed random tensor of the same shape so every
/// output element carries a distinct upstream gradient.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(randn(&shape, seed));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn unary(shape: &[usize], seed: u64, op: fn(&mut Graph, Var) -> Result<Var>) -> Result<GradCheck> {
    check_gradients(&[randn(shape, seed)], STEP, |g, v| {
        let y = op(g, v[0])?;
        probe(g, y, seed + 1000)
    })
}

fn binary(a: &[usize], b: &[usize], seed: u64, op: fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<GradCheck> {
    check_gradients(&[randn(a, seed), randn(b, seed + 1)], STEP, |g, v| {
        let y = op(g, v[0], v[1])?;
        probe(g, y, seed + 1000)
    })
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let mut t = randn(shape, seed);
    t.data_mut().iter_mut().for_each(|x| *x = 0.5 + x.abs());
    t
}

fn tensor_checks() -> Vec<(&'static str, f64, Check)> {
    vec![
        ("matmul", 1e-6, || binary(&[3, 4], &[4, 2], 1, |g, a, b| g.matmul(a, b))),
        ("transpose", 1e-6, || unary(&[3, 5], 2, |g, a| g.transpose(a))),
        ("add", 1e-6, || binary(&[2, 3], &[2, 3], 3, |g, a, b| g.add(a, b))),
        ("sub", 1e-6, || binary(&[2, 3], &[2, 3], 4, |g, a, b| g.sub(a, b))),
        ("mul", 1e-6, || binary(&[2, 3], &[2, 3], 5, |g, a, b| g.mul(a, b))),
        ("scale", 1e-6, || unary(&[2, 3], 6, |g, a| Ok(g.scale(a, -1.7)))),
        ("add_scalar", 1e-6, || unary(&[2, 3], 7, |g, a| Ok(g.add_scalar(a, 0.3)))),
        ("add_row", 1e-6, || binary(&[3, 4], &[4], 8, |g, a, b| g.add_row(a, b))),
        ("mul_row", 1e-6, || binary(&[3, 4], &[4], 9, |g, a, b| g.mul_row(a, b))),
        ("softmax_rows", 1e-6, || unary(&[7], 10, |g, a| Ok(g.softmax_rows(a)))),
        ("log_softmax_rows", 1e-6, || unary(&[3, 5], 11, |g, a| Ok(g.log_softmax_rows(a)))),
        ("layer_norm", 1e-5, || {
            check_gradients(&[randn(&[2, 5], 12), randn(&[5], 13), randn(&[5], 14)], STEP, |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                probe(g, y, 1012)
            })
        }),
        ("standardize_cols", 1e-5, || unary(&[5, 3], 15, |g, a| Ok(g.standardize_cols(a, 1e-5)))),
        ("max_rows", 1e-6, || unary(&[4, 6], 16, |g, a| Ok(g.max_rows(a).0))),
        ("sum", 1e-6, || unary(&[3, 3], 17, |g, a| Ok(g.sum(a)))),
        ("mean", 1e-6, || unary(&[3, 3], 18, |g, a| Ok(g.mean(a)))),
        ("mean_rows", 1e-6, || unary(&[4, 3], 19, |g, a| Ok(g.mean_rows(a)))),
        ("relu", 1e-6, || unary(&[4, 5], 20, |g, a| Ok(g.relu(a)))),
        ("quick_gelu", 1e-6, || unary(&[4, 5], 21, |g, a| Ok(g.quick_gelu(a)))),
        ("reshape", 1e-6, || unary(&[2, 6], 22, |g, a| g.reshape(a, &[3, 4]))),
        ("concat_rows", 1e-6, || binary(&[2, 3], &[1, 3], 23, |g, a, b| g.concat_rows(&[a, b]))),
        ("concat_cols", 1e-6, || binary(&[2, 3], &[2, 2], 24, |g, a, b| g.concat_cols(&[a, b]))),
        ("slice_rows", 1e-6, || unary(&[5, 3], 25, |g, a| g.slice_rows(a, 1, 4))),
        ("slice_cols", 1e-6, || unary(&[3, 5], 26, |g, a| g.slice_cols(a, 2, 5))),
        ("normalize_sum", 1e-6, || {
            check_gradients(&[positive(&[6], 27)], STEP, |g, v| {
                let y = g.normalize_sum(v[0])?;
                probe(g, y, 1027)
            })
        }),
        ("pairwise_dist", 1e-5, || unary(&[4, 3], 28, |g, a| Ok(g.pairwise_dist(a)))),
        ("gather", 1e-6, || unary(&[3, 4], 29, |g, a| g.gather(a, &[0, 5, 5, 11, 7]))),
    ]
}

fn anchor_checks() -> Vec<(&'static str, f64, Check)> {
    vec![
        ("structured_anchors", 1e-4, || {
            let enc = FrozenTextEncoder::toy(16, 2, 4, 8, 3)?;
            let bank = AnchorBank::new(AnchorMode::Structured, 4, 2, 8, enc, 5)?;
            let b2 = bank.clone();
            check_gradients(&[bank.contexts.clone(), bank.w_proj.clone()], STEP, move |g, v| {
                let enc = b2.encoder.bind(g, b2.context_len + 2)?;
                let mut rows = Vec::new();
                for i in 0..b2.k {
                    let ctx = g.slice_rows(v[0], i * b2.context_len, (i + 1) * b2.context_len)?;
                    let h = b2.encoder.encode(g, &enc, ctx)?;
                    rows.push(g.matmul(h, v[1])?);
                }
                let a = g.concat_rows(&rows)?;
                decorrelation_loss(g, a, 1.0)
            })
        }),
        ("domain_generator", 1e-5, || {
            let gen = DomainAnchorGenerator::new(8, 5, 2, 4);
            let tokens = randn(&[6, 8], 40);
            let m = gen.m;
            check_gradients(&[gen.w1.clone(), gen.w2.clone(), tokens], STEP, move |g, v| {
                let pooled = g.mean_rows(v[2]);
                let pooled = g.reshape(pooled, &[1, 8])?;
                let h = g.matmul(pooled, v[0])?;
                let h = g.relu(h);
                let out = g.matmul(h, v[1])?;
                let out = g.reshape(out, &[m, 8])?;
                probe(g, out, 1040)
            })
        }),
        ("decorrelation", 1e-5, || {
            check_gradients(&[randn(&[3, 6], 41)], STEP, |g, v| decorrelation_loss(g, v[0], 1.0))
        }),
    ]
}

fn refine_checks() -> Vec<(&'static str, f64, Check)> {
    vec![("refinement_f_ref", 1e-4, || {
        let m = RefinementModule::new(8, 1, 2, 4, InitMode::Random, 4)?;
        let tokens = randn(&[4, 8], 50);
        let anchors = randn(&[3, 8], 51);
        let params: Vec<Tensor> = m.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        check_gradients(&params, STEP, move |g, v| {
            let vars = m.vars_from(g, v);
            let t = g.constant(tokens.clone());
            let a = g.constant(anchors.clone());
            let out = m.forward(g, &vars, t, a)?;
            let sq = g.mul(out.f_ref, out.f_ref)?;
            Ok(g.sum(sq))
        })
    })]
}

fn objective_checks() -> Vec<(&'static str, f64, Check)> {
    vec![
        ("id_loss", 1e-5, || {
            check_gradients(&[randn(&[3, 5], 60)], STEP, |g, v| id_loss(g, v[0], &[1, 4, 0], 0.1))
        }),
        ("triplet_batch_hard", 1e-5, || {
            check_gradients(&[randn(&[6, 3], 61)], STEP, |g, v| {
                triplet_loss_batch_hard(g, v[0], &[0, 0, 1, 1, 2, 2], 0.3)
            })
        }),
        ("i2t_loss", 1e-5, || {
            let bank = IdentityTextBank::random(&[3, 7, 11], 4, 62)?;
            check_gradients(&[randn(&[2, 4], 63)], STEP, move |g, v| i2t_loss(g, v[0], &bank, &[3, 11], 0.07, 0.1))
        }),
    ]
}

/// Small configuration exercising every trainable section.
pub fn micro_config() -> RunConfig {
    RunConfig {
        num_anchors: 3,
        domain_anchors: 1,
        domain_hidden: Some(4),
        context_len: 2,
        text_width: 8,
        text_layers: 1,
        text_heads: 2,
        n_blocks: 1,
        heads: 2,
        ffn_ratio: 2,
        refine_init: InitMode::Random,
        classifier_std: 0.5,
        i2t_aux_head: true,
        ..RunConfig::default()
    }
}

/// Two identities under two cameras each, `dim = 8`, four tokens per image.
pub fn micro_batch() -> Vec<FeatureRecord> {
    let mut r = rng(70);
    (0..4u64)
        .map(|i| FeatureRecord {
            person_id: 1 + i / 2,
            camera_id: (i % 2) as u32,
            split: Split::Train,
            cls: Tensor::randn(&[8], 1.0, &mut r).into_data(),
            proj: Tensor::randn(&[4], 1.0, &mut r).into_data(),
            tokens: Tensor::randn(&[4, 8], 1.0, &mut r),
        })
        .collect()
}

fn model_checks() -> Vec<(&'static str, f64, Check)> {
    vec![("total_loss_micro_batch", 1e-4, || {
        let cfg = micro_config();
        let model = Model::new(&cfg, 8, 4, vec![1, 2])?;
        let bank = IdentityTextBank::random(&model.class_ids, 4, 71)?;
        let batch = micro_batch();
        let loss_cfg = LossConfig::from_run(&cfg);
        let inputs: Vec<Tensor> = model.trainable_tensors().into_iter().cloned().collect();
        check_gradients(&inputs, STEP, move |g, v| {
            let vars = model.bind(g, v);
            let recs: Vec<&FeatureRecord> = batch.iter().collect();
            Ok(total_loss(g, &model, &vars, &recs, &bank, &loss_cfg)?.loss)
        })
    })]
}

fn checks(module: &str) -> Option<Vec<(&'static str, f64, Check)>> {
    Some(match module {
        "tensor" => tensor_checks(),
        "anchors" => anchor_checks(),
        "refine" => refine_checks(),
        "objective" => objective_checks(),
        "model" => model_checks(),
        _ => return None,
    })
}

/// Runs one module's checks, or all of them when `module` is `None`.
pub fn run_suite(module: Option<&str>) -> Result<Vec<SuiteEntry>> {
    let modules: Vec<&'static str> = match module {
        None => MODULES.to_vec(),
        Some(m) => vec![*MODULES.iter().find(|&&x| x == m).ok_or_else(|| {
            Error::invalid(format!("unknown gradcheck module `{m}` (expected one of {})", MODULES.join(", ")))
        })?],
    };
    let mut out = Vec::new();
    for m in modules {
        for (name, tolerance, f) in checks(m).expect("listed module") {
            let r = f()?;
            out.push(SuiteEntry {
                module: m,
                name,
                tolerance,
                max_rel_error: r.max_rel_error,
                max_abs_error: r.max_abs_error,
                checked: r.checked,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_module_rejected() {
        assert!(run_suite(Some("nope")).is_err());
    }

    #[test]
    fn tensor_module_passes() {
        for e in run_suite(Some("tensor")).unwrap() {
            assert!(e.passed(), "{e:?}");
            assert!(e.checked > 0);
        }
    }
}
