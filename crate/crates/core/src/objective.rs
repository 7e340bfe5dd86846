//! Training objective, optimizer, PK batch sampling and the stage-2 loop.
//!
//! `L = L_id(f) + λ_tri · L_tri(f) + λ_i2t · L_i2t(p) + λ_div · L_div`, where
//! `f` is the embedding-head output, `p` the image projection and `L_div` the
//! anchor decorrelation penalty.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::anchors::decorrelation_loss;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::corpus::{Corpus, FeatureRecord, IdentityTextBank, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossConfig {
    pub lambda_tri: f64,
    pub lambda_i2t: f64,
    pub lambda_div: f64,
    pub margin: f64,
    pub label_smoothing: f64,
    pub temperature: f64,
}

impl LossConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        LossConfig {
            lambda_tri: cfg.lambda_tri,
            lambda_i2t: cfg.lambda_i2t,
            lambda_div: cfg.lambda_div,
            margin: cfg.margin,
            label_smoothing: cfg.label_smoothing,
            temperature: cfg.temperature,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig::from_run(&RunConfig::default())
    }
}

/// `(1−ε)` on the true class and `ε/(C−1)` elsewhere.
pub fn smoothed_targets(labels: &[usize], classes: usize, eps: f64) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), classes]);
    let off = if classes > 1 { eps / (classes - 1) as f64 } else { 0.0 };
    let on = if classes > 1 { 1.0 - eps } else { 1.0 };
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        let row = &mut t.data_mut()[i * classes..(i + 1) * classes];
        row.iter_mut().for_each(|v| *v = off);
        row[l] = on;
    }
    Ok(t)
}

/// Label-smoothed cross-entropy, mean over the batch.
pub fn id_loss(g: &mut Graph, logits: Var, labels: &[usize], eps: f64) -> Result<Var> {
    let (b, c) = (g.value(logits).rows(), g.value(logits).cols());
    if labels.len() != b || b == 0 {
        return Err(Error::Shape {
            op: "id_loss",
            lhs: g.value(logits).shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let targets = g.constant(smoothed_targets(labels, c, eps)?);
    let logp = g.log_softmax_rows(logits);
    let weighted = g.mul(logp, targets)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, -1.0 / b as f64))
}

/// Hardest positive and hardest negative of every anchor row. The anchor
/// counts as its own positive, so a singleton identity has `d_ap = 0`.
/// Ties resolve to the lowest index.
pub fn hardest_pairs(dist: &Tensor, labels: &[u64]) -> Result<Vec<(usize, usize)>> {
    let b = labels.len();
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    labels.iter().for_each(|l| *counts.entry(*l).or_default() += 1);
    if counts.len() < 2 || counts.values().all(|&c| c < 2) {
        return Err(Error::Sampling(format!(
            "batch-hard mining needs 2+ identities and an identity with 2+ images; got {} identities over {b} images",
            counts.len()
        )));
    }
    Ok((0..b)
        .map(|i| {
            let (mut pos, mut neg) = (i, usize::MAX);
            for j in 0..b {
                let d = dist.get(i, j);
                if labels[j] == labels[i] {
                    if d > dist.get(i, pos) {
                        pos = j;
                    }
                } else if neg == usize::MAX || d < dist.get(i, neg) {
                    neg = j;
                }
            }
            (pos, neg)
        })
        .collect())
}

/// `mean_i max(0, margin + d(i, hardest positive) − d(i, hardest negative))`
/// over Euclidean distances.
pub fn triplet_loss_batch_hard(g: &mut Graph, embeddings: Var, labels: &[u64], margin: f64) -> Result<Var> {
    let b = g.value(embeddings).rows();
    if labels.len() != b {
        return Err(Error::Shape {
            op: "triplet_loss",
            lhs: g.value(embeddings).shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let dist = g.pairwise_dist(embeddings);
    let pairs = hardest_pairs(g.value(dist), labels)?;
    let ap: Vec<usize> = pairs.iter().enumerate().map(|(i, &(p, _))| i * b + p).collect();
    let an: Vec<usize> = pairs.iter().enumerate().map(|(i, &(_, n))| i * b + n).collect();
    let d_ap = g.gather(dist, &ap)?;
    let d_an = g.gather(dist, &an)?;
    let diff = g.sub(d_ap, d_an)?;
    let shifted = g.add_scalar(diff, margin);
    let hinge = g.relu(shifted);
    Ok(g.mean(hinge))
}

/// Cross-entropy over `cos(p, bank row) / τ` with the same label smoothing.
pub fn i2t_loss(
    g: &mut Graph,
    proj: Var,
    bank: &IdentityTextBank,
    person_ids: &[u64],
    tau: f64,
    eps: f64,
) -> Result<Var> {
    let labels = person_ids
        .iter()
        .map(|&pid| {
            bank.class_of(pid)
                .ok_or_else(|| Error::invalid(format!("identity {pid} missing from the text bank")))
        })
        .collect::<Result<Vec<_>>>()?;
    let unit = g.l2_normalize_rows(proj)?;
    let bank_t = g.constant(bank.features.transpose());
    let cos = g.matmul(unit, bank_t)?;
    let logits = g.scale(cos, 1.0 / tau);
    id_loss(g, logits, &labels, eps)
}

/// Unweighted term values and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub id: f64,
    pub tri: f64,
    pub i2t: f64,
    pub div: f64,
}

impl LossBreakdown {
    pub fn weighted_sum(&self, cfg: &LossConfig) -> f64 {
        self.id + cfg.lambda_tri * self.tri + cfg.lambda_i2t * self.i2t + cfg.lambda_div * self.div
    }
}

pub struct LossOutput {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub pre_norm: Tensor,
}

pub fn total_loss(
    g: &mut Graph,
    model: &Model,
    vars: &crate::model::ModelVars,
    batch: &[&FeatureRecord],
    bank: &IdentityTextBank,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let fwd = model.forward_batch(g, vars, batch)?;
    let person_ids: Vec<u64> = batch.iter().map(|r| r.person_id).collect();
    let labels = person_ids
        .iter()
        .map(|pid| {
            model.class_ids.binary_search(pid).map_err(|_| Error::LabelOutOfRange {
                label: *pid as usize,
                classes: model.class_ids.len(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let id = id_loss(g, fwd.logits, &labels, cfg.label_smoothing)?;
    let tri = triplet_loss_batch_hard(g, fwd.embeddings, &person_ids, cfg.margin)?;
    let proj = match fwd.aux_proj {
        Some(p) => p,
        None => {
            let rows: Vec<Vec<f64>> = batch.iter().map(|r| r.proj.clone()).collect();
            g.constant(Tensor::from_rows(&rows)?)
        }
    };
    let i2t = i2t_loss(g, proj, bank, &person_ids, cfg.temperature, cfg.label_smoothing)?;
    let div = if g.value(fwd.anchors).rows() >= 2 {
        decorrelation_loss(g, fwd.anchors, 1.0)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };

    let mut loss = id;
    for (term, w) in [(tri, cfg.lambda_tri), (i2t, cfg.lambda_i2t), (div, cfg.lambda_div)] {
        let scaled = g.scale(term, w);
        loss = g.add(loss, scaled)?;
    }
    let breakdown = LossBreakdown {
        total: g.value(loss).item(),
        id: g.value(id).item(),
        tri: g.value(tri).item(),
        i2t: g.value(i2t).item(),
        div: g.value(div).item(),
    };
    Ok(LossOutput {
        loss,
        breakdown,
        pre_norm: fwd.pre_norm,
    })
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update; a missing gradient counts as zero.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Tensor>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer state does not match the parameter list");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.into_iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let grad = grads[i].as_ref();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = grad.map_or(0.0, |t| t.data()[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Cosine decay from `base` at progress 0 to 0 at progress 1.
pub fn cosine_lr(base: f64, progress: f64) -> f64 {
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress.clamp(0.0, 1.0)).cos())
}

/// P identities × K images per batch. Each epoch shuffles every identity's
/// images, cuts them into K-sized chunks and draws P identities at a time
/// until fewer than P identities have chunks left.
#[derive(Clone, Debug)]
pub struct PkSampler {
    by_id: BTreeMap<u64, Vec<usize>>,
    p: usize,
    k: usize,
    rng: ChaCha8Rng,
}

impl PkSampler {
    /// `items` pairs a record index with its person id.
    pub fn new(items: &[(usize, u64)], p: usize, k: usize, seed: u64) -> Result<Self> {
        let mut by_id: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for &(i, pid) in items {
            by_id.entry(pid).or_default().push(i);
        }
        if p < 2 || k < 2 {
            return Err(Error::Sampling(format!("PK sampling needs P ≥ 2 and K ≥ 2, got P={p} K={k}")));
        }
        if by_id.len() < p {
            return Err(Error::Sampling(format!(
                "{} training identities cannot fill {p} identities per batch",
                by_id.len()
            )));
        }
        Ok(PkSampler {
            by_id,
            p,
            k,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Identities with fewer than K images, which are topped up by drawing
    /// with replacement.
    pub fn short_identities(&self) -> Vec<u64> {
        self.by_id.iter().filter(|(_, v)| v.len() < self.k).map(|(id, _)| *id).collect()
    }

    pub fn epoch(&mut self) -> Vec<Vec<usize>> {
        let mut chunks: BTreeMap<u64, Vec<Vec<usize>>> = BTreeMap::new();
        for (&pid, idxs) in &self.by_id {
            let mut pool = idxs.clone();
            while pool.len() < self.k {
                let pick = idxs[self.rng.random_range(0..idxs.len())];
                pool.push(pick);
            }
            pool.shuffle(&mut self.rng);
            let mut list: Vec<Vec<usize>> = pool.chunks_exact(self.k).map(|c| c.to_vec()).collect();
            list.reverse();
            chunks.insert(pid, list);
        }
        let mut avail: Vec<u64> = chunks.keys().copied().collect();
        let mut batches = Vec::new();
        while avail.len() >= self.p {
            let picks = index::sample(&mut self.rng, avail.len(), self.p).into_vec();
            let mut batch = Vec::with_capacity(self.p * self.k);
            for &i in &picks {
                batch.extend(chunks.get_mut(&avail[i]).and_then(|c| c.pop()).expect("available identity"));
            }
            avail.retain(|id| !chunks[id].is_empty());
            batches.push(batch);
        }
        batches
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: u64,
    pub losses: LossBreakdown,
}

pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<LogRow>,
    pub warnings: Vec<String>,
    pub steps: u64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,total,id,tri,i2t,div\n");
    for r in rows {
        let l = &r.losses;
        let _ = writeln!(s, "{},{},{},{},{},{}", r.step, l.total, l.id, l.tri, l.i2t, l.div);
    }
    s
}

/// Trains every non-frozen section on the corpus train split. When `out`
/// is given, a checkpoint is written there every `checkpoint_every` epochs
/// and after the last epoch.
pub fn train_stage2(corpus: &Corpus, cfg: &RunConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = corpus.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::invalid("corpus lacks a train split"));
    }
    let class_ids = corpus.train_ids();
    let bank = IdentityTextBank::random(&class_ids, corpus.header.proj_dim as usize, cfg.seed)?;
    let mut model = Model::new(cfg, corpus.dim(), corpus.header.proj_dim as usize, class_ids)?;
    let sizes: Vec<usize> = model.trainable_tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&sizes, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let items: Vec<(usize, u64)> = train.iter().map(|&i| (i, corpus.records[i].person_id)).collect();
    let mut sampler = PkSampler::new(
        &items,
        cfg.ids_per_batch,
        cfg.images_per_id,
        cfg.seed.wrapping_mul(0x2545_f491_4f6c_dd1d) ^ 0x5a3f,
    )?;
    let mut warnings = Vec::new();
    let short = sampler.short_identities();
    if !short.is_empty() {
        warnings.push(format!(
            "{} identities have fewer than {} images and are resampled with replacement",
            short.len(),
            cfg.images_per_id
        ));
    }
    let loss_cfg = LossConfig::from_run(cfg);
    let mut log = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let batches = sampler.epoch();
        if batches.is_empty() {
            return Err(Error::Sampling("epoch produced no batches".into()));
        }
        let nb = batches.len();
        for (bi, batch) in batches.iter().enumerate() {
            let progress = (epoch * nb + bi) as f64 / (cfg.epochs * nb) as f64;
            let lr = cosine_lr(cfg.lr, progress);
            let recs: Vec<&FeatureRecord> = batch.iter().map(|&i| &corpus.records[i]).collect();
            let mut g = Graph::new();
            let (vars, params) = model.bind_trainable(&mut g);
            let out = total_loss(&mut g, &model, &vars, &recs, &bank, &loss_cfg)?;
            if !out.breakdown.total.is_finite() {
                return Err(Error::invalid(format!("non-finite loss at step {step}")));
            }
            g.backward(out.loss)?;
            let grads: Vec<Option<Tensor>> = params.iter().map(|&p| g.grad(p).cloned()).collect();
            drop(g);
            model.embed.update_running(&out.pre_norm);
            adam.step(model.trainable_tensors_mut(), &grads, lr);
            log.push(LogRow {
                step,
                losses: out.breakdown,
            });
            step += 1;
        }
        let last = epoch + 1 == cfg.epochs;
        if let Some(path) = out {
            if last || (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
                checkpoint::save(path, &model, cfg, step)?;
            }
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        warnings,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use rand_distr::{Distribution, Normal};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn uniform_logits_give_log_c() {
        for eps in [0.0, 0.1, 0.5] {
            let mut g = Graph::new();
            let logits = g.constant(Tensor::zeros(&[3, 4]));
            let l = id_loss(&mut g, logits, &[0, 3, 1], eps).unwrap();
            assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_logits_approach_zero() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::from_rows(&[vec![200.0, 0.0, 0.0], vec![0.0, 0.0, 200.0]]).unwrap());
        let l = id_loss(&mut g, logits, &[0, 2], 0.0).unwrap();
        assert!(g.value(l).item() < 1e-80);
    }

    #[test]
    fn label_out_of_range() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            id_loss(&mut g, logits, &[3], 0.1),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn id_loss_gradcheck() {
        let r = check_gradients(&[randn(&[3, 5], 1)], 1e-5, |g, v| id_loss(g, v[0], &[1, 4, 0], 0.1)).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn triplet_identical_embeddings_give_margin() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::full(&[4, 3], 0.7));
        let l = triplet_loss_batch_hard(&mut g, e, &[0, 0, 1, 1], 0.3).unwrap();
        assert!((g.value(l).item() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn triplet_separated_clusters_give_zero() {
        let rows = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![10.0, 0.0], vec![10.0, 0.1]];
        let mut g = Graph::new();
        let e = g.constant(Tensor::from_rows(&rows).unwrap());
        let l = triplet_loss_batch_hard(&mut g, e, &[5, 5, 9, 9], 0.3).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn triplet_rejects_bad_batches() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(triplet_loss_batch_hard(&mut g, e, &[1, 1, 1], 0.3), Err(Error::Sampling(_))));
        assert!(matches!(triplet_loss_batch_hard(&mut g, e, &[1, 2, 3], 0.3), Err(Error::Sampling(_))));
    }

    #[test]
    fn triplet_gradcheck() {
        let r = check_gradients(&[randn(&[6, 3], 2)], 1e-5, |g, v| {
            triplet_loss_batch_hard(g, v[0], &[0, 0, 1, 1, 2, 2], 2.0)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn i2t_limits_and_gradcheck() {
        let ids = [3u64, 8, 11];
        let bank = IdentityTextBank::from_features(ids.to_vec(), Tensor::eye(3)).unwrap();
        let mut g = Graph::new();
        let p = g.constant(Tensor::eye(3));
        let l = i2t_loss(&mut g, p, &bank, &ids, 1e-3, 0.0).unwrap();
        assert!(g.value(l).item() < 1e-100);

        let ortho = IdentityTextBank::from_features(
            ids.to_vec(),
            Tensor::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]])
                .unwrap(),
        )
        .unwrap();
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_rows(&[vec![0.0, 0.0, 0.0, 2.0]]).unwrap());
        let l = i2t_loss(&mut g, p, &ortho, &[8], 0.07, 0.1).unwrap();
        assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-12);

        let mut g = Graph::new();
        let p = g.constant(Tensor::full(&[1, 4], 1.0));
        assert!(i2t_loss(&mut g, p, &ortho, &[99], 0.07, 0.1).is_err());

        let bank = IdentityTextBank::random(&ids, 4, 3).unwrap();
        let r = check_gradients(&[randn(&[2, 4], 4)], 1e-5, |g, v| i2t_loss(g, v[0], &bank, &[3, 11], 0.07, 0.1))
            .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    /// Direct enumeration of every (anchor, positive, negative) distance.
    fn triplet_oracle(x: &[Vec<f64>], labels: &[u64], margin: f64) -> f64 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        let b = x.len();
        let mut total = 0.0;
        for i in 0..b {
            let mut hp = 0.0f64;
            let mut hn = f64::INFINITY;
            for j in 0..b {
                let dij = if i == j { 0.0 } else { d(&x[i], &x[j]) };
                if labels[i] == labels[j] {
                    hp = hp.max(dij);
                } else {
                    hn = hn.min(dij);
                }
            }
            total += (margin + hp - hn).max(0.0);
        }
        total / b as f64
    }

    #[test]
    fn triplet_matches_oracle_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut checked = 0;
        while checked < 200 {
            let b = rng.random_range(2..=8);
            let labels: Vec<u64> = (0..b).map(|_| rng.random_range(0..3)).collect();
            let x: Vec<Vec<f64>> = (0..b).map(|_| (0..3).map(|_| normal.sample(&mut rng)).collect()).collect();
            let mut g = Graph::new();
            let e = g.constant(Tensor::from_rows(&x).unwrap());
            match triplet_loss_batch_hard(&mut g, e, &labels, 0.3) {
                Ok(l) => {
                    assert!((g.value(l).item() - triplet_oracle(&x, &labels, 0.3)).abs() < 1e-12);
                    checked += 1;
                }
                Err(Error::Sampling(_)) => {}
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn adam_zero_lr_is_identity_and_moves_otherwise() {
        let mut p = randn(&[3, 2], 5);
        let before = p.clone();
        let mut adam = Adam::new(&[6], 0.9, 0.999, 1e-8);
        for _ in 0..5 {
            adam.step(vec![&mut p], &[Some(randn(&[3, 2], 6))], 0.0);
        }
        assert_eq!(p, before);
        // First Adam step moves each coordinate by lr against the gradient sign.
        let mut adam = Adam::new(&[6], 0.9, 0.999, 1e-8);
        let grad = randn(&[3, 2], 7);
        adam.step(vec![&mut p], &[Some(grad.clone())], 0.01);
        for ((a, b), gr) in p.data().iter().zip(before.data()).zip(grad.data()) {
            assert!(((b - a) - 0.01 * gr.signum()).abs() < 1e-8);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(2.0, 0.0), 2.0);
        assert!((cosine_lr(2.0, 0.5) - 1.0).abs() < 1e-15);
        assert!(cosine_lr(2.0, 1.0).abs() < 1e-15);
    }

    #[test]
    fn pk_sampler_batches() {
        let items: Vec<(usize, u64)> = (0..40).map(|i| (i, (i / 5) as u64)).collect();
        let mut s = PkSampler::new(&items, 4, 4, 1).unwrap();
        let batches = s.epoch();
        assert_eq!(batches.len(), 2);
        for b in &batches {
            assert_eq!(b.len(), 16);
            let mut ids: BTreeMap<u64, usize> = BTreeMap::new();
            b.iter().for_each(|&i| *ids.entry(items[i].1).or_default() += 1);
            assert_eq!(ids.len(), 4);
            assert!(ids.values().all(|&c| c == 4));
        }
        let again = PkSampler::new(&items, 4, 4, 1).unwrap().epoch();
        assert_eq!(again, batches);
        assert!(PkSampler::new(&items[..10], 4, 4, 1).is_err());

        let short: Vec<(usize, u64)> = (0..6).map(|i| (i, (i / 2) as u64)).collect();
        let mut s = PkSampler::new(&short, 2, 4, 3).unwrap();
        assert_eq!(s.short_identities(), vec![0, 1, 2]);
        assert_eq!(s.epoch().len(), 1);
    }
}
