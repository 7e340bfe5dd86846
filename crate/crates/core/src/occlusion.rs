//! Token-level occlusion of query records and the coverage-sweep harness.
//!
//! Occlusion replaces patch tokens in place: masking kinds fill the region
//! with noise, zeros or a fixed token, and the distractor kind pastes the
//! same-position tokens of a record from a disjoint identity pool. The CLS
//! vector of an occluded record is recomputed as the mean of its tokens.
//! Gallery records are never touched.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, FeatureRecord, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::retrieval::{evaluate_sets, split_records, FeatureSet, Variant};
use crate::tensor::Tensor;

pub const MAX_COVERAGE: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcclusionKind {
    LowerHalf,
    UpperHalf,
    RandomRect,
    Distractor,
}

impl OcclusionKind {
    pub fn name(self) -> &'static str {
        match self {
            OcclusionKind::LowerHalf => "lower_half",
            OcclusionKind::UpperHalf => "upper_half",
            OcclusionKind::RandomRect => "random_rect",
            OcclusionKind::Distractor => "distractor",
        }
    }

    fn code(self) -> u64 {
        self as u64
    }
}

impl FromStr for OcclusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lower_half" => Ok(OcclusionKind::LowerHalf),
            "upper_half" => Ok(OcclusionKind::UpperHalf),
            "random_rect" => Ok(OcclusionKind::RandomRect),
            "distractor" => Ok(OcclusionKind::Distractor),
            other => Err(Error::invalid(format!("unknown occlusion kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    Zeros,
    /// Gaussian noise at the corpus noise scale.
    Noise,
    /// A fixed vector, typically the mean training token.
    LearnedToken,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSpec {
    pub kind: OcclusionKind,
    pub coverage: f64,
    pub seed: u64,
    pub fill: Fill,
}

/// Fill material and the distractor pool shared by every query.
#[derive(Clone, Debug, Default)]
pub struct OcclusionContext<'a> {
    pub noise_scale: f64,
    pub learned_token: Option<Vec<f64>>,
    pub distractors: Vec<&'a FeatureRecord>,
    /// Maps an occluded record's token mean to its CLS; the token mean
    /// itself when absent.
    pub cls_head: Option<ClsHead>,
}

impl<'a> OcclusionContext<'a> {
    /// Train-split records as distractors, the mean train token as the
    /// learned fill, and a CLS head fitted on the train split.
    pub fn from_corpus(corpus: &'a Corpus, noise_scale: f64) -> Self {
        let distractors = split_records(corpus, Split::Train);
        OcclusionContext {
            noise_scale,
            learned_token: mean_token(&distractors),
            cls_head: ClsHead::fit(&distractors),
            distractors,
        }
    }

    /// Draws distractors from a separate pool instead of the train split.
    pub fn with_pool(mut self, pool: &'a Corpus) -> Self {
        self.distractors = pool.records.iter().collect();
        self
    }
}

/// Affine map from a record's token mean to its CLS.
#[derive(Clone, Debug, PartialEq)]
pub struct ClsHead {
    /// `dim × dim`, applied as `cls = weight · mean + bias`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl ClsHead {
    /// Least-squares fit over `records`, with a small ridge term. `None`
    /// when there are fewer records than parameters per output.
    pub fn fit(records: &[&FeatureRecord]) -> Option<ClsHead> {
        let d = records.first()?.cls.len();
        if records.len() <= d + 1 {
            return None;
        }
        let means: Vec<Vec<f64>> = records.iter().map(|r| token_mean(&r.tokens)).collect();
        let x = DMatrix::from_fn(records.len(), d + 1, |i, j| if j == d { 1.0 } else { means[i][j] });
        let y = DMatrix::from_fn(records.len(), d, |i, j| records[i].cls[j]);
        let mut gram = x.transpose() * &x;
        let ridge = 1e-9 * gram.trace() / (d + 1) as f64;
        for i in 0..=d {
            gram[(i, i)] += ridge;
        }
        let coef = gram.cholesky()?.solve(&(x.transpose() * y));
        let weight = Tensor::matrix(d, d, (0..d * d).map(|i| coef[(i % d, i / d)]).collect()).ok()?;
        Some(ClsHead {
            weight,
            bias: (0..d).map(|j| coef[(d, j)]).collect(),
        })
    }

    pub fn apply(&self, mean: &[f64]) -> Vec<f64> {
        (0..self.bias.len())
            .map(|j| self.bias[j] + crate::tensor::dot(self.weight.row(j), mean))
            .collect()
    }
}

fn token_mean(tokens: &Tensor) -> Vec<f64> {
    let d = tokens.cols();
    let mut mean = vec![0.0; d];
    for row in tokens.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    mean.iter_mut().for_each(|a| *a /= tokens.rows() as f64);
    mean
}

pub fn mean_token(records: &[&FeatureRecord]) -> Option<Vec<f64>> {
    let first = records.first()?;
    let d = first.tokens.cols();
    let mut acc = vec![0.0; d];
    let mut count = 0usize;
    for r in records {
        for row in r.tokens.data().chunks(d) {
            acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            count += 1;
        }
    }
    Some(acc.into_iter().map(|a| a / count as f64).collect())
}

/// Noise scale recorded in a synthetic corpus' sidecar, otherwise the mean
/// per-feature standard deviation of train tokens around their grid-position
/// means.
pub fn corpus_noise_scale(corpus: &Corpus, meta: Option<&crate::corpus::CorpusMeta>) -> f64 {
    if let Some(s) = meta.and_then(|m| m.synth.as_ref()) {
        return s.noise_scale;
    }
    let recs = split_records(corpus, Split::Train);
    let (n, d) = (corpus.header.n_patches as usize, corpus.dim());
    if recs.len() < 2 || n * d == 0 {
        return 1.0;
    }
    let mut mean = vec![0.0; n * d];
    for r in &recs {
        mean.iter_mut().zip(r.tokens.data()).for_each(|(m, v)| *m += v / recs.len() as f64);
    }
    let mut var = 0.0;
    for r in &recs {
        var += r.tokens.data().iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>();
    }
    (var / ((recs.len() - 1) * n * d) as f64).sqrt()
}

fn rows_needed(coverage: f64, extent: usize) -> usize {
    ((coverage * extent as f64 - 1e-9).ceil().max(0.0) as usize).min(extent)
}

/// `(height, width)` of every rectangle whose area is nearest to the target
/// with aspect ratio (height / width) in `[0.5, 2]`; if none fits the grid,
/// any aspect ratio is allowed.
fn rect_candidates(target: f64, h: usize, w: usize) -> Vec<(usize, usize)> {
    let pick = |constrained: bool| {
        let mut best: Vec<(usize, usize)> = Vec::new();
        let mut best_gap = f64::INFINITY;
        for rh in 1..=h {
            for rw in 1..=w {
                let aspect = rh as f64 / rw as f64;
                if constrained && !(0.5..=2.0).contains(&aspect) {
                    continue;
                }
                let gap = ((rh * rw) as f64 - target).abs();
                if gap < best_gap - 1e-9 {
                    best_gap = gap;
                    best.clear();
                }
                if (gap - best_gap).abs() <= 1e-9 {
                    best.push((rh, rw));
                }
            }
        }
        best
    };
    let c = pick(true);
    if c.is_empty() {
        pick(false)
    } else {
        c
    }
}

/// Grid positions (row-major indices) replaced by `spec` and, for the
/// distractor kind, the index of the source record in the pool.
pub fn occlusion_geometry(
    spec: &OcclusionSpec,
    grid: (usize, usize),
    pool_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Option<usize>)> {
    let (h, w) = grid;
    let rows = |r0: usize, r1: usize| (r0 * w..r1 * w).collect::<Vec<_>>();
    let cols = |c0: usize, c1: usize| {
        (0..h)
            .flat_map(|r| (c0..c1).map(move |c| r * w + c))
            .collect::<Vec<_>>()
    };
    Ok(match spec.kind {
        OcclusionKind::LowerHalf => (rows(h - rows_needed(spec.coverage, h), h), None),
        OcclusionKind::UpperHalf => (rows(0, rows_needed(spec.coverage, h)), None),
        OcclusionKind::RandomRect => {
            let cands = rect_candidates(spec.coverage * (h * w) as f64, h, w);
            let (rh, rw) = cands[rng.random_range(0..cands.len())];
            let top = rng.random_range(0..=h - rh);
            let left = rng.random_range(0..=w - rw);
            let pos = (top..top + rh)
                .flat_map(|r| (left..left + rw).map(move |c| r * w + c))
                .collect();
            (pos, None)
        }
        OcclusionKind::Distractor => {
            if pool_len == 0 {
                return Err(Error::invalid("distractor occlusion needs a nonempty disjoint source pool"));
            }
            let source = rng.random_range(0..pool_len);
            let pos = match rng.random_range(0..3u8) {
                0 => cols(0, rows_needed(spec.coverage, w)),
                1 => cols(w - rows_needed(spec.coverage, w), w),
                _ => rows(h - rows_needed(spec.coverage, h), h),
            };
            (pos, Some(source))
        }
    })
}

pub fn apply_occlusion(
    record: &FeatureRecord,
    spec: &OcclusionSpec,
    grid: (usize, usize),
    ctx: &OcclusionContext,
) -> Result<FeatureRecord> {
    let (h, w) = grid;
    let (n, d) = (record.tokens.rows(), record.tokens.cols());
    if h * w != n {
        return Err(Error::Shape {
            op: "apply_occlusion",
            lhs: vec![h, w],
            rhs: vec![n],
        });
    }
    if !(0.0..=MAX_COVERAGE).contains(&spec.coverage) {
        return Err(Error::invalid(format!("coverage {} outside [0, {MAX_COVERAGE}]", spec.coverage)));
    }
    if spec.kind == OcclusionKind::Distractor && ctx.distractors.is_empty() {
        return Err(Error::invalid("distractor occlusion needs a nonempty disjoint source pool"));
    }
    if spec.coverage == 0.0 {
        return Ok(record.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (positions, source) = occlusion_geometry(spec, grid, ctx.distractors.len(), &mut rng)?;
    let mut out = record.clone();
    let tokens = out.tokens.data_mut();
    match source {
        Some(s) => {
            let src = ctx.distractors[s];
            if src.person_id == record.person_id {
                return Err(Error::invalid("distractor pool shares an identity with the query"));
            }
            if src.tokens.shape() != record.tokens.shape() {
                return Err(Error::Shape {
                    op: "distractor",
                    lhs: src.tokens.shape().to_vec(),
                    rhs: record.tokens.shape().to_vec(),
                });
            }
            for &p in &positions {
                tokens[p * d..(p + 1) * d].copy_from_slice(src.tokens.row(p));
            }
        }
        None => match spec.fill {
            Fill::Zeros => positions.iter().for_each(|&p| tokens[p * d..(p + 1) * d].fill(0.0)),
            Fill::Noise => {
                let normal = Normal::new(0.0, ctx.noise_scale)
                    .map_err(|e| Error::invalid(format!("noise scale {}: {e}", ctx.noise_scale)))?;
                for &p in &positions {
                    tokens[p * d..(p + 1) * d]
                        .iter_mut()
                        .for_each(|v| *v = normal.sample(&mut rng));
                }
            }
            Fill::LearnedToken => {
                let token = ctx
                    .learned_token
                    .as_ref()
                    .ok_or_else(|| Error::invalid("learned-token fill needs a fill token"))?;
                if token.len() != d {
                    return Err(Error::Shape {
                        op: "learned_token",
                        lhs: vec![token.len()],
                        rhs: vec![d],
                    });
                }
                positions.iter().for_each(|&p| tokens[p * d..(p + 1) * d].copy_from_slice(token));
            }
        },
    }
    let mean = token_mean(&out.tokens);
    out.cls = match &ctx.cls_head {
        Some(head) => head.apply(&mean),
        None => mean,
    };
    Ok(out)
}

/// Seed of one query's occlusion, derived from the sweep seed, the kind and
/// the query position.
pub fn query_seed(seed: u64, kind: OcclusionKind, query_index: usize) -> u64 {
    let mut z = seed ^ kind.code().wrapping_mul(0xd1b5_4a32_d192_ed03) ^ (query_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Occludes every record with its own [`query_seed`] stream.
pub fn occlude_all(
    records: &[&FeatureRecord],
    kind: OcclusionKind,
    coverage: f64,
    seed: u64,
    fill: Fill,
    grid: (usize, usize),
    ctx: &OcclusionContext,
) -> Result<Vec<FeatureRecord>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let spec = OcclusionSpec {
                kind,
                coverage,
                seed: query_seed(seed, kind, i),
                fill,
            };
            apply_occlusion(r, &spec, grid, ctx)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub kind: OcclusionKind,
    pub coverage: f64,
    pub seed: u64,
    pub variant: Variant,
    pub map: f64,
    pub rank1: f64,
    /// Points over `cls_only` at the same cell.
    pub advantage_map: f64,
    pub advantage_r1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepSummary {
    pub kind: OcclusionKind,
    pub coverage: f64,
    pub variant: Variant,
    pub mean: [f64; 4],
    pub sd: [f64; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub summary: Vec<SweepSummary>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl SweepResult {
    fn summarize(cells: &[SweepCell]) -> Vec<SweepSummary> {
        let mut groups: Vec<((OcclusionKind, u64, Variant), Vec<&SweepCell>)> = Vec::new();
        for c in cells {
            let key = (c.kind, c.coverage.to_bits(), c.variant);
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, v)) => v.push(c),
                None => groups.push((key, vec![c])),
            }
        }
        groups
            .into_iter()
            .map(|((kind, cov, variant), cs)| {
                let stat = |f: fn(&SweepCell) -> f64| mean_sd(&cs.iter().map(|c| f(c)).collect::<Vec<_>>());
                let stats = [
                    stat(|c| c.map),
                    stat(|c| c.rank1),
                    stat(|c| c.advantage_map),
                    stat(|c| c.advantage_r1),
                ];
                SweepSummary {
                    kind,
                    coverage: f64::from_bits(cov),
                    variant,
                    mean: stats.map(|s| s.0),
                    sd: stats.map(|s| s.1),
                }
            })
            .collect()
    }

    /// `(coverage, mean advantage)` for one kind and variant, in sweep order.
    pub fn advantage_curve(&self, kind: OcclusionKind, variant: &str, rank1: bool) -> Vec<(f64, f64)> {
        self.summary
            .iter()
            .filter(|s| s.kind == kind && s.variant.name() == variant)
            .map(|s| (s.coverage, if rank1 { s.mean[3] } else { s.mean[2] }))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,coverage,seed,variant,mAP,rank1,advantage_mAP,advantage_r1\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                c.kind.name(),
                c.coverage,
                c.seed,
                c.variant.name(),
                c.map,
                c.rank1,
                c.advantage_map,
                c.advantage_r1
            );
        }
        for sm in &self.summary {
            for (label, v) in [("mean", sm.mean), ("sd", sm.sd)] {
                let _ = writeln!(
                    s,
                    "{},{},{label},{},{},{},{},{}",
                    sm.kind.name(),
                    sm.coverage,
                    sm.variant.name(),
                    v[0],
                    v[1],
                    v[2],
                    v[3]
                );
            }
        }
        s
    }
}

pub struct SweepPlan {
    pub kinds: Vec<OcclusionKind>,
    pub coverages: Vec<f64>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub fill: Fill,
    pub max_rank: usize,
}

/// Occludes the query split for every (kind, coverage, seed) and evaluates
/// every variant against the untouched gallery.
pub fn sweep(model: &Model, corpus: &Corpus, ctx: &OcclusionContext, plan: &SweepPlan) -> Result<SweepResult> {
    if plan.seeds.is_empty() || plan.coverages.is_empty() || plan.kinds.is_empty() {
        return Err(Error::invalid("sweep needs at least one kind, coverage and seed"));
    }
    let queries = split_records(corpus, Split::Query);
    let gallery = FeatureSet::extract(model, &split_records(corpus, Split::Gallery))?;
    let query_ids: std::collections::BTreeSet<u64> = queries.iter().map(|r| r.person_id).collect();
    if ctx.distractors.iter().any(|r| query_ids.contains(&r.person_id)) {
        return Err(Error::invalid("distractor pool overlaps query identities"));
    }
    let grid = corpus.grid();
    let clean = FeatureSet::extract(model, &queries)?;
    let mut cells = Vec::new();
    for &kind in &plan.kinds {
        for &coverage in &plan.coverages {
            for &seed in &plan.seeds {
                let qset = if coverage == 0.0 {
                    clean.clone()
                } else {
                    let occluded = occlude_all(&queries, kind, coverage, seed, plan.fill, grid, ctx)?;
                    let refs: Vec<&FeatureRecord> = occluded.iter().collect();
                    FeatureSet::extract(model, &refs)?
                };
                let base = evaluate_sets(&qset, &gallery, Variant::ClsOnly, plan.max_rank)?;
                for &variant in &plan.variants {
                    let r = if variant == Variant::ClsOnly {
                        base.clone()
                    } else {
                        evaluate_sets(&qset, &gallery, variant, plan.max_rank)?
                    };
                    cells.push(SweepCell {
                        kind,
                        coverage,
                        seed,
                        variant,
                        map: r.map,
                        rank1: r.rank1(),
                        advantage_map: 100.0 * (r.map - base.map),
                        advantage_r1: 100.0 * (r.rank1() - base.rank1()),
                    });
                }
            }
        }
    }
    let summary = SweepResult::summarize(&cells);
    Ok(SweepResult { cells, summary })
}

/// Lowest coverage with a strictly positive advantage.
pub fn crossover(curve: &[(f64, f64)]) -> Option<f64> {
    curve.iter().find(|(_, a)| *a > 0.0).map(|(c, _)| *c)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CrossoverReport {
    pub masking: Option<f64>,
    pub distractor: Option<f64>,
    /// Distractor crossover at or above the masking crossover, counting
    /// "no crossover" as above every coverage.
    pub distractor_not_earlier: bool,
}

impl CrossoverReport {
    pub fn describe(c: Option<f64>) -> String {
        c.map_or_else(|| "no crossover".to_string(), |v| v.to_string())
    }
}

pub fn crossover_report(masking: &[(f64, f64)], distractor: &[(f64, f64)]) -> Result<CrossoverReport> {
    let grid = |c: &[(f64, f64)]| c.iter().map(|p| p.0.to_bits()).collect::<Vec<_>>();
    if grid(masking) != grid(distractor) {
        return Err(Error::invalid("crossover comparison needs identical coverage grids"));
    }
    let (m, d) = (crossover(masking), crossover(distractor));
    let key = |c: Option<f64>| c.unwrap_or(f64::INFINITY);
    Ok(CrossoverReport {
        masking: m,
        distractor: d,
        distractor_not_earlier: key(d) >= key(m),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn record(pid: u64, h: usize, w: usize, d: usize, seed: u64) -> FeatureRecord {
        let tokens = Tensor::randn(&[h * w, d], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        FeatureRecord {
            person_id: pid,
            camera_id: 0,
            split: Split::Query,
            cls: vec![0.0; d],
            proj: vec![0.0; 2],
            tokens,
        }
    }

    fn spec(kind: OcclusionKind, coverage: f64) -> OcclusionSpec {
        OcclusionSpec {
            kind,
            coverage,
            seed: 5,
            fill: Fill::Noise,
        }
    }

    fn changed_rows(a: &FeatureRecord, b: &FeatureRecord) -> Vec<usize> {
        (0..a.tokens.rows()).filter(|&i| a.tokens.row(i) != b.tokens.row(i)).collect()
    }

    #[test]
    fn lower_half_replaces_bottom_rows() {
        let r = record(1, 16, 8, 4, 1);
        let ctx = OcclusionContext {
            noise_scale: 1.0,
            ..Default::default()
        };
        let o = apply_occlusion(&r, &spec(OcclusionKind::LowerHalf, 0.5), (16, 8), &ctx).unwrap();
        assert_eq!(changed_rows(&r, &o), (64..128).collect::<Vec<_>>());
        let o = apply_occlusion(&r, &spec(OcclusionKind::UpperHalf, 0.3), (16, 8), &ctx).unwrap();
        assert_eq!(changed_rows(&r, &o), (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn zero_coverage_is_identity() {
        let r = record(1, 4, 2, 3, 1);
        let ctx = OcclusionContext::default();
        for kind in [OcclusionKind::LowerHalf, OcclusionKind::RandomRect] {
            assert_eq!(apply_occlusion(&r, &spec(kind, 0.0), (4, 2), &ctx).unwrap(), r);
        }
    }

    #[test]
    fn cls_head_recovers_affine_map() {
        let (w, b) = (vec![0.5, -1.0, 0.0, 2.0, 0.25, 1.0, 0.0, 0.0, 3.0], [0.1, -0.2, 0.3]);
        let recs: Vec<FeatureRecord> = (0..12)
            .map(|i| {
                let mut r = record(i, 2, 2, 3, i + 10);
                let m = token_mean(&r.tokens);
                r.cls = (0..3).map(|j| b[j] + (0..3).map(|k| w[j * 3 + k] * m[k]).sum::<f64>()).collect();
                r
            })
            .collect();
        let refs: Vec<&FeatureRecord> = recs.iter().collect();
        let head = ClsHead::fit(&refs).unwrap();
        head.weight.data().iter().zip(&w).for_each(|(p, q)| assert!((p - q).abs() < 1e-6));
        head.bias.iter().zip(&b).for_each(|(p, q)| assert!((p - q).abs() < 1e-6));
        assert!(ClsHead::fit(&refs[..4]).is_none());

        let ctx = OcclusionContext {
            cls_head: Some(head),
            ..Default::default()
        };
        let mut s = spec(OcclusionKind::LowerHalf, 0.5);
        s.fill = Fill::Zeros;
        let o = apply_occlusion(&recs[0], &s, (2, 2), &ctx).unwrap();
        let m = token_mean(&o.tokens);
        for j in 0..3 {
            let expect = b[j] + (0..3).map(|k| w[j * 3 + k] * m[k]).sum::<f64>();
            assert!((o.cls[j] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn cls_is_token_mean() {
        let r = record(1, 4, 2, 3, 1);
        let ctx = OcclusionContext::default();
        let mut s = spec(OcclusionKind::LowerHalf, 0.5);
        s.fill = Fill::Zeros;
        let o = apply_occlusion(&r, &s, (4, 2), &ctx).unwrap();
        for k in 0..3 {
            let m: f64 = (0..4).map(|i| r.tokens.get(i, k)).sum::<f64>() / 8.0;
            assert!((o.cls[k] - m).abs() < 1e-12);
        }
    }

    #[test]
    fn distractor_copies_source_positions() {
        let q = record(1, 16, 8, 4, 1);
        let pool = [record(7, 16, 8, 4, 2), record(8, 16, 8, 4, 3)];
        let ctx = OcclusionContext {
            noise_scale: 1.0,
            learned_token: None,
            distractors: pool.iter().collect(),
            cls_head: None,
        };
        let s = spec(OcclusionKind::Distractor, 0.5);
        let o = apply_occlusion(&q, &s, (16, 8), &ctx).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        let (pos, src) = occlusion_geometry(&s, (16, 8), 2, &mut rng).unwrap();
        assert_eq!(pos.len(), 64);
        for p in 0..128 {
            let expect = if pos.contains(&p) { pool[src.unwrap()].tokens.row(p) } else { q.tokens.row(p) };
            assert_eq!(o.tokens.row(p), expect);
        }
        assert_eq!(apply_occlusion(&q, &s, (16, 8), &ctx).unwrap(), o);
        assert!(apply_occlusion(&q, &s, (16, 8), &OcclusionContext::default()).is_err());
    }

    #[test]
    fn random_rect_area_and_aspect() {
        let r = record(1, 16, 8, 2, 1);
        let ctx = OcclusionContext {
            noise_scale: 1.0,
            ..Default::default()
        };
        for (i, cov) in [0.1, 0.3, 0.5, 0.8].into_iter().enumerate() {
            let mut s = spec(OcclusionKind::RandomRect, cov);
            s.seed = i as u64;
            let o = apply_occlusion(&r, &s, (16, 8), &ctx).unwrap();
            let n = changed_rows(&r, &o).len();
            let best = rect_candidates(cov * 128.0, 16, 8)[0];
            assert_eq!(n, best.0 * best.1);
            assert!(((n as f64) - cov * 128.0).abs() <= 8.0);
        }
    }

    #[test]
    fn grid_mismatch_rejected() {
        let r = record(1, 4, 2, 3, 1);
        assert!(apply_occlusion(&r, &spec(OcclusionKind::LowerHalf, 0.5), (3, 3), &OcclusionContext::default()).is_err());
    }

    #[test]
    fn crossover_examples() {
        let curve = [(0.0, -1.0), (0.3, 2.0), (0.6, 5.0)];
        assert_eq!(crossover(&curve), Some(0.3));
        let r = crossover_report(&curve, &curve).unwrap();
        assert_eq!(r.masking, r.distractor);
        assert!(r.distractor_not_earlier);
        let never = [(0.0, -1.0), (0.3, 0.0), (0.6, -2.0)];
        assert_eq!(CrossoverReport::describe(crossover(&never)), "no crossover");
        assert!(crossover_report(&curve, &never).unwrap().distractor_not_earlier);
        assert!(!crossover_report(&never, &curve).unwrap().distractor_not_earlier);
        assert!(crossover_report(&curve, &curve[..2]).is_err());
    }
}
