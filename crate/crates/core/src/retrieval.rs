//! Score-level fusion, similarity and CMC/mAP evaluation under the
//! cross-camera protocol.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, FeatureRecord, Split};
use crate::error::{Error, Result};
use crate::model::{unit, ImageFeatures, Model};
use crate::tensor::{dot, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbeddingRecord {
    pub person_id: u64,
    pub camera_id: u32,
    pub split: Split,
    pub f_ref_unit: Vec<f64>,
    pub cls_unit: Vec<f64>,
    pub fused: Vec<f64>,
}

impl EmbeddingRecord {
    pub fn new(record: &FeatureRecord, features: ImageFeatures, wr: f64, wi: f64) -> Result<Self> {
        let fused = fuse(&features.f_ref_unit, &features.cls_unit, wr, wi)?;
        Ok(EmbeddingRecord {
            person_id: record.person_id,
            camera_id: record.camera_id,
            split: record.split,
            f_ref_unit: features.f_ref_unit,
            cls_unit: features.cls_unit,
            fused,
        })
    }

    pub fn label(&self) -> Label {
        Label {
            person_id: self.person_id,
            camera_id: self.camera_id,
        }
    }
}

/// `ℓ2([√w_r · ref; √w_i · cls])` of unit inputs, so that the dot product of
/// two fused vectors is `(w_r · ref·ref' + w_i · cls·cls') / (w_r + w_i)`.
/// A zero weight yields the other component padded with zeros, unscaled.
pub fn fuse(f_ref_unit: &[f64], cls_unit: &[f64], wr: f64, wi: f64) -> Result<Vec<f64>> {
    if !(wr >= 0.0 && wi >= 0.0) || !(wr.is_finite() && wi.is_finite()) {
        return Err(Error::invalid(format!("fusion weights must be finite and nonnegative, got ({wr}, {wi})")));
    }
    if wr == 0.0 && wi == 0.0 {
        return Err(Error::invalid("both fusion weights zero"));
    }
    let mut out = Vec::with_capacity(f_ref_unit.len() + cls_unit.len());
    if wi == 0.0 {
        out.extend_from_slice(f_ref_unit);
        out.extend(std::iter::repeat_n(0.0, cls_unit.len()));
        return Ok(out);
    }
    if wr == 0.0 {
        out.extend(std::iter::repeat_n(0.0, f_ref_unit.len()));
        out.extend_from_slice(cls_unit);
        return Ok(out);
    }
    let (a, b) = (wr.sqrt(), wi.sqrt());
    out.extend(f_ref_unit.iter().map(|v| a * v));
    out.extend(cls_unit.iter().map(|v| b * v));
    unit(&out)
}

/// Dot products of every query row with every gallery row, `Q × G`.
pub fn similarity_matrix(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<Tensor> {
    let d = queries.first().or(gallery.first()).map_or(0, |v| v.len());
    if queries.iter().chain(gallery).any(|v| v.len() != d) {
        return Err(Error::Shape {
            op: "similarity_matrix",
            lhs: vec![queries.len(), d],
            rhs: vec![gallery.len()],
        });
    }
    let rows: Vec<f64> = queries
        .par_iter()
        .flat_map_iter(|q| gallery.iter().map(move |g| dot(q, g)))
        .collect();
    Tensor::new(vec![queries.len(), gallery.len()], rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub person_id: u64,
    pub camera_id: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `cmc[r-1]` is the fraction of valid queries matched within rank `r`.
    pub cmc: Vec<f64>,
    /// Average precision per query; `None` for queries without a
    /// cross-camera match.
    pub per_query_ap: Vec<Option<f64>>,
    pub num_valid_queries: usize,
}

impl EvalResult {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }
}

/// Average precision and first-match rank (1-based) of one query, or
/// `None` when no cross-camera match exists.
fn query_ap(sims: &[f64], q: Label, gallery: &[Label]) -> Option<(f64, usize)> {
    let mut order: Vec<usize> = (0..gallery.len())
        .filter(|&j| !(gallery[j].person_id == q.person_id && gallery[j].camera_id == q.camera_id))
        .collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first = None;
    for (rank, &j) in order.iter().enumerate() {
        if gallery[j].person_id == q.person_id {
            hits += 1;
            precision_sum += hits as f64 / (rank + 1) as f64;
            first.get_or_insert(rank + 1);
        }
    }
    first.map(|f| (precision_sum / hits as f64, f))
}

/// Same-id same-camera gallery entries are excluded per query. Ties in
/// similarity rank the lower gallery index first.
pub fn evaluate(sim: &Tensor, queries: &[Label], gallery: &[Label], max_rank: usize) -> Result<EvalResult> {
    if sim.shape() != [queries.len(), gallery.len()] {
        return Err(Error::Shape {
            op: "evaluate",
            lhs: sim.shape().to_vec(),
            rhs: vec![queries.len(), gallery.len()],
        });
    }
    let per_query: Vec<Option<(f64, usize)>> = (0..queries.len())
        .into_par_iter()
        .map(|i| query_ap(sim.row(i), queries[i], gallery))
        .collect();
    let valid: Vec<(f64, usize)> = per_query.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::invalid("no valid queries: no query has a cross-camera match in the gallery"));
    }
    let n = valid.len() as f64;
    let map = valid.iter().map(|(ap, _)| ap).sum::<f64>() / n;
    let cmc = (1..=max_rank)
        .map(|r| valid.iter().filter(|(_, f)| *f <= r).count() as f64 / n)
        .collect();
    Ok(EvalResult {
        map,
        cmc,
        per_query_ap: per_query.iter().map(|p| p.map(|(ap, _)| ap)).collect(),
        num_valid_queries: valid.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    ClsOnly,
    RefinedOnly,
    ConcatenatedUnweighted,
    Fused { wr: f64, wi: f64 },
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::ClsOnly => "cls_only",
            Variant::RefinedOnly => "refined_only",
            Variant::ConcatenatedUnweighted => "concatenated_unweighted",
            Variant::Fused { .. } => "fused",
        }
    }

    /// Vector compared under this variant.
    pub fn features(&self, e: &ImageFeatures) -> Result<Vec<f64>> {
        match *self {
            Variant::ClsOnly => Ok(e.cls_unit.clone()),
            Variant::RefinedOnly => Ok(e.f_ref_unit.clone()),
            Variant::ConcatenatedUnweighted => fuse(&e.f_ref_unit, &e.cls_unit, 1.0, 1.0),
            Variant::Fused { wr, wi } => fuse(&e.f_ref_unit, &e.cls_unit, wr, wi),
        }
    }

    pub fn with_weights(name: &str, wr: f64, wi: f64) -> Result<Self> {
        match name {
            "fused" => Ok(Variant::Fused { wr, wi }),
            other => other.parse(),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls_only" => Ok(Variant::ClsOnly),
            "refined_only" => Ok(Variant::RefinedOnly),
            "concatenated_unweighted" => Ok(Variant::ConcatenatedUnweighted),
            "fused" => Ok(Variant::Fused { wr: 2.0, wi: 0.2 }),
            other => Err(Error::invalid(format!(
                "unknown variant `{other}` (expected cls_only, refined_only, concatenated_unweighted or fused)"
            ))),
        }
    }
}

/// Features of a query set and a gallery set ready for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub labels: Vec<Label>,
    pub features: Vec<ImageFeatures>,
}

impl FeatureSet {
    pub fn extract(model: &Model, records: &[&FeatureRecord]) -> Result<Self> {
        Ok(FeatureSet {
            labels: records
                .iter()
                .map(|r| Label {
                    person_id: r.person_id,
                    camera_id: r.camera_id,
                })
                .collect(),
            features: model.embed_records(records)?,
        })
    }

    pub fn vectors(&self, variant: Variant) -> Result<Vec<Vec<f64>>> {
        self.features.iter().map(|f| variant.features(f)).collect()
    }
}

pub fn evaluate_sets(queries: &FeatureSet, gallery: &FeatureSet, variant: Variant, max_rank: usize) -> Result<EvalResult> {
    let sim = similarity_matrix(&queries.vectors(variant)?, &gallery.vectors(variant)?)?;
    evaluate(&sim, &queries.labels, &gallery.labels, max_rank)
}

pub fn split_records(corpus: &Corpus, split: Split) -> Vec<&FeatureRecord> {
    corpus.indices(split).into_iter().map(|i| &corpus.records[i]).collect()
}

/// Evaluates one representation on the corpus query and gallery splits.
pub fn feature_variant_eval(model: &Model, corpus: &Corpus, variant: Variant, max_rank: usize) -> Result<EvalResult> {
    let q = FeatureSet::extract(model, &split_records(corpus, Split::Query))?;
    let g = FeatureSet::extract(model, &split_records(corpus, Split::Gallery))?;
    evaluate_sets(&q, &g, variant, max_rank)
}

/// Weights `(w_r, w_i)` with `w_r + w_i = 1` and `w_r / w_i = ratio`.
/// `ratio = 0` and `ratio = ∞` are the CLS-only and refined-only endpoints.
pub fn ratio_weights(ratio: f64) -> Result<(f64, f64)> {
    if ratio.is_nan() || ratio < 0.0 {
        return Err(Error::invalid(format!("fusion ratio must be nonnegative, got {ratio}")));
    }
    if ratio.is_infinite() {
        return Ok((1.0, 0.0));
    }
    Ok((ratio / (1.0 + ratio), 1.0 / (1.0 + ratio)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FusionSweep {
    pub rows: Vec<(f64, EvalResult)>,
    /// Ratio with the highest mAP; the smallest such ratio on ties.
    pub argmax_ratio: f64,
}

impl FusionSweep {
    pub fn to_csv(&self) -> String {
        let ranks = self.rows.first().map_or(0, |(_, r)| r.cmc.len());
        let mut s = String::from("ratio,mAP");
        for r in 1..=ranks {
            let _ = write!(s, ",rank{r}");
        }
        s.push('\n');
        for (ratio, res) in &self.rows {
            let _ = write!(s, "{ratio},{}", res.map);
            for c in &res.cmc {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn fusion_weight_sweep(
    queries: &FeatureSet,
    gallery: &FeatureSet,
    ratios: &[f64],
    max_rank: usize,
) -> Result<FusionSweep> {
    if ratios.is_empty() {
        return Err(Error::invalid("empty ratio list"));
    }
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let (wr, wi) = ratio_weights(ratio)?;
        rows.push((ratio, evaluate_sets(queries, gallery, Variant::Fused { wr, wi }, max_rank)?));
    }
    let mut best = 0;
    for (i, (ratio, r)) in rows.iter().enumerate() {
        let (best_ratio, b) = &rows[best];
        if r.map > b.map || (r.map == b.map && ratio < best_ratio) {
            best = i;
        }
    }
    Ok(FusionSweep {
        argmax_ratio: rows[best].0,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lab(p: u64, c: u32) -> Label {
        Label {
            person_id: p,
            camera_id: c,
        }
    }

    #[test]
    fn fused_similarity_closed_form() {
        let a = fuse(&[1.0, 0.0], &[1.0, 0.0], 2.0, 0.2).unwrap();
        let b = fuse(&[1.0, 0.0], &[0.0, 1.0], 2.0, 0.2).unwrap();
        assert!((dot(&a, &b) - 2.0 / 2.2).abs() < 1e-12);
        assert!((dot(&a, &b) - 0.9091).abs() < 1e-4);
        assert!(fuse(&[1.0], &[1.0], 0.0, 0.0).unwrap_err().to_string().contains("both fusion weights zero"));
    }

    #[test]
    fn zero_weight_reproduces_component_exactly() {
        let r1 = [0.6, 0.8];
        let r2 = [0.28, 0.96];
        let c1 = [1.0, 0.0];
        let c2 = [0.0, 1.0];
        let a = fuse(&r1, &c1, 0.7, 0.0).unwrap();
        let b = fuse(&r2, &c2, 0.7, 0.0).unwrap();
        assert_eq!(dot(&a, &b), dot(&r1, &r2));
    }

    #[test]
    fn similarity_matrix_matches_loop() {
        let q = vec![vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.25]];
        let g = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, -2.0], vec![-1.5, 0.5]];
        let s = similarity_matrix(&q, &g).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert!((s.get(i, j) - (q[i][0] * g[j][0] + q[i][1] * g[j][1])).abs() < 1e-12);
            }
        }
        assert!(similarity_matrix(&q, &[vec![1.0]]).is_err());
    }

    #[test]
    fn ap_at_ranks_one_and_three() {
        let gallery = vec![lab(1, 1), lab(2, 1), lab(1, 2), lab(3, 1), lab(4, 1)];
        let sim = Tensor::matrix(1, 5, vec![0.9, 0.8, 0.7, 0.6, 0.5]).unwrap();
        let r = evaluate(&sim, &[lab(1, 0)], &gallery, 5).unwrap();
        assert!((r.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(r.cmc[0], 1.0);
    }

    #[test]
    fn same_camera_only_match_is_excluded() {
        let gallery = vec![lab(1, 0), lab(2, 1), lab(3, 1)];
        let sim = Tensor::matrix(2, 3, vec![0.9, 0.1, 0.2, 0.1, 0.9, 0.3]).unwrap();
        let r = evaluate(&sim, &[lab(1, 0), lab(2, 0)], &gallery, 3).unwrap();
        assert_eq!(r.num_valid_queries, 1);
        assert_eq!(r.per_query_ap[0], None);
        assert_eq!(r.map, 1.0);
        assert!(evaluate(&Tensor::matrix(1, 3, vec![0.0; 3]).unwrap(), &[lab(1, 0)], &gallery, 3).is_err());
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let gallery = vec![lab(9, 1), lab(1, 1)];
        let sim = Tensor::matrix(1, 2, vec![0.5, 0.5]).unwrap();
        let r = evaluate(&sim, &[lab(1, 0)], &gallery, 2).unwrap();
        assert_eq!(r.cmc, vec![0.0, 1.0]);
        assert_eq!(r.map, 0.5);
    }

    #[test]
    fn variant_parsing() {
        assert_eq!("cls_only".parse::<Variant>().unwrap(), Variant::ClsOnly);
        assert_eq!(Variant::with_weights("fused", 1.0, 3.0).unwrap(), Variant::Fused { wr: 1.0, wi: 3.0 });
        assert!("median".parse::<Variant>().is_err());
    }

    #[test]
    fn ratio_weight_endpoints() {
        assert_eq!(ratio_weights(0.0).unwrap(), (0.0, 1.0));
        assert_eq!(ratio_weights(f64::INFINITY).unwrap(), (1.0, 0.0));
        let (wr, wi) = ratio_weights(10.0).unwrap();
        assert!((wr / wi - 10.0).abs() < 1e-12 && (wr + wi - 1.0).abs() < 1e-15);
        assert!(ratio_weights(-1.0).is_err());
    }
}
