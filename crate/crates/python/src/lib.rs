use std::path::PathBuf;

use pyo3::exceptions::{PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

use anchor_reid::checkpoint;
use anchor_reid::config::RunConfig;
use anchor_reid::corpus::{self, SynthConfig};
use anchor_reid::gradsuite;
use anchor_reid::model;
use anchor_reid::objective::train_stage2;
use anchor_reid::occlusion::{corpus_noise_scale, sweep, Fill, OcclusionContext, OcclusionKind, SweepPlan};
use anchor_reid::refine::count_attention_flops;
use anchor_reid::retrieval::{self, feature_variant_eval, Variant};

fn err(e: anchor_reid::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

fn json<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &serde_json::to_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?)
}

fn run_config(toml: Option<&str>) -> PyResult<RunConfig> {
    toml.map_or_else(|| Ok(RunConfig::default()), |t| RunConfig::from_toml(t).map_err(err))
}

/// A patch-token corpus.
#[pyclass(name = "Corpus", module = "anchor_reid")]
pub struct PyCorpus {
    inner: corpus::Corpus,
    noise_scale: Option<f64>,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let inner = corpus::read_corpus(&path).map_err(err)?;
        let meta = corpus::read_sidecar(&path).map_err(err)?;
        let noise_scale = Some(corpus_noise_scale(&inner, meta.as_ref()));
        Ok(PyCorpus { inner, noise_scale })
    }

    /// Synthetic corpus and its distractor pool from a synthetic-corpus TOML
    /// document (empty for the reference corpus).
    #[staticmethod]
    #[pyo3(signature = (toml = ""))]
    fn synthetic(toml: &str) -> PyResult<(Self, Self)> {
        let cfg = SynthConfig::from_toml(toml).map_err(err)?;
        let (main, pool) = corpus::generate_synthetic_with_pool(&cfg).map_err(err)?;
        Ok((
            PyCorpus { inner: main, noise_scale: Some(cfg.noise_scale) },
            PyCorpus { inner: pool, noise_scale: Some(cfg.noise_scale) },
        ))
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        corpus::write_corpus(&path, &self.inner).map_err(err)
    }

    fn validate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json(py, &corpus::validate_corpus(&self.inner))
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }

    #[getter]
    fn grid(&self) -> (usize, usize) {
        self.inner.grid()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// `(person_id, camera_id, split)` of one record.
    fn label(&self, index: usize) -> PyResult<(u64, u32, String)> {
        let r = self
            .inner
            .records
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("record {index} out of range")))?;
        Ok((r.person_id, r.camera_id, format!("{:?}", r.split).to_lowercase()))
    }

    fn tokens(&self, index: usize) -> PyResult<Vec<Vec<f64>>> {
        let r = self
            .inner
            .records
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("record {index} out of range")))?;
        Ok((0..r.tokens.rows()).map(|i| r.tokens.row(i).to_vec()).collect())
    }
}

/// A trained refinement model with its run configuration.
#[pyclass(name = "Model", module = "anchor_reid")]
pub struct PyModel {
    inner: model::Model,
    config: RunConfig,
    steps: u64,
}

#[pymethods]
impl PyModel {
    /// Trains on the corpus train split. Returns the model and the per-step
    /// loss log.
    #[staticmethod]
    #[pyo3(signature = (corpus, config = None))]
    fn train<'py>(py: Python<'py>, corpus: &PyCorpus, config: Option<&str>) -> PyResult<(Self, Bound<'py, PyAny>)> {
        let cfg = run_config(config)?;
        let out = py.detach(|| train_stage2(&corpus.inner, &cfg, None)).map_err(err)?;
        let log = json(py, &out.log)?;
        Ok((PyModel { inner: out.model, config: cfg, steps: out.steps }, log))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, manifest) = checkpoint::load(&path).map_err(err)?;
        Ok(PyModel { inner, config: manifest.config, steps: manifest.steps })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(&path, &self.inner, &self.config, self.steps).map_err(err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json(py, &self.config)
    }

    /// Query-vs-gallery retrieval metrics for one variant.
    #[pyo3(signature = (corpus, variant = "fused", wr = None, wi = None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        corpus: &PyCorpus,
        variant: &str,
        wr: Option<f64>,
        wi: Option<f64>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let v = Variant::with_weights(
            variant,
            wr.unwrap_or(self.config.fusion_wr),
            wi.unwrap_or(self.config.fusion_wi),
        )
        .map_err(err)?;
        let r = py
            .detach(|| feature_variant_eval(&self.inner, &corpus.inner, v, self.config.cmc_ranks))
            .map_err(err)?;
        json(py, &r)
    }

    /// Unit-norm `(f_ref, cls)` retrieval features of every record.
    fn features(&self, corpus: &PyCorpus) -> PyResult<Vec<(Vec<f64>, Vec<f64>)>> {
        let recs: Vec<_> = corpus.inner.records.iter().collect();
        let feats = self.inner.embed_records(&recs).map_err(err)?;
        Ok(feats.into_iter().map(|f| (f.f_ref_unit, f.cls_unit)).collect())
    }

    /// Pooled patch weights and head-mean attention rows for one record.
    fn attention<'py>(&self, py: Python<'py>, corpus: &PyCorpus, index: usize) -> PyResult<Bound<'py, PyAny>> {
        let rec = corpus
            .inner
            .records
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("record {index} out of range")))?;
        let anchors = self.inner.anchors.anchors().map_err(err)?;
        let out = self.inner.refine_record(&anchors, rec).map_err(err)?;
        let rows: Vec<Vec<f64>> = (0..out.attention.rows()).map(|i| out.attention.row(i).to_vec()).collect();
        json(
            py,
            &serde_json::json!({
                "pooled_weights": out.pooled_weights.data(),
                "attention": rows,
            }),
        )
    }

    /// Occlusion sweep; returns the CSV table.
    #[pyo3(signature = (corpus, kinds, coverages, seeds = vec![0], variants = vec!["cls_only".to_string(), "refined_only".to_string(), "fused".to_string()], fill = "noise", distractors = None))]
    #[allow(clippy::too_many_arguments)]
    fn sweep_occlusion(
        &self,
        py: Python<'_>,
        corpus: &PyCorpus,
        kinds: Vec<String>,
        coverages: Vec<f64>,
        seeds: Vec<u64>,
        variants: Vec<String>,
        fill: &str,
        distractors: Option<&PyCorpus>,
    ) -> PyResult<String> {
        let fill: Fill = serde_json::from_value(Value::String(fill.to_string()))
            .map_err(|_| PyValueError::new_err(format!("unknown fill `{fill}`")))?;
        let plan = SweepPlan {
            kinds: kinds
                .iter()
                .map(|k| k.parse::<OcclusionKind>())
                .collect::<Result<_, _>>()
                .map_err(err)?,
            coverages,
            seeds,
            variants: variants
                .iter()
                .map(|v| Variant::with_weights(v, self.config.fusion_wr, self.config.fusion_wi))
                .collect::<Result<_, _>>()
                .map_err(err)?,
            fill,
            max_rank: self.config.cmc_ranks,
        };
        let noise = corpus.noise_scale.unwrap_or_else(|| corpus_noise_scale(&corpus.inner, None));
        let mut ctx = OcclusionContext::from_corpus(&corpus.inner, noise);
        if let Some(pool) = distractors {
            ctx = ctx.with_pool(&pool.inner);
        }
        let result = py.detach(|| sweep(&self.inner, &corpus.inner, &ctx, &plan)).map_err(err)?;
        Ok(result.to_csv())
    }
}

#[pyfunction]
fn attention_flops(n: u64, anchors: u64, dim: u64) -> u64 {
    count_attention_flops(n, anchors, dim)
}

/// Fused retrieval vector of unit-norm refined and CLS features.
#[pyfunction]
fn fuse(f_ref: Vec<f64>, cls: Vec<f64>, wr: f64, wi: f64) -> PyResult<Vec<f64>> {
    retrieval::fuse(&f_ref, &cls, wr, wi).map_err(err)
}

/// Runs the gradient-check suite, optionally for one module.
#[pyfunction]
#[pyo3(signature = (module = None))]
fn gradcheck<'py>(py: Python<'py>, module: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let entries = gradsuite::run_suite(module).map_err(err)?;
    json(py, &entries)
}

#[pymodule]
#[pyo3(name = "anchor_reid")]
fn anchor_reid_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", anchor_reid::VERSION)?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(attention_flops, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
