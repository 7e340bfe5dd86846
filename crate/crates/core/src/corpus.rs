//! Frozen-backbone feature corpora.
//!
//! On-disk layout (`SFC1`), all integers and floats little-endian:
//!
//! ```text
//! header   magic "SFC1" | record_count u32 | n_patches u32 | dim u32
//!          | proj_dim u32 | grid_h u32 | grid_w u32            (28 bytes)
//! record   person_id u64 | camera_id u32 | split u8 (0 train, 1 query,
//!          2 gallery) | cls f32[dim] | proj f32[proj_dim]
//!          | tokens f32[n_patches * dim] (row-major, grid row-major)
//! ```
//!
//! Records follow the header back to back. Values are held as `f64` in
//! memory and narrowed to `f32` on write.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SFC1";
pub const HEADER_BYTES: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Query => 1,
            Split::Gallery => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Query),
            2 => Some(Split::Gallery),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub record_count: u32,
    pub n_patches: u32,
    pub dim: u32,
    pub proj_dim: u32,
    pub grid_h: u32,
    pub grid_w: u32,
}

impl CorpusHeader {
    pub fn check(&self) -> Result<()> {
        if self.grid_h as u64 * self.grid_w as u64 != self.n_patches as u64 {
            return Err(Error::Format {
                offset: 20,
                msg: format!(
                    "grid {}x{} does not cover {} patches",
                    self.grid_h, self.grid_w, self.n_patches
                ),
            });
        }
        if self.dim == 0 || self.proj_dim == 0 {
            return Err(Error::Format {
                offset: 12,
                msg: "dim and proj_dim must be positive".into(),
            });
        }
        Ok(())
    }

    pub fn record_bytes(&self) -> usize {
        8 + 4 + 1 + 4 * (self.dim as usize + self.proj_dim as usize + self.n_patches as usize * self.dim as usize)
    }
}

/// One image's frozen backbone output.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub person_id: u64,
    pub camera_id: u32,
    pub split: Split,
    pub cls: Vec<f64>,
    pub proj: Vec<f64>,
    /// `n_patches × dim`, grid row-major.
    pub tokens: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub records: Vec<FeatureRecord>,
}

impl Corpus {
    /// Builds a corpus whose header is derived from the records.
    pub fn from_records(grid_h: u32, grid_w: u32, dim: u32, proj_dim: u32, records: Vec<FeatureRecord>) -> Result<Self> {
        let header = CorpusHeader {
            record_count: records.len() as u32,
            n_patches: grid_h * grid_w,
            dim,
            proj_dim,
            grid_h,
            grid_w,
        };
        header.check()?;
        let corpus = Corpus { header, records };
        corpus.check_consistency()?;
        Ok(corpus)
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.header.grid_h as usize, self.header.grid_w as usize)
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    /// Distinct train identities in ascending order; the position in this
    /// list is the class index.
    pub fn train_ids(&self) -> Vec<u64> {
        let ids: BTreeSet<u64> = self
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.person_id)
            .collect();
        ids.into_iter().collect()
    }

    fn check_consistency(&self) -> Result<()> {
        let h = &self.header;
        if h.record_count as usize != self.records.len() {
            return Err(Error::Format {
                offset: 4,
                msg: format!("header declares {} records, got {}", h.record_count, self.records.len()),
            });
        }
        for (i, r) in self.records.iter().enumerate() {
            let offset = (HEADER_BYTES + i * h.record_bytes()) as u64;
            if r.cls.len() != h.dim as usize
                || r.proj.len() != h.proj_dim as usize
                || r.tokens.shape() != [h.n_patches as usize, h.dim as usize]
            {
                return Err(Error::Format {
                    offset,
                    msg: format!("record {i} does not match header dimensions"),
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.header.check()?;
        self.check_consistency()?;
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_BYTES + self.records.len() * h.record_bytes());
        out.extend_from_slice(MAGIC);
        for v in [h.record_count, h.n_patches, h.dim, h.proj_dim, h.grid_h, h.grid_w] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for r in &self.records {
            out.extend_from_slice(&r.person_id.to_le_bytes());
            out.extend_from_slice(&r.camera_id.to_le_bytes());
            out.push(r.split.code());
            for v in r.cls.iter().chain(&r.proj).chain(r.tokens.data()) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: format!("bad magic {:?}", String::from_utf8_lossy(magic)),
            });
        }
        let header = CorpusHeader {
            record_count: cur.u32()?,
            n_patches: cur.u32()?,
            dim: cur.u32()?,
            proj_dim: cur.u32()?,
            grid_h: cur.u32()?,
            grid_w: cur.u32()?,
        };
        header.check()?;
        let expected = HEADER_BYTES as u64 + header.record_count as u64 * header.record_bytes() as u64;
        if bytes.len() as u64 != expected {
            let msg = if (bytes.len() as u64) < expected {
                format!("truncated: expected {expected} bytes, found {}", bytes.len())
            } else {
                format!("{} trailing bytes after last record", bytes.len() as u64 - expected)
            };
            return Err(Error::Format {
                offset: bytes.len().min(expected as usize) as u64,
                msg,
            });
        }
        let (d, p, n) = (header.dim as usize, header.proj_dim as usize, header.n_patches as usize);
        let mut records = Vec::with_capacity(header.record_count as usize);
        for _ in 0..header.record_count {
            let person_id = cur.u64()?;
            let camera_id = cur.u32()?;
            let split_at = cur.pos;
            let split = Split::from_code(cur.take(1)?[0]).ok_or(Error::Format {
                offset: split_at as u64,
                msg: "unknown split code".into(),
            })?;
            let cls = cur.f32s(d)?;
            let proj = cur.f32s(p)?;
            let tokens = Tensor::matrix(n, d, cur.f32s(n * d)?)?;
            records.push(FeatureRecord {
                person_id,
                camera_id,
                split,
                cls,
                proj,
                tokens,
            });
        }
        Ok(Corpus { header, records })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let bytes = corpus.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Corpus::from_bytes(&bytes)
}

/// `dir/name.sfc` → `dir/name.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.meta.json"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

pub fn write_sidecar(corpus_path: &Path, meta: &CorpusMeta) -> Result<()> {
    let path = sidecar_path(corpus_path);
    let mut text = serde_json::to_string_pretty(meta)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Reads the sidecar if present.
pub fn read_sidecar(corpus_path: &Path) -> Result<Option<CorpusMeta>> {
    let path = sidecar_path(corpus_path);
    match fs::read_to_string(&path) {
        Ok(text) => Ok(Some(serde_json::from_str(&text)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Parameters of the synthetic stand-in for frozen backbone features.
///
/// A token at grid row `r` of image `(id, cam)` is
/// `gain_cam ⊙ (template_r + identity_signal_scale · profile_r · (z_{id,r} + jitter)) + offset_cam + noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_ids: usize,
    pub cams_per_id: usize,
    pub images_per_id_cam: usize,
    pub seed: u64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub proj_dim: usize,
    /// Fraction of identities (lowest ids first) assigned to the train split.
    pub train_fraction: f64,
    /// Query images per (test identity, camera); the rest go to the gallery.
    pub query_per_cam: usize,
    pub identity_signal_scale: f64,
    pub camera_shift_scale: f64,
    pub noise_scale: f64,
    /// Scale of the identity-independent per-row template.
    pub structure_scale: f64,
    /// Scale of the vector shared by every person token.
    pub person_scale: f64,
    /// Per-image perturbation of the identity latent, relative to it.
    pub appearance_jitter: f64,
    /// Identity-signal weight per grid row; empty selects the default profile.
    pub region_profile: Vec<f64>,
    /// Most grid columns on each side holding background rather than the
    /// person; each image draws its own width per side.
    pub background_cols: usize,
    /// Per-image clutter on background tokens.
    pub clutter_scale: f64,
    /// Extra identities generated after the main ones, kept out of the
    /// corpus and used as a distractor pool.
    pub distractor_ids: usize,
    /// Project the shared person direction out of the CLS head.
    pub cls_remove_person: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_ids: 64,
            cams_per_id: 2,
            images_per_id_cam: 8,
            seed: 7,
            grid_h: 16,
            grid_w: 8,
            dim: 64,
            proj_dim: 32,
            train_fraction: 0.5,
            query_per_cam: 1,
            identity_signal_scale: 1.0,
            camera_shift_scale: 0.5,
            noise_scale: 1.0,
            structure_scale: 1.0,
            person_scale: 0.0,
            appearance_jitter: 0.5,
            region_profile: Vec::new(),
            background_cols: 0,
            clutter_scale: 0.0,
            distractor_ids: 0,
            cls_remove_person: false,
        }
    }
}

/// Head rows carry little identity signal, the torso the most, legs less.
pub fn default_region_profile(grid_h: usize) -> Vec<f64> {
    (0..grid_h)
        .map(|r| {
            let f = (r as f64 + 0.5) / grid_h as f64;
            if f < 0.1875 {
                0.35
            } else if f < 0.5 {
                1.0
            } else {
                0.55
            }
        })
        .collect()
}

impl SynthConfig {
    /// The reference desk-scale corpus: a small camera shift, a person vector
    /// shared by every person token but kept out of the CLS head, up to two
    /// background columns on each side, and a disjoint pool of sixteen
    /// distractor identities.
    pub fn reference() -> Self {
        SynthConfig {
            identity_signal_scale: 1.3,
            camera_shift_scale: 0.03,
            structure_scale: 0.3,
            person_scale: 5.0,
            cls_remove_person: true,
            background_cols: 2,
            distractor_ids: 16,
            ..SynthConfig::default()
        }
    }

    /// Same flat TOML grammar as the run config.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SynthConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 2 {
            return Err(Error::Config(format!("num_ids must be at least 2, got {}", self.num_ids)));
        }
        let scales = [
            self.identity_signal_scale,
            self.camera_shift_scale,
            self.noise_scale,
            self.structure_scale,
            self.person_scale,
            self.appearance_jitter,
            self.clutter_scale,
        ];
        if scales.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Config("all scales must be finite and nonnegative".into()));
        }
        if self.cams_per_id == 0 || self.images_per_id_cam == 0 || self.grid_h == 0 || self.grid_w == 0 {
            return Err(Error::Config("counts and grid sides must be positive".into()));
        }
        if self.dim == 0 || self.proj_dim == 0 {
            return Err(Error::Config("dim and proj_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Config("train_fraction must lie in [0, 1]".into()));
        }
        if 2 * self.background_cols >= self.grid_w {
            return Err(Error::Config(format!(
                "background_cols {} leaves no person columns in a grid {} wide",
                self.background_cols, self.grid_w
            )));
        }
        if !self.region_profile.is_empty() && self.region_profile.len() != self.grid_h {
            return Err(Error::Config(format!(
                "region_profile has {} entries for {} grid rows",
                self.region_profile.len(),
                self.grid_h
            )));
        }
        Ok(())
    }

    pub fn profile(&self) -> Vec<f64> {
        if self.region_profile.is_empty() {
            default_region_profile(self.grid_h)
        } else {
            self.region_profile.clone()
        }
    }

    pub fn num_train_ids(&self) -> usize {
        ((self.num_ids as f64 * self.train_fraction).round() as usize).min(self.num_ids)
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Deterministic synthetic corpus. Values are rounded to `f32` so the
/// in-memory corpus equals its own serialized form.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Corpus> {
    generate_synthetic_with_pool(cfg).map(|(corpus, _)| corpus)
}

/// The corpus plus a pool of `distractor_ids` further identities drawn from
/// the same generator. Pool records are marked `Train` and their ids follow
/// the corpus ids, so they never share an identity with a query. The pool
/// does not perturb the corpus: its identities are drawn last.
pub fn generate_synthetic_with_pool(cfg: &SynthConfig) -> Result<(Corpus, Corpus)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w, d) = (cfg.grid_h, cfg.grid_w, cfg.dim);
    let n = h * w;
    let profile = cfg.profile();

    let mut template = Tensor::randn(&[h, d], cfg.structure_scale, &mut rng);
    let person = Tensor::randn(&[d], cfg.person_scale, &mut rng);
    let person_dir = (cfg.cls_remove_person && cfg.person_scale > 0.0).then(|| {
        let norm = person.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        person.data().iter().map(|v| v / norm).collect::<Vec<f64>>()
    });
    for row in template.data_mut().chunks_mut(d) {
        row.iter_mut().zip(person.data()).for_each(|(a, p)| *a += p);
    }
    let cam_gain: Vec<Tensor> = (0..cfg.cams_per_id)
        .map(|_| {
            let mut t = Tensor::randn(&[d], 0.1 * cfg.camera_shift_scale, &mut rng);
            t.data_mut().iter_mut().for_each(|v| *v += 1.0);
            t
        })
        .collect();
    let cam_offset: Vec<Tensor> = (0..cfg.cams_per_id)
        .map(|_| Tensor::randn(&[d], cfg.camera_shift_scale, &mut rng))
        .collect();
    let projection = Tensor::randn(&[cfg.proj_dim, d], 1.0 / (d as f64).sqrt(), &mut rng);

    let n_train = cfg.num_train_ids();
    let mut records = Vec::with_capacity(cfg.num_ids * cfg.cams_per_id * cfg.images_per_id_cam);
    let mut pool = Vec::new();
    for id in 0..cfg.num_ids + cfg.distractor_ids {
        let latent = Tensor::randn(&[h, d], 1.0, &mut rng);
        for cam in 0..cfg.cams_per_id {
            for img in 0..cfg.images_per_id_cam {
                let jitter = Tensor::randn(&[h, d], cfg.appearance_jitter, &mut rng);
                let noise = Tensor::randn(&[n, d], cfg.noise_scale, &mut rng);
                let cls_noise = Tensor::randn(&[d], cfg.noise_scale / (n as f64).sqrt(), &mut rng);
                let clutter = (cfg.background_cols > 0)
                    .then(|| Tensor::randn(&[n, d], cfg.clutter_scale, &mut rng));
                let (left, right) = if cfg.background_cols > 0 {
                    (rng.random_range(0..=cfg.background_cols), rng.random_range(0..=cfg.background_cols))
                } else {
                    (0, 0)
                };
                let (gain, offset) = (cam_gain[cam].data(), cam_offset[cam].data());

                let mut tokens = vec![0.0; n * d];
                for r in 0..h {
                    let s = cfg.identity_signal_scale * profile[r];
                    for c in 0..w {
                        let t = (r * w + c) * d;
                        if let Some(clutter) = clutter.as_ref().filter(|_| c < left || c >= w - right) {
                            for k in 0..d {
                                tokens[t + k] = round_f32(offset[k] + clutter.data()[t + k] + noise.data()[t + k]);
                            }
                            continue;
                        }
                        for k in 0..d {
                            let base = template.get(r, k) + s * (latent.get(r, k) + jitter.get(r, k));
                            tokens[t + k] = round_f32(gain[k] * base + offset[k] + noise.data()[t + k]);
                        }
                    }
                }
                let mut cls = vec![0.0; d];
                for row in tokens.chunks(d) {
                    for (a, v) in cls.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                cls.iter_mut().for_each(|a| *a /= n as f64);
                if let Some(u) = &person_dir {
                    let along = crate::tensor::dot(u, &cls);
                    cls.iter_mut().zip(u).for_each(|(a, v)| *a -= along * v);
                }
                for (k, a) in cls.iter_mut().enumerate() {
                    *a = round_f32(*a + cls_noise.data()[k]);
                }
                let proj: Vec<f64> = (0..cfg.proj_dim)
                    .map(|p| round_f32(crate::tensor::dot(projection.row(p), &cls)))
                    .collect();
                let split = if id < n_train || id >= cfg.num_ids {
                    Split::Train
                } else if img < cfg.query_per_cam {
                    Split::Query
                } else {
                    Split::Gallery
                };
                let target = if id < cfg.num_ids { &mut records } else { &mut pool };
                target.push(FeatureRecord {
                    person_id: id as u64,
                    camera_id: cam as u32,
                    split,
                    cls,
                    proj,
                    tokens: Tensor::matrix(n, d, tokens)?,
                });
            }
        }
    }
    let dims = (h as u32, w as u32, d as u32, cfg.proj_dim as u32);
    Ok((
        Corpus::from_records(dims.0, dims.1, dims.2, dims.3, records)?,
        Corpus::from_records(dims.0, dims.1, dims.2, dims.3, pool)?,
    ))
}

/// Frozen per-identity text features for the image-to-text term.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityTextBank {
    ids: Vec<u64>,
    /// `num_ids × proj_dim`, unit rows.
    pub features: Tensor,
}

impl IdentityTextBank {
    /// Seeded random unit vectors, one per train identity.
    pub fn random(ids: &[u64], proj_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_ba4c);
        let mut features = Tensor::randn(&[ids.len(), proj_dim], 1.0, &mut rng);
        for row in features.data_mut().chunks_mut(proj_dim.max(1)) {
            let norm = row.iter().fold(0.0, |a, v| a + v * v).sqrt();
            if !(norm > crate::tensor::EPS_NORM) {
                return Err(Error::DegenerateNorm("identity text bank row".into()));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(IdentityTextBank {
            ids: ids.to_vec(),
            features,
        })
    }

    pub fn from_features(ids: Vec<u64>, features: Tensor) -> Result<Self> {
        if features.rows() != ids.len() || features.shape().len() != 2 {
            return Err(Error::Shape {
                op: "identity_text_bank",
                lhs: features.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        Ok(IdentityTextBank { ids, features })
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn class_of(&self, person_id: u64) -> Option<usize> {
        self.ids.binary_search(&person_id).ok()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub fatal: Vec<String>,
    pub warnings: Vec<String>,
    /// Identities that appear under a single camera.
    pub single_camera_ids: Vec<u64>,
    pub split_counts: BTreeMap<Split, usize>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.fatal.is_empty()
    }
}

pub fn validate_corpus(corpus: &Corpus) -> ValidationReport {
    let mut report = ValidationReport::default();
    if let Err(e) = corpus.header.check().and_then(|_| corpus.check_consistency()) {
        report.fatal.push(e.to_string());
    }
    let mut cams: BTreeMap<u64, BTreeSet<u32>> = BTreeMap::new();
    for (i, r) in corpus.records.iter().enumerate() {
        *report.split_counts.entry(r.split).or_insert(0) += 1;
        cams.entry(r.person_id).or_default().insert(r.camera_id);
        let bad = [
            ("cls", r.cls.iter().position(|v| !v.is_finite())),
            ("proj", r.proj.iter().position(|v| !v.is_finite())),
            ("tokens", r.tokens.data().iter().position(|v| !v.is_finite())),
        ];
        for (field, pos) in bad {
            if let Some(p) = pos {
                report
                    .fatal
                    .push(format!("record {i}: non-finite value in {field} at element {p}"));
            }
        }
    }
    for (id, set) in &cams {
        if set.len() < 2 {
            report.single_camera_ids.push(*id);
        }
    }
    if !report.single_camera_ids.is_empty() {
        report.warnings.push(format!(
            "identities seen by a single camera: {:?}",
            report.single_camera_ids
        ));
    }
    for split in [Split::Train, Split::Query, Split::Gallery] {
        if report.split_counts.get(&split).copied().unwrap_or(0) == 0 {
            report.warnings.push(format!("split {split:?} is empty"));
        }
    }
    let q = report.split_counts.get(&Split::Query).copied().unwrap_or(0);
    let g = report.split_counts.get(&Split::Gallery).copied().unwrap_or(0);
    if q > 0 && g > 0 && q > g {
        report.warnings.push(format!("more queries ({q}) than gallery images ({g})"));
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> SynthConfig {
        SynthConfig {
            num_ids: 4,
            cams_per_id: 2,
            images_per_id_cam: 2,
            grid_h: 4,
            grid_w: 2,
            dim: 16,
            proj_dim: 4,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn round_trip_three_records() {
        let mut c = generate_synthetic(&tiny_config()).unwrap();
        c.records.truncate(3);
        c.header.record_count = 3;
        let bytes = c.to_bytes().unwrap();
        let back = Corpus::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let c = generate_synthetic(&tiny_config()).unwrap();
        let mut bytes = c.to_bytes().unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        match Corpus::from_bytes(&bytes) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncated_file_reports_offset() {
        let c = generate_synthetic(&tiny_config()).unwrap();
        let bytes = c.to_bytes().unwrap();
        let err = Corpus::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("truncated"));
        let err = Corpus::from_bytes(&bytes[..10]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 8, .. }), "{err}");
    }

    #[test]
    fn empty_corpus_is_header_only() {
        let c = Corpus::from_records(2, 4, 8, 4, vec![]).unwrap();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(bytes.len(), HEADER_BYTES);
        assert_eq!(Corpus::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn header_mismatch_rejected() {
        let mut c = generate_synthetic(&tiny_config()).unwrap();
        c.header.record_count += 1;
        assert!(c.to_bytes().is_err());
        let mut c = generate_synthetic(&tiny_config()).unwrap();
        c.header.grid_w = 3;
        assert!(matches!(c.to_bytes(), Err(Error::Format { .. })));
    }

    #[test]
    fn generator_is_deterministic() {
        let cfg = SynthConfig { seed: 7, ..tiny_config() };
        let a = generate_synthetic(&cfg).unwrap().to_bytes().unwrap();
        let b = generate_synthetic(&cfg).unwrap().to_bytes().unwrap();
        assert_eq!(a, b);
        let other = generate_synthetic(&SynthConfig { seed: 8, ..cfg }).unwrap().to_bytes().unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn noiseless_identity_images_coincide() {
        let cfg = SynthConfig {
            noise_scale: 0.0,
            camera_shift_scale: 0.0,
            appearance_jitter: 0.0,
            ..tiny_config()
        };
        let c = generate_synthetic(&cfg).unwrap();
        for id in 0..cfg.num_ids as u64 {
            let imgs: Vec<&FeatureRecord> = c.records.iter().filter(|r| r.person_id == id).collect();
            for r in &imgs[1..] {
                assert_eq!(r.tokens, imgs[0].tokens);
            }
        }
    }

    #[test]
    fn person_removal_touches_only_cls_along_one_direction() {
        let plain = SynthConfig {
            person_scale: 3.0,
            ..tiny_config()
        };
        let a = generate_synthetic(&plain).unwrap();
        let b = generate_synthetic(&SynthConfig {
            cls_remove_person: true,
            ..plain
        })
        .unwrap();
        let diffs: Vec<Vec<f64>> = a
            .records
            .iter()
            .zip(&b.records)
            .map(|(x, y)| {
                assert_eq!(x.tokens, y.tokens);
                x.cls.iter().zip(&y.cls).map(|(p, q)| p - q).collect()
            })
            .collect();
        let norm = |v: &[f64]| crate::tensor::dot(v, v).sqrt();
        for d in &diffs[1..] {
            let cos = crate::tensor::dot(d, &diffs[0]) / (norm(d) * norm(&diffs[0]));
            assert!(cos.abs() > 0.999, "{cos}");
        }
    }

    #[test]
    fn rejects_single_identity() {
        let cfg = SynthConfig {
            num_ids: 1,
            ..tiny_config()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn validation_flags_nan_and_single_camera() {
        let c = generate_synthetic(&tiny_config()).unwrap();
        let report = validate_corpus(&c);
        assert!(report.is_ok(), "{report:?}");
        assert!(report.single_camera_ids.is_empty());

        let mut bad = c.clone();
        bad.records[2].tokens.data_mut()[5] = f64::NAN;
        let report = validate_corpus(&bad);
        assert_eq!(report.fatal.len(), 1);
        assert!(report.fatal[0].starts_with("record 2"));

        let mut one_cam = c.clone();
        for r in one_cam.records.iter_mut().filter(|r| r.person_id == 3) {
            r.camera_id = 0;
        }
        let report = validate_corpus(&one_cam);
        assert!(report.is_ok());
        assert_eq!(report.single_camera_ids, vec![3]);
        assert!(report.warnings.iter().any(|w| w.contains("[3]")));
    }

    #[test]
    fn text_bank_rows_are_unit() {
        let bank = IdentityTextBank::random(&[2, 5, 9], 8, 1).unwrap();
        for i in 0..3 {
            let n: f64 = bank.features.row(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert_eq!(bank.class_of(5), Some(1));
        assert_eq!(bank.class_of(4), None);
    }

    #[test]
    fn sidecar_naming() {
        assert_eq!(
            sidecar_path(Path::new("/tmp/x/ref.sfc")),
            PathBuf::from("/tmp/x/ref.meta.json")
        );
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn serialization_round_trip(seed in 0u64..1000, ids in 2usize..5, gh in 1usize..4, gw in 1usize..4, dim in 1usize..6) {
            let cfg = SynthConfig { seed, num_ids: ids, grid_h: gh, grid_w: gw, dim, proj_dim: 3,
                images_per_id_cam: 2, ..SynthConfig::default() };
            let c = generate_synthetic(&cfg).unwrap();
            let bytes = c.to_bytes().unwrap();
            let back = Corpus::from_bytes(&bytes).unwrap();
            proptest::prop_assert_eq!(&back, &c);
            proptest::prop_assert!(validate_corpus(&back).is_ok());
        }
    }
}
