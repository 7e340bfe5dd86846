//! Checkpoint files.
//!
//! ```text
//! magic "SCK1" | manifest_len u32 | manifest JSON | f64 little-endian blob
//! ```
//!
//! The manifest records the tool version, the effective run config, the
//! step count, the token width, the auxiliary head width, the classifier's identity
//! list, the embedding head's update count and, per section, the name,
//! shape and blob offset (in values) of each tensor. Sections are `anchors`,
//! `domain_gen`, `refine`, `classifier` and `embed_head`. A toy text encoder
//! is rebuilt from the config seed; loaded encoders come from the config's
//! weight blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SCK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tool_version: String,
    pub config: RunConfig,
    pub steps: u64,
    pub dim: usize,
    /// Output width of the auxiliary image-to-text head, 0 when absent.
    pub aux_dim: usize,
    pub class_ids: Vec<u64>,
    pub embed_updates: u64,
    pub sections: Vec<Section>,
}

fn sections(model: &Model) -> Vec<(&'static str, Vec<(String, &Tensor)>)> {
    let mut classifier = vec![("weight".to_string(), &model.classifier)];
    if let Some(aux) = &model.aux_head {
        classifier.push(("aux_head".to_string(), aux));
    }
    vec![
        (
            "anchors",
            model.anchors.named_tensors().into_iter().map(|(n, t)| (n.to_string(), t)).collect(),
        ),
        (
            "domain_gen",
            model.domain.named_tensors().into_iter().map(|(n, t)| (n.to_string(), t)).collect(),
        ),
        ("refine", model.refine.named_tensors()),
        ("classifier", classifier),
        (
            "embed_head",
            model.embed.named_tensors().into_iter().map(|(n, t)| (n.to_string(), t)).collect(),
        ),
    ]
}

pub fn to_bytes(model: &Model, cfg: &RunConfig, steps: u64) -> Result<Vec<u8>> {
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    let mut secs = Vec::new();
    for (name, tensors) in sections(model) {
        let mut entries = Vec::new();
        for (tname, t) in tensors {
            entries.push(TensorEntry {
                name: tname,
                shape: t.shape().to_vec(),
                offset,
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.len();
        }
        secs.push(Section {
            name: name.to_string(),
            tensors: entries,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        tool_version: crate::VERSION.to_string(),
        config: cfg.clone(),
        steps,
        dim: model.dim(),
        aux_dim: model.aux_head.as_ref().map_or(0, |t| t.cols()),
        class_ids: model.class_ids.clone(),
        embed_updates: model.embed.updates,
        sections: secs,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(8 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = bytes
        .get(8..8 + len)
        .ok_or_else(|| Error::Checkpoint("truncated checkpoint manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {}",
            manifest.format_version
        )));
    }
    Ok((manifest, &bytes[8 + len..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model, Manifest)> {
    let (manifest, blob) = read_manifest(bytes)?;
    if blob.len() % 8 != 0 {
        return Err(Error::Checkpoint("parameter blob is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut model = Model::new(&manifest.config, manifest.dim, manifest.aux_dim.max(1), manifest.class_ids.clone())?;
    model.embed.updates = manifest.embed_updates;
    for sec in &manifest.sections {
        for entry in &sec.tensors {
            let slot = tensor_slot(&mut model, &sec.name, &entry.name)?;
            let n: usize = entry.shape.iter().product();
            let data = values
                .get(entry.offset..entry.offset + n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {}.{} runs past the blob", sec.name, entry.name)))?;
            if slot.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {}.{} has shape {:?}, model expects {:?}",
                    sec.name,
                    entry.name,
                    entry.shape,
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(data);
        }
    }
    Ok((model, manifest))
}

fn tensor_slot<'a>(model: &'a mut Model, section: &str, name: &str) -> Result<&'a mut Tensor> {
    let missing = || Error::Checkpoint(format!("unknown tensor {section}.{name}"));
    match section {
        "anchors" => model
            .anchors
            .named_tensors_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .ok_or_else(missing),
        "domain_gen" => model
            .domain
            .named_tensors_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .ok_or_else(missing),
        "refine" => {
            let idx = model
                .refine
                .named_tensors()
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(missing)?;
            Ok(model.refine.tensors_mut().into_iter().nth(idx).expect("index from named list"))
        }
        "classifier" => match name {
            "weight" => Ok(&mut model.classifier),
            "aux_head" => model.aux_head.as_mut().ok_or_else(missing),
            _ => Err(missing()),
        },
        "embed_head" => model
            .embed
            .named_tensors_mut()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .ok_or_else(missing),
        _ => Err(Error::Checkpoint(format!("unknown section `{section}`"))),
    }
}

pub fn save(path: &Path, model: &Model, cfg: &RunConfig, steps: u64) -> Result<()> {
    fs::write(path, to_bytes(model, cfg, steps)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Model, Manifest)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
