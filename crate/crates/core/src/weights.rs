//! Exported backbone weight blobs (`SWB1`).
//!
//! ```text
//! magic "SWB1" | meta_len u32 | meta JSON (utf-8) | count u32
//! count × ( name_len u32 | name utf-8 | ndim u32 | dims u32[ndim] | f32[prod(dims)] )
//! ```
//!
//! Everything is little-endian. Linear weights are stored `in × out` so that
//! `y = x · W + b`. Recognized names:
//!
//! * text encoder: `text.sos`, `text.suffix`, `text.positional`,
//!   `text.layers.{i}.{ln1,ln2}.{gamma,beta}`,
//!   `text.layers.{i}.{wq,wk,wv,wo,fc,out}.{weight,bias}`,
//!   `text.final_ln.{gamma,beta}`, optional `text.projection`;
//!   meta key `text_heads`.
//! * refinement block initialization: `vision.{ln1,ln2}.{gamma,beta}`,
//!   `vision.{wq,wk,wv,wo,fc,out}.{weight,bias}`; meta keys `vision_heads`
//!   and `layer`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SWB1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightBlob {
    pub meta: serde_json::Map<String, serde_json::Value>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl WeightBlob {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("weight blob lacks tensor `{name}`")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| Error::Checkpoint(format!("weight blob meta lacks integer `{key}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > bytes.len() {
                return Err(Error::Format {
                    offset: pos as u64,
                    msg: "truncated weight blob".into(),
                });
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        if take(4)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad weight blob magic".into(),
            });
        }
        let u32_of = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
        let meta_len = u32_of(take(4)?);
        let meta: serde_json::Map<String, serde_json::Value> = serde_json::from_slice(take(meta_len)?)?;
        let count = u32_of(take(4)?);
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = u32_of(take(4)?);
            let name = String::from_utf8_lossy(take(name_len)?).into_owned();
            let ndim = u32_of(take(4)?);
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32_of(take(4)?));
            }
            let n: usize = shape.iter().product();
            let data = take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(WeightBlob { meta, tensors })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        WeightBlob::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }
}

/// Fetches a tensor and checks its shape.
pub(crate) fn expect_shape(blob: &WeightBlob, name: &str, shape: &[usize]) -> Result<Tensor> {
    let t = blob.get(name)?;
    if t.shape() != shape {
        return Err(Error::Shape {
            op: "weight blob",
            lhs: t.shape().to_vec(),
            rhs: shape.to_vec(),
        });
    }
    Ok(t.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut blob = WeightBlob::default();
        blob.meta.insert("text_heads".into(), 4.into());
        blob.tensors
            .insert("a.weight".into(), Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap());
        blob.tensors.insert("a.bias".into(), Tensor::vector(vec![0.25, -1.0, 3.0]));
        let bytes = blob.to_bytes().unwrap();
        let back = WeightBlob::from_bytes(&bytes).unwrap();
        assert_eq!(back, blob);
        assert_eq!(back.meta_usize("text_heads").unwrap(), 4);
        assert!(WeightBlob::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(expect_shape(&back, "a.weight", &[3, 2]).is_err());
    }
}
