//! Flat run configuration.
//!
//! A config file is a flat TOML document: `key = value` lines, `#` comments,
//! strings in double quotes, numbers, booleans and one-level arrays of
//! numbers. There are no tables. Every key has a default and unknown keys
//! are rejected.
//!
//! ```toml
//! seed = 3
//! num_anchors = 24
//! anchor_mode = "free"
//! coverages = [0.0, 0.3, 0.6]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorMode, EncoderMode};
use crate::error::{Error, Result};
use crate::occlusion::Fill;
use crate::refine::InitMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    /// Structured anchors `K`.
    pub num_anchors: usize,
    /// Domain anchors `M`; zero disables the generator.
    pub domain_anchors: usize,
    /// Domain generator hidden width; `None` scales the 768-wide budget.
    pub domain_hidden: Option<usize>,
    pub context_len: usize,
    pub anchor_mode: AnchorMode,
    pub text_encoder: EncoderMode,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    /// Weight blob for loaded text encoder or refinement modes.
    pub weights: Option<String>,

    pub n_blocks: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    pub refine_init: InitMode,

    pub lambda_tri: f64,
    pub lambda_i2t: f64,
    pub lambda_div: f64,
    pub margin: f64,
    pub label_smoothing: f64,
    pub temperature: f64,
    /// Route a learned projection of the embedding into the image-to-text
    /// term instead of the corpus projection.
    pub i2t_aux_head: bool,

    pub ids_per_batch: usize,
    pub images_per_id: usize,
    pub lr: f64,
    pub epochs: usize,
    pub checkpoint_every: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub classifier_std: f64,

    pub fusion_wr: f64,
    pub fusion_wi: f64,
    pub cmc_ranks: usize,
    pub coverages: Vec<f64>,
    pub occlusion_fill: Fill,
    pub occlusion_seeds: Vec<u64>,
    pub fusion_ratios: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            num_anchors: 24,
            domain_anchors: 3,
            domain_hidden: None,
            context_len: 4,
            anchor_mode: AnchorMode::Structured,
            text_encoder: EncoderMode::Toy,
            text_width: 512,
            text_layers: 2,
            text_heads: 4,
            weights: None,
            n_blocks: 2,
            heads: 8,
            ffn_ratio: 4,
            refine_init: InitMode::ZeroOut,
            lambda_tri: 1.0,
            lambda_i2t: 1.0,
            lambda_div: 1.0,
            margin: 0.3,
            label_smoothing: 0.1,
            temperature: 0.07,
            i2t_aux_head: false,
            ids_per_batch: 8,
            images_per_id: 4,
            lr: 3.5e-4,
            epochs: 30,
            checkpoint_every: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            classifier_std: 0.001,
            fusion_wr: 2.0,
            fusion_wi: 0.2,
            cmc_ranks: 20,
            coverages: (0..=8).map(|i| i as f64 / 10.0).collect(),
            occlusion_fill: Fill::Noise,
            occlusion_seeds: vec![0, 1, 2],
            fusion_ratios: vec![0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0],
        }
    }
}

impl RunConfig {
    /// Desk-scale settings for the reference synthetic corpus: a 64-wide toy
    /// text encoder, single-head refinement blocks with a 1× FFN, and a
    /// larger learning rate over 20 epochs.
    pub fn reference() -> Self {
        RunConfig {
            text_width: 64,
            heads: 1,
            ffn_ratio: 1,
            lr: 3e-3,
            epochs: 20,
            ..RunConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_anchors == 0 {
            return bad("num_anchors must be positive".into());
        }
        if self.n_blocks == 0 || self.heads == 0 || self.ffn_ratio == 0 {
            return bad("n_blocks, heads and ffn_ratio must be positive".into());
        }
        for (name, v) in [
            ("lambda_tri", self.lambda_tri),
            ("lambda_i2t", self.lambda_i2t),
            ("lambda_div", self.lambda_div),
            ("margin", self.margin),
            ("lr", self.lr),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite nonnegative number, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing must lie in [0, 1), got {}", self.label_smoothing));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.ids_per_batch < 2 || self.images_per_id < 2 {
            return bad("PK batches need at least 2 identities and 2 images per identity".into());
        }
        if !(self.fusion_wr >= 0.0 && self.fusion_wi >= 0.0) || self.fusion_wr + self.fusion_wi == 0.0 {
            return bad("both fusion weights zero or negative".into());
        }
        if self.coverages.iter().any(|c| !(0.0..=0.8).contains(c)) {
            return bad("coverages must lie in [0, 0.8]".into());
        }
        if self.cmc_ranks == 0 {
            return bad("cmc_ranks must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::from_toml("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn overrides_and_round_trip() {
        let cfg = RunConfig::from_toml("seed = 9\nanchor_mode = \"free\"\ncoverages = [0.0, 0.6]\nlr = 1e-3\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.anchor_mode, AnchorMode::Free);
        assert_eq!(cfg.coverages, vec![0.0, 0.6]);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(matches!(RunConfig::from_toml("lamda_tri = 1.0"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("label_smoothing = 1.0").is_err());
        assert!(RunConfig::from_toml("fusion_wr = 0.0\nfusion_wi = 0.0").is_err());
        assert!(RunConfig::from_toml("coverages = [0.9]").is_err());
        assert!(RunConfig::from_toml("[section]\nseed = 1").is_err());
    }
}
