//! The trainable aggregation stack: anchor bank, domain generator,
//! refinement blocks, embedding head and identity classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::anchors::{
    assemble_anchor_set, default_domain_hidden, AnchorBank, AnchorMode, AnchorVars, DomainAnchorGenerator,
    DomainVars, EncoderMode, FrozenTextEncoder,
};
use crate::config::RunConfig;
use crate::corpus::FeatureRecord;
use crate::error::{Error, Result};
use crate::refine::{EmbedHead, EmbedVars, InitMode, RefineVars, RefinementModule, RefinementOutput};
use crate::tensor::{Graph, Tensor, Var, EPS_NORM};
use crate::weights::WeightBlob;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub anchors: AnchorBank,
    pub domain: DomainAnchorGenerator,
    pub refine: RefinementModule,
    pub embed: EmbedHead,
    /// `D × C`, bias-free.
    pub classifier: Tensor,
    /// `D × proj_dim`, present when the image-to-text term trains.
    pub aux_head: Option<Tensor>,
    /// Person id of each classifier column, ascending.
    pub class_ids: Vec<u64>,
}

pub struct ModelVars {
    pub anchors: AnchorVars,
    pub domain: DomainVars,
    pub refine: RefineVars,
    pub embed: EmbedVars,
    pub classifier: Var,
    pub aux_head: Option<Var>,
}

pub struct BatchForward {
    /// Embedding-head output `f`, `B × D`.
    pub embeddings: Var,
    /// Pre-normalization activations for the running statistics.
    pub pre_norm: Tensor,
    pub logits: Var,
    /// Shared anchors `K × D` (structured or free).
    pub anchors: Var,
    pub aux_proj: Option<Var>,
}

/// Per-image retrieval features.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatures {
    pub f_ref_unit: Vec<f64>,
    pub cls_unit: Vec<f64>,
}

pub fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let norm = crate::tensor::dot(v, v).sqrt();
    if !(norm > EPS_NORM) {
        return Err(Error::DegenerateNorm("feature vector".into()));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stream)
}

impl Model {
    pub fn new(cfg: &RunConfig, dim: usize, proj_dim: usize, class_ids: Vec<u64>) -> Result<Self> {
        if class_ids.is_empty() {
            return Err(Error::invalid("model needs at least one training identity"));
        }
        let blob = match (&cfg.weights, cfg.text_encoder, cfg.refine_init) {
            (Some(path), _, _) => Some(WeightBlob::read(path.as_ref())?),
            (None, EncoderMode::Loaded, _) | (None, _, InitMode::Loaded) => {
                return Err(Error::Config("loaded modes need a `weights` blob".into()))
            }
            _ => None,
        };
        let encoder = match cfg.text_encoder {
            EncoderMode::Toy => FrozenTextEncoder::toy(
                cfg.text_width,
                cfg.text_layers,
                cfg.text_heads,
                cfg.context_len + 2,
                sub_seed(cfg.seed, 1),
            )?,
            EncoderMode::Loaded => FrozenTextEncoder::from_blob(blob.as_ref().expect("checked above"))?,
        };
        let anchors = AnchorBank::new(
            cfg.anchor_mode,
            cfg.num_anchors,
            cfg.context_len,
            dim,
            encoder,
            sub_seed(cfg.seed, 2),
        )?;
        let hidden = cfg.domain_hidden.unwrap_or_else(|| default_domain_hidden(dim));
        let domain = DomainAnchorGenerator::new(dim, hidden, cfg.domain_anchors, sub_seed(cfg.seed, 3));
        let refine = match cfg.refine_init {
            InitMode::Loaded => RefinementModule::from_blob(blob.as_ref().expect("checked above"), dim, cfg.n_blocks)?,
            init => RefinementModule::new(dim, cfg.n_blocks, cfg.heads, cfg.ffn_ratio, init, sub_seed(cfg.seed, 4))?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 5));
        let classifier = Tensor::randn(&[dim, class_ids.len()], cfg.classifier_std, &mut rng);
        let aux_head = cfg
            .i2t_aux_head
            .then(|| Tensor::randn(&[dim, proj_dim], 1.0 / (dim as f64).sqrt(), &mut rng));
        Ok(Model {
            anchors,
            domain,
            refine,
            embed: EmbedHead::new(dim),
            classifier,
            aux_head,
            class_ids,
        })
    }

    pub fn dim(&self) -> usize {
        self.anchors.dim()
    }

    /// Tensors updated by the optimizer, in binding order.
    pub fn trainable_tensors(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = match self.anchors.mode {
            AnchorMode::Structured => vec![&self.anchors.contexts, &self.anchors.w_proj],
            AnchorMode::Free => vec![&self.anchors.free],
        };
        if self.domain.m > 0 {
            out.extend([&self.domain.w1, &self.domain.w2]);
        }
        out.extend(self.refine.named_tensors().into_iter().map(|(_, t)| t));
        out.extend([&self.embed.weight, &self.embed.gamma, &self.embed.beta, &self.classifier]);
        out.extend(self.aux_head.as_ref());
        out
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = match self.anchors.mode {
            AnchorMode::Structured => vec![&mut self.anchors.contexts, &mut self.anchors.w_proj],
            AnchorMode::Free => vec![&mut self.anchors.free],
        };
        if self.domain.m > 0 {
            out.push(&mut self.domain.w1);
            out.push(&mut self.domain.w2);
        }
        out.extend(self.refine.tensors_mut());
        out.push(&mut self.embed.weight);
        out.push(&mut self.embed.gamma);
        out.push(&mut self.embed.beta);
        out.push(&mut self.classifier);
        out.extend(self.aux_head.as_mut());
        out
    }

    /// Binds every frozen tensor as a constant and takes the trainable
    /// ones from `params`, listed in [`Model::trainable_tensors`] order.
    pub fn bind(&self, g: &mut Graph, params: &[Var]) -> ModelVars {
        let mut it = params.iter().copied();
        let anchors = match self.anchors.mode {
            AnchorMode::Structured => AnchorVars {
                contexts: it.next().expect("contexts var"),
                w_proj: it.next().expect("projection var"),
                free: g.constant(self.anchors.free.clone()),
            },
            AnchorMode::Free => AnchorVars {
                contexts: g.constant(self.anchors.contexts.clone()),
                w_proj: g.constant(self.anchors.w_proj.clone()),
                free: it.next().expect("free anchor var"),
            },
        };
        let domain = if self.domain.m > 0 {
            DomainVars {
                w1: it.next().expect("w1 var"),
                w2: it.next().expect("w2 var"),
            }
        } else {
            self.domain.bind(g, false)
        };
        let n_refine = self.refine.named_tensors().len();
        let refine_vars: Vec<Var> = it.by_ref().take(n_refine).collect();
        let refine = self.refine.vars_from(g, &refine_vars);
        let embed = EmbedVars {
            weight: it.next().expect("embed weight var"),
            gamma: it.next().expect("embed gamma var"),
            beta: it.next().expect("embed beta var"),
        };
        let classifier = it.next().expect("classifier var");
        let aux_head = self.aux_head.as_ref().map(|_| it.next().expect("aux head var"));
        ModelVars {
            anchors,
            domain,
            refine,
            embed,
            classifier,
            aux_head,
        }
    }

    /// Registers every trainable tensor as a graph leaf.
    pub fn bind_trainable(&self, g: &mut Graph) -> (ModelVars, Vec<Var>) {
        let params: Vec<Var> = self.trainable_tensors().into_iter().map(|t| g.param(t.clone())).collect();
        (self.bind(g, &params), params)
    }

    /// Training-mode forward over a batch.
    pub fn forward_batch(&self, g: &mut Graph, vars: &ModelVars, batch: &[&FeatureRecord]) -> Result<BatchForward> {
        if batch.is_empty() {
            return Err(Error::Sampling("empty batch".into()));
        }
        let d = self.dim();
        let anchors = self.anchors.build(g, &vars.anchors)?;
        let mut rows = Vec::with_capacity(batch.len());
        for rec in batch {
            let tokens = g.constant(rec.tokens.clone());
            let dom = self.domain.forward(g, &vars.domain, tokens)?;
            let set = assemble_anchor_set(g, anchors, dom)?;
            let out = self.refine.forward(g, &vars.refine, tokens, set)?;
            rows.push(g.reshape(out.f_ref, &[1, d])?);
        }
        let feats = g.concat_rows(&rows)?;
        let (embeddings, pre_norm) = self.embed.forward_train(g, &vars.embed, feats)?;
        let logits = g.matmul(embeddings, vars.classifier)?;
        let aux_proj = match vars.aux_head {
            Some(h) => Some(g.matmul(embeddings, h)?),
            None => None,
        };
        Ok(BatchForward {
            embeddings,
            pre_norm,
            logits,
            anchors,
            aux_proj,
        })
    }

    /// Refinement of one record against precomputed shared anchors.
    pub fn refine_record(&self, anchors: &Tensor, record: &FeatureRecord) -> Result<RefinementOutput> {
        let mut g = Graph::new();
        let dvars = self.domain.bind(&mut g, false);
        let tokens = g.constant(record.tokens.clone());
        let dom = self.domain.forward(&mut g, &dvars, tokens)?;
        let shared = g.constant(anchors.clone());
        let set = assemble_anchor_set(&mut g, shared, dom)?;
        let rvars = self.refine.bind(&mut g, false);
        let out = self.refine.forward(&mut g, &rvars, tokens, set)?;
        Ok(RefinementOutput {
            refined_tokens: g.value(out.refined).clone(),
            attention: g.value(out.attention).clone(),
            pooled_weights: g.value(out.weights).clone(),
            f_ref: g.value(out.f_ref).clone(),
        })
    }

    /// Inference features for each record, in input order. Records are
    /// processed in parallel on the current rayon pool.
    pub fn embed_records(&self, records: &[&FeatureRecord]) -> Result<Vec<ImageFeatures>> {
        if self.embed.updates == 0 {
            return Err(Error::UninitializedStatistics);
        }
        let anchors = self.anchors.anchors()?;
        let f_refs: Vec<Vec<f64>> = records
            .par_iter()
            .map(|r| self.refine_record(&anchors, r).map(|o| o.f_ref.into_data()))
            .collect::<Result<_>>()?;
        records
            .iter()
            .zip(f_refs)
            .map(|(rec, f)| {
                let row = Tensor::matrix(1, f.len(), f)?;
                let emb = self.embed.infer(&row)?;
                Ok(ImageFeatures {
                    f_ref_unit: unit(emb.data())?,
                    cls_unit: unit(&rec.cls)?,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SynthConfig};

    pub(crate) fn small_config() -> RunConfig {
        RunConfig {
            num_anchors: 4,
            domain_anchors: 2,
            domain_hidden: Some(6),
            context_len: 2,
            text_width: 8,
            text_layers: 1,
            text_heads: 2,
            n_blocks: 1,
            heads: 2,
            ffn_ratio: 2,
            refine_init: InitMode::Random,
            ..RunConfig::default()
        }
    }

    fn small_corpus() -> crate::corpus::Corpus {
        generate_synthetic(&SynthConfig {
            num_ids: 4,
            images_per_id_cam: 2,
            grid_h: 2,
            grid_w: 2,
            dim: 8,
            proj_dim: 4,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn bind_order_matches_trainable_tensors() {
        let corpus = small_corpus();
        for mode in [AnchorMode::Structured, AnchorMode::Free] {
            let cfg = RunConfig {
                anchor_mode: mode,
                i2t_aux_head: true,
                ..small_config()
            };
            let mut model = Model::new(&cfg, 8, 4, corpus.train_ids()).unwrap();
            let n = model.trainable_tensors().len();
            assert_eq!(model.trainable_tensors_mut().len(), n);
            let mut g = Graph::new();
            let (vars, params) = model.bind_trainable(&mut g);
            assert_eq!(params.len(), n);
            let batch: Vec<&FeatureRecord> = corpus.records.iter().take(4).collect();
            let out = model.forward_batch(&mut g, &vars, &batch).unwrap();
            assert_eq!(g.value(out.logits).shape(), &[4, 2]);
            assert_eq!(g.value(out.aux_proj.unwrap()).shape(), &[4, 4]);
        }
    }

    #[test]
    fn inference_requires_statistics() {
        let corpus = small_corpus();
        let mut model = Model::new(&small_config(), 8, 4, corpus.train_ids()).unwrap();
        let recs: Vec<&FeatureRecord> = corpus.records.iter().collect();
        assert!(matches!(model.embed_records(&recs), Err(Error::UninitializedStatistics)));
        model.embed.update_running(&Tensor::randn(&[4, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(0)));
        let feats = model.embed_records(&recs).unwrap();
        for f in feats {
            assert!((crate::tensor::dot(&f.f_ref_unit, &f.f_ref_unit) - 1.0).abs() < 1e-12);
        }
    }
}
