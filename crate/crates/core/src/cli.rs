//! Command-line front end.
//!
//! Every artifact a subcommand writes carries the tool version and the
//! effective configuration: JSON outputs hold them as top-level fields, CSV
//! outputs as leading `#` comment lines.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::checkpoint::{self, Manifest};
use crate::config::RunConfig;
use crate::corpus::{self, read_corpus, read_sidecar, write_corpus, write_sidecar, Corpus, CorpusMeta, FeatureRecord, Split, SynthConfig};
use crate::error::{Error, Result};
use crate::gradsuite;
use crate::model::Model;
use crate::objective::{log_csv, train_stage2};
use crate::occlusion::{corpus_noise_scale, occlude_all, sweep, Fill, OcclusionContext, OcclusionKind, SweepPlan};
use crate::refine::{attention_csv, count_attention_flops};
use crate::retrieval::{evaluate_sets, fusion_weight_sweep, split_records, FeatureSet, Variant};

#[derive(Debug, Parser)]
#[command(name = "anchor-reid", version, about = "Anchor-guided patch aggregation experiments on patch-token corpora")]
pub struct Cli {
    /// Overrides the seed of the run or synthetic-corpus config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus (and its distractor pool, if configured).
    GenSynth {
        /// Synthetic-corpus TOML; omitted keys take the generator defaults.
        /// Without it the reference corpus is generated.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the distractor pool; defaults to `<out stem>.pool.sfc`.
        #[arg(long)]
        pool_out: Option<PathBuf>,
    },
    /// Check a corpus for structural problems.
    Validate {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train the refinement model and write a checkpoint.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Run-config TOML; without it the reference run config is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss CSV; defaults to `<out stem>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate one retrieval variant on the query and gallery splits.
    Eval {
        #[command(flatten)]
        io: ModelIo,
        #[arg(long, default_value = "fused")]
        variant: String,
        /// Refined-branch fusion weight; defaults to the checkpoint config.
        #[arg(long)]
        wr: Option<f64>,
        /// CLS-branch fusion weight; defaults to the checkpoint config.
        #[arg(long)]
        wi: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Occlude queries over a coverage grid and compare variants to CLS.
    SweepOcclusion {
        #[command(flatten)]
        io: ModelIo,
        #[arg(long, value_delimiter = ',', default_value = "lower_half,upper_half,random_rect,distractor")]
        kinds: Vec<String>,
        /// Defaults to the checkpoint config.
        #[arg(long, value_delimiter = ',')]
        coverages: Option<Vec<f64>>,
        /// Defaults to the checkpoint config.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',', default_value = "cls_only,refined_only,fused")]
        variants: Vec<String>,
        /// zeros, noise or learned_token; defaults to the checkpoint config.
        #[arg(long)]
        fill: Option<String>,
        /// Corpus whose records serve as distractors instead of the train split.
        #[arg(long)]
        distractors: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep the refined-to-CLS fusion weight ratio.
    SweepFusion {
        #[command(flatten)]
        io: ModelIo,
        /// Defaults to the checkpoint config; `inf` is the refined-only end.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
        /// Occlude the queries with this kind first.
        #[arg(long, requires = "coverage")]
        occlusion: Option<String>,
        #[arg(long)]
        coverage: Option<f64>,
        #[arg(long, default_value_t = 0)]
        occlusion_seed: u64,
        #[arg(long)]
        distractors: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        /// One of tensor, anchors, refine, objective, model.
        #[arg(long)]
        module: Option<String>,
    },
    /// Attention FLOPs added per image.
    Flops {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        anchors: u64,
        #[arg(long)]
        dim: u64,
    },
    /// Per-patch pooled weight and best anchor for one corpus record.
    ExportAttention {
        #[command(flatten)]
        io: ModelIo,
        #[arg(long)]
        image_index: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ModelIo {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.max(1)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynth { config, out, pool_out } => gen_synth(cli.seed, config.as_deref(), out, pool_out.as_deref()),
        Command::Validate { corpus } => validate(corpus),
        Command::Train { corpus, config, out, log } => train(cli.seed, corpus, config.as_deref(), out, log.as_deref()),
        Command::Eval { io, variant, wr, wi, out } => eval(io, variant, *wr, *wi, out.as_deref()),
        Command::SweepOcclusion {
            io,
            kinds,
            coverages,
            seeds,
            variants,
            fill,
            distractors,
            out,
        } => sweep_occlusion(
            io,
            kinds,
            coverages.as_deref(),
            seeds.as_deref(),
            variants,
            fill.as_deref(),
            distractors.as_deref(),
            out.as_deref(),
        ),
        Command::SweepFusion {
            io,
            ratios,
            occlusion,
            coverage,
            occlusion_seed,
            distractors,
            out,
        } => sweep_fusion(
            io,
            ratios.as_deref(),
            occlusion.as_deref().zip(*coverage),
            *occlusion_seed,
            distractors.as_deref(),
            out.as_deref(),
        ),
        Command::Gradcheck { module } => gradcheck(module.as_deref()),
        Command::Flops { n, anchors, dim } => {
            println!("{}", count_attention_flops(*n, *anchors, *dim));
            Ok(())
        }
        Command::ExportAttention { io, image_index, out } => export_attention(io, *image_index, out.as_deref()),
    }
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn json_text<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// `# tool_version=...` and `# config=<json>` lines ahead of a CSV body.
fn csv_with_header(config: &RunConfig, extra: &serde_json::Value, body: &str) -> Result<String> {
    Ok(format!(
        "# tool_version={}\n# config={}\n# args={}\n{body}",
        crate::VERSION,
        serde_json::to_string(config)?,
        serde_json::to_string(extra)?
    ))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn gen_synth(seed: Option<u64>, config: Option<&Path>, out: &Path, pool_out: Option<&Path>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            SynthConfig::from_toml(&text)?
        }
        None => SynthConfig::reference(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (main, pool) = corpus::generate_synthetic_with_pool(&cfg)?;
    let meta = CorpusMeta {
        tool_version: crate::VERSION.to_string(),
        synth: Some(cfg.clone()),
        provenance: Some(json!({ "generator": "synthetic", "part": "corpus" })),
    };
    write_corpus(out, &main)?;
    write_sidecar(out, &meta)?;
    let mut summary = json!({
        "tool_version": crate::VERSION,
        "synth": cfg,
        "corpus": out,
        "records": main.records.len(),
    });
    if !pool.records.is_empty() {
        let pool_path = pool_out.map(Path::to_path_buf).unwrap_or_else(|| sibling(out, "pool.sfc"));
        write_corpus(&pool_path, &pool)?;
        write_sidecar(
            &pool_path,
            &CorpusMeta {
                provenance: Some(json!({ "generator": "synthetic", "part": "distractor_pool" })),
                ..meta
            },
        )?;
        summary["pool"] = json!(pool_path);
        summary["pool_records"] = json!(pool.records.len());
    }
    print!("{}", json_text(&summary)?);
    Ok(())
}

fn validate(path: &Path) -> Result<()> {
    let corpus = read_corpus(path)?;
    let report = corpus::validate_corpus(&corpus);
    print!(
        "{}",
        json_text(&json!({
            "tool_version": crate::VERSION,
            "corpus": path,
            "records": corpus.records.len(),
            "report": report,
        }))?
    );
    if report.is_ok() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{} fatal problem(s) in {}", report.fatal.len(), path.display())))
    }
}

fn train(seed: Option<u64>, corpus_path: &Path, config: Option<&Path>, out: &Path, log: Option<&Path>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::reference(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let corpus = read_corpus(corpus_path)?;
    let outcome = train_stage2(&corpus, &cfg, Some(out))?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| sibling(out, "log.csv"));
    let text = csv_with_header(&cfg, &json!({ "corpus": corpus_path }), &log_csv(&outcome.log))?;
    fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
    let last = outcome.log.last().map(|r| r.losses);
    print!(
        "{}",
        json_text(&json!({
            "tool_version": crate::VERSION,
            "config": cfg,
            "checkpoint": out,
            "log": log_path,
            "steps": outcome.steps,
            "final_losses": last,
            "warnings": outcome.warnings,
        }))?
    );
    Ok(())
}

struct Loaded {
    corpus: Corpus,
    model: Model,
    manifest: Manifest,
}

fn load(io: &ModelIo) -> Result<Loaded> {
    let corpus = read_corpus(&io.corpus)?;
    let (model, manifest) = checkpoint::load(&io.checkpoint)?;
    if corpus.dim() != model.dim() {
        return Err(Error::Shape {
            op: "checkpoint vs corpus token width",
            lhs: vec![model.dim()],
            rhs: vec![corpus.dim()],
        });
    }
    Ok(Loaded { corpus, model, manifest })
}

fn eval(io: &ModelIo, variant: &str, wr: Option<f64>, wi: Option<f64>, out: Option<&Path>) -> Result<()> {
    let l = load(io)?;
    let cfg = &l.manifest.config;
    let (wr, wi) = (wr.unwrap_or(cfg.fusion_wr), wi.unwrap_or(cfg.fusion_wi));
    if wr == 0.0 && wi == 0.0 {
        return Err(Error::invalid("both fusion weights zero"));
    }
    let variant = Variant::with_weights(variant, wr, wi)?;
    let q = FeatureSet::extract(&l.model, &split_records(&l.corpus, Split::Query))?;
    let g = FeatureSet::extract(&l.model, &split_records(&l.corpus, Split::Gallery))?;
    let result = evaluate_sets(&q, &g, variant, cfg.cmc_ranks)?;
    let text = json_text(&json!({
        "tool_version": crate::VERSION,
        "config": cfg,
        "corpus": io.corpus,
        "checkpoint": io.checkpoint,
        "variant": variant,
        "mAP": result.map,
        "rank1": result.rank1(),
        "cmc": result.cmc,
        "num_valid_queries": result.num_valid_queries,
    }))?;
    write_out(out, &text)
}

fn parse_fill(s: &str) -> Result<Fill> {
    serde_json::from_value(json!(s))
        .map_err(|_| Error::invalid(format!("unknown fill `{s}` (expected zeros, noise or learned_token)")))
}

fn occlusion_context<'a>(
    corpus: &'a Corpus,
    pool: Option<&'a Corpus>,
    corpus_path: &Path,
) -> Result<OcclusionContext<'a>> {
    let meta = read_sidecar(corpus_path)?;
    let ctx = OcclusionContext::from_corpus(corpus, corpus_noise_scale(corpus, meta.as_ref()));
    Ok(match pool {
        Some(p) => ctx.with_pool(p),
        None => ctx,
    })
}

fn read_pool(path: Option<&Path>, corpus: &Corpus) -> Result<Option<Corpus>> {
    let Some(p) = path else { return Ok(None) };
    let pool = read_corpus(p)?;
    if pool.header.n_patches != corpus.header.n_patches || pool.dim() != corpus.dim() {
        return Err(Error::Shape {
            op: "distractor pool vs corpus",
            lhs: vec![pool.header.n_patches as usize, pool.dim()],
            rhs: vec![corpus.header.n_patches as usize, corpus.dim()],
        });
    }
    Ok(Some(pool))
}

#[allow(clippy::too_many_arguments)]
fn sweep_occlusion(
    io: &ModelIo,
    kinds: &[String],
    coverages: Option<&[f64]>,
    seeds: Option<&[u64]>,
    variants: &[String],
    fill: Option<&str>,
    distractors: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let l = load(io)?;
    let cfg = &l.manifest.config;
    let plan = SweepPlan {
        kinds: kinds.iter().map(|k| k.parse()).collect::<Result<Vec<OcclusionKind>>>()?,
        coverages: coverages.map(<[f64]>::to_vec).unwrap_or_else(|| cfg.coverages.clone()),
        seeds: seeds.map(<[u64]>::to_vec).unwrap_or_else(|| cfg.occlusion_seeds.clone()),
        variants: variants
            .iter()
            .map(|v| Variant::with_weights(v, cfg.fusion_wr, cfg.fusion_wi))
            .collect::<Result<_>>()?,
        fill: fill.map(parse_fill).transpose()?.unwrap_or(cfg.occlusion_fill),
        max_rank: cfg.cmc_ranks,
    };
    let pool = read_pool(distractors, &l.corpus)?;
    let ctx = occlusion_context(&l.corpus, pool.as_ref(), &io.corpus)?;
    let result = sweep(&l.model, &l.corpus, &ctx, &plan)?;
    let args = json!({
        "corpus": io.corpus,
        "checkpoint": io.checkpoint,
        "kinds": plan.kinds,
        "coverages": plan.coverages,
        "seeds": plan.seeds,
        "variants": plan.variants,
        "fill": plan.fill,
        "distractors": distractors,
    });
    write_out(out, &csv_with_header(cfg, &args, &result.to_csv())?)
}

fn sweep_fusion(
    io: &ModelIo,
    ratios: Option<&[f64]>,
    occlusion: Option<(&str, f64)>,
    occlusion_seed: u64,
    distractors: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let l = load(io)?;
    let cfg = &l.manifest.config;
    let ratios = ratios.map(<[f64]>::to_vec).unwrap_or_else(|| cfg.fusion_ratios.clone());
    let queries = split_records(&l.corpus, Split::Query);
    let gallery = FeatureSet::extract(&l.model, &split_records(&l.corpus, Split::Gallery))?;
    let qset = match occlusion {
        None => FeatureSet::extract(&l.model, &queries)?,
        Some((kind, coverage)) => {
            let pool = read_pool(distractors, &l.corpus)?;
            let ctx = occlusion_context(&l.corpus, pool.as_ref(), &io.corpus)?;
            let occluded = occlude_all(
                &queries,
                kind.parse()?,
                coverage,
                occlusion_seed,
                cfg.occlusion_fill,
                l.corpus.grid(),
                &ctx,
            )?;
            let refs: Vec<&FeatureRecord> = occluded.iter().collect();
            FeatureSet::extract(&l.model, &refs)?
        }
    };
    let result = fusion_weight_sweep(&qset, &gallery, &ratios, cfg.cmc_ranks)?;
    let args = json!({
        "corpus": io.corpus,
        "checkpoint": io.checkpoint,
        "ratios": ratios,
        "occlusion": occlusion.map(|(k, c)| json!({ "kind": k, "coverage": c, "seed": occlusion_seed })),
        "argmax_ratio": result.argmax_ratio,
    });
    write_out(out, &csv_with_header(cfg, &args, &result.to_csv())?)
}

fn gradcheck(module: Option<&str>) -> Result<()> {
    let entries = gradsuite::run_suite(module)?;
    let mut failed = 0;
    for e in &entries {
        let status = if e.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:4} {:10} {:24} max_rel={:.3e} tol={:.0e} checked={}",
            e.module, e.name, e.max_rel_error, e.tolerance, e.checked
        );
        failed += usize::from(!e.passed());
    }
    if failed > 0 {
        return Err(Error::invalid(format!("{failed} gradient check(s) above tolerance")));
    }
    println!("all {} gradient checks within tolerance", entries.len());
    Ok(())
}

fn export_attention(io: &ModelIo, index: usize, out: Option<&Path>) -> Result<()> {
    let l = load(io)?;
    let rec = l.corpus.records.get(index).ok_or_else(|| {
        Error::invalid(format!("image index {index} out of range for {} records", l.corpus.records.len()))
    })?;
    let anchors = l.model.anchors.anchors()?;
    let refined = l.model.refine_record(&anchors, rec)?;
    let args = json!({
        "corpus": io.corpus,
        "checkpoint": io.checkpoint,
        "image_index": index,
        "person_id": rec.person_id,
        "camera_id": rec.camera_id,
    });
    let body = attention_csv(&refined, l.corpus.grid().1);
    write_out(out, &csv_with_header(&l.manifest.config, &args, &body)?)
}
