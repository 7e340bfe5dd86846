use anchor_reid::checkpoint;
use anchor_reid::config::RunConfig;
use anchor_reid::corpus::{generate_synthetic, read_corpus, write_corpus, Corpus, SynthConfig};
use anchor_reid::gradsuite::micro_config;
use anchor_reid::objective::train_stage2;
use anchor_reid::retrieval::{feature_variant_eval, Variant};

fn small_corpus() -> Corpus {
    generate_synthetic(&SynthConfig {
        num_ids: 8,
        images_per_id_cam: 3,
        grid_h: 4,
        grid_w: 2,
        dim: 8,
        proj_dim: 4,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_run(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        epochs: 2,
        ids_per_batch: 2,
        images_per_id: 2,
        i2t_aux_head: false,
        ..micro_config()
    }
}

#[test]
fn corpus_file_round_trip_is_bit_exact() {
    let corpus = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.sfc");
    write_corpus(&path, &corpus).unwrap();
    let back = read_corpus(&path).unwrap();
    assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    assert_eq!(back.records.len(), corpus.records.len());
    for (a, b) in back.records.iter().zip(&corpus.records) {
        assert_eq!((a.person_id, a.camera_id, a.split), (b.person_id, b.camera_id, b.split));
        assert_eq!(a.tokens.shape(), b.tokens.shape());
    }
}

#[test]
fn checkpoint_round_trip_preserves_model_and_scores() {
    let corpus = small_corpus();
    let cfg = small_run(1);
    let trained = train_stage2(&corpus, &cfg, None).unwrap();
    let bytes = checkpoint::to_bytes(&trained.model, &cfg, trained.steps).unwrap();
    let (model, manifest) = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(manifest.config, cfg);
    assert_eq!(manifest.steps, trained.steps);
    assert_eq!(checkpoint::to_bytes(&model, &cfg, trained.steps).unwrap(), bytes);
    for v in [Variant::ClsOnly, Variant::RefinedOnly, Variant::Fused { wr: 2.0, wi: 0.2 }] {
        let a = feature_variant_eval(&trained.model, &corpus, v, 5).unwrap();
        let b = feature_variant_eval(&model, &corpus, v, 5).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn same_seed_same_checkpoint_bytes() {
    let corpus = small_corpus();
    let dir = tempfile::tempdir().unwrap();
    let (pa, pb) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    train_stage2(&corpus, &small_run(4), Some(&pa)).unwrap();
    train_stage2(&corpus, &small_run(4), Some(&pb)).unwrap();
    assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
    let pc = dir.path().join("c.ckpt");
    train_stage2(&corpus, &small_run(5), Some(&pc)).unwrap();
    assert_ne!(std::fs::read(&pa).unwrap(), std::fs::read(&pc).unwrap());
}

#[test]
fn truncated_checkpoint_rejected() {
    let corpus = small_corpus();
    let cfg = small_run(2);
    let trained = train_stage2(&corpus, &cfg, None).unwrap();
    let bytes = checkpoint::to_bytes(&trained.model, &cfg, trained.steps).unwrap();
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    assert!(checkpoint::from_bytes(&bytes[..3]).is_err());
}
