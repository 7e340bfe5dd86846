use anchor_reid::config::RunConfig;
use anchor_reid::corpus::{generate_synthetic, SynthConfig};
use anchor_reid::objective::train_stage2;

#[test]
fn loss_falls_across_twenty_step_windows() {
    let corpus = generate_synthetic(&SynthConfig {
        num_ids: 16,
        images_per_id_cam: 4,
        grid_h: 4,
        grid_w: 4,
        dim: 16,
        proj_dim: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = RunConfig {
        num_anchors: 4,
        text_width: 16,
        text_layers: 1,
        text_heads: 2,
        n_blocks: 1,
        heads: 2,
        ffn_ratio: 2,
        ids_per_batch: 4,
        images_per_id: 4,
        lr: 3e-3,
        epochs: 40,
        ..RunConfig::default()
    };
    let out = train_stage2(&corpus, &cfg, None).unwrap();
    assert!(out.log.len() >= 80, "{} steps", out.log.len());
    assert!(out.log.iter().all(|r| r.losses.total.is_finite()));
    let windows: Vec<f64> = out
        .log
        .chunks_exact(20)
        .map(|w| w.iter().map(|r| r.losses.total - r.losses.i2t).sum::<f64>() / 20.0)
        .collect();
    assert!(windows.last().unwrap() < &(0.8 * windows[0]), "{windows:?}");
    for pair in windows.windows(2) {
        assert!(pair[1] < pair[0] * 1.02, "{windows:?}");
    }
}
