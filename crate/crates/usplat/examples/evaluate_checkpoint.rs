//! Train briefly, round-trip a checkpoint, and report evaluation metrics.
//!
//! Run with: cargo run --release --example evaluate_checkpoint

use usplat::config::RunConfig;
use usplat::trainer::Trainer;

fn main() {
    let cfg = RunConfig {
        views: 2,
        eval_views: 1,
        height: 32,
        width: 32,
        classes: 3,
        primitives: 4,
        patch: 8,
        latent_dim: 32,
        heads: 4,
        enc_depth: 2,
        dec_depth: 1,
        n_g: 16,
        steps: 30,
        checkpoint_every: 0,
        seed: 12,
        ..RunConfig::default()
    };
    let steps = cfg.steps;
    let mut trainer = Trainer::new(cfg).expect("trainer setup");
    trainer.train(steps, None, None).expect("training");

    let path = std::env::temp_dir().join("usplat_example.ckpt");
    trainer.save_checkpoint(&path).expect("save checkpoint");
    println!("saved {}", path.display());

    // a restored trainer carries both parameters and config
    let restored = Trainer::from_checkpoint(&path).expect("load checkpoint");
    let report = restored.evaluate().expect("evaluation");

    let s = &report.source;
    println!("source views:   psnr {:.2} dB, ssim {:.3}, miou {:.3}", s.psnr, s.ssim, s.miou);
    if let Some(h) = &report.held_out {
        println!("held-out views: psnr {:.2} dB, ssim {:.3}, miou {:.3}", h.psnr, h.ssim, h.miou);
    }
    if let (Some(abs_rel), Some(tau)) = (s.abs_rel, s.tau) {
        println!("depth: abs-rel {abs_rel:.4}, tau<1.25 fraction {tau:.3}");
    }
    println!(
        "pose: auc@5 {:.2}, auc@10 {:.2}, max pairwise rotation error {:.2} deg",
        s.pose_auc_5, s.pose_auc_10, report.max_pairwise_rre_deg
    );

    // the same restored state must evaluate identically to the live trainer
    let live = trainer.evaluate().expect("evaluation");
    assert_eq!(live.source.psnr, report.source.psnr, "checkpoint round-trip drifted");
    println!("round-trip check: restored metrics match the live trainer");
    let _ = std::fs::remove_file(&path);
}
