//! Overfit the full pipeline on a miniature scene and watch the loss fall.
//!
//! Run with: cargo run --release --example tiny_overfit

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
        steps: 60,
        checkpoint_every: 0,
        seed: 3,
        ..RunConfig::default()
    };
    let steps = cfg.steps;
    let mut trainer = Trainer::new(cfg).expect("trainer setup");

    let mut log = Vec::new();
    trainer.train(steps, Some(&mut log), None).expect("training");

    // the JSON-lines log carries every loss term per step
    let lines: Vec<serde_json::Value> = String::from_utf8(log)
        .expect("utf-8 log")
        .lines()
        .map(|l| serde_json::from_str(l).expect("json record"))
        .collect();
    for record in lines.iter().step_by(10) {
        println!(
            "step {:>3}: total {:.4} (rgb {:.4}, sem {:.4}, pose {:.4})",
            record["step"], record["total"], record["rgb"], record["sem"], record["pose"]
        );
    }

    let first = lines.first().unwrap()["total"].as_f64().unwrap();
    let last = lines.last().unwrap()["total"].as_f64().unwrap();
    println!("total loss {first:.4} -> {last:.4} over {steps} steps");
    assert!(last < first, "loss should decrease while overfitting");
}
