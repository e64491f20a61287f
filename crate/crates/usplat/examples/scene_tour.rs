//! Generate a synthetic desk scene and inspect its oracle annotations.
//!
//! Run with: cargo run --release --example scene_tour

use usplat::io::write_ppm;
use usplat::scene::{gen_scene, make_teachers, PoseNoise, SceneConfig};

fn main() {
    let cfg = SceneConfig { views: 3, h: 48, w: 48, classes: 4, primitives: 6, focal: 52.0 };
    let scene = gen_scene(&cfg, 11).expect("scene generation");

    println!("{} views of {}x{} pixels", scene.cameras.len(), scene.h, scene.w);
    for (v, cam) in scene.cameras.iter().enumerate() {
        println!(
            "view {v}: t = [{:+.2} {:+.2} {:+.2}], f = [{:.1} {:.1}]",
            cam.t[0], cam.t[1], cam.t[2], cam.f[0], cam.f[1]
        );
    }

    // exact per-pixel depth and class labels come with the scene
    let depths = &scene.gt_depth[0].data;
    let (near, far) = depths.iter().fold((f32::MAX, f32::MIN), |(lo, hi), &d| {
        (lo.min(d), hi.max(d))
    });
    println!("view 0 depth range: {near:.2} .. {far:.2}");
    let mut counts = vec![0usize; cfg.classes + 1];
    for &c in &scene.gt_sem[0] {
        counts[c] += 1;
    }
    println!("view 0 class histogram (last = background): {counts:?}");

    // oracle teachers: noisy-or-exact poses, point maps, semantic codes
    let teachers = make_teachers(&scene, PoseNoise { rot_deg: 2.0, trans: 0.02 });
    println!(
        "teacher point map rows per view: {}, feature dim {}",
        teachers.points[0].rows(),
        teachers.features[0].cols()
    );

    let out = std::env::temp_dir().join("usplat_scene_view0.ppm");
    write_ppm(&out, &scene.images[0].data, scene.h, scene.w).expect("write ppm");
    println!("wrote {}", out.display());
}
