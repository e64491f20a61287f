//! Hand-build a small Gaussian field and rasterize RGB, depth, and
//! importance maps from it.
//!
//! Run with: cargo run --release --example splat_render

use usplat::camera::CameraParams;
use usplat::gaussians::{GaussianLevel, RenderGaussian, SEM_DIM};
use usplat::io::{write_plane, write_ppm};
use usplat::raster::{render, ChannelSelect, FieldRef, RasterSettings};

fn blob(center: [f32; 3], color: [f32; 3], scale: f32) -> RenderGaussian {
    RenderGaussian {
        center,
        color,
        sigma: 0.85,
        r: [1.0, 0.0, 0.0, 0.0],
        s: [scale; 3],
        gamma: vec![0.0; SEM_DIM],
        level: GaussianLevel::Appearance,
    }
}

fn main() {
    let field = vec![
        blob([0.0, 0.0, 2.0], [0.9, 0.2, 0.2], 0.12),
        blob([-0.4, 0.2, 2.5], [0.2, 0.8, 0.3], 0.18),
        blob([0.35, -0.25, 3.0], [0.25, 0.35, 0.9], 0.25),
        blob([0.0, 0.0, 6.0], [0.9, 0.9, 0.8], 1.4), // backdrop
    ];

    let cam = CameraParams::identity([80.0, 80.0]);
    let st = RasterSettings::new(96, 96);
    let maps = render(
        &cam,
        &FieldRef::Render(&field),
        ChannelSelect { rgb: true, depth: true, importance: true, ..Default::default() },
        &st,
    )
    .expect("render");

    let covered = maps.alpha.iter().filter(|&&a| a > 0.5).count();
    println!("{} of {} pixels more than half covered", covered, st.h * st.w);
    let mid = (st.h / 2) * st.w + st.w / 2;
    println!(
        "center pixel: rgb = [{:.3} {:.3} {:.3}], depth = {:.3}",
        maps.rgb[mid * 3],
        maps.rgb[mid * 3 + 1],
        maps.rgb[mid * 3 + 2],
        maps.depth[mid]
    );

    let dir = std::env::temp_dir();
    write_ppm(&dir.join("usplat_blobs.ppm"), &maps.rgb, st.h, st.w).expect("ppm");
    write_plane(&dir.join("usplat_blobs_depth.plane"), &maps.depth, st.h, st.w, 1)
        .expect("plane");
    println!("wrote renders to {}", dir.display());
}
