//! Shared oracle helpers for integration tests.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use usplat::raster::{mahal2, Splat2D, ALPHA_CLAMP, MAHAL_CUTOFF};

/// Reference compositor: per pixel, scan all splats in depth order and
/// blend, with no binning and no early exit. Shares only the published
/// alpha formula with the production path.
pub fn naive_composite(splats: &[Splat2D], channels: usize, h: usize, w: usize) -> Vec<f32> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        splats[a].depth.partial_cmp(&splats[b].depth).unwrap().then(a.cmp(&b))
    });
    let mut out = vec![0.0f32; h * w * (channels + 1)];
    for py in 0..h {
        for px in 0..w {
            let pix = py * w + px;
            let mut t = 1.0f32;
            for &i in &order {
                let s = &splats[i];
                let dx = px as f32 - s.mean2d[0];
                let dy = py as f32 - s.mean2d[1];
                let m2 = mahal2(s.cov2d, dx, dy);
                if !(m2 <= MAHAL_CUTOFF) {
                    continue;
                }
                let alpha = (s.sigma * (-0.5 * m2).exp()).min(ALPHA_CLAMP);
                let wgt = alpha * t;
                for ch in 0..channels {
                    out[pix * (channels + 1) + ch] += wgt * s.payload[ch];
                }
                out[pix * (channels + 1) + channels] += wgt;
                t *= 1.0 - alpha;
            }
        }
    }
    out
}

pub fn random_scene(rng: &mut ChaCha8Rng, n: usize, channels: usize) -> Vec<Splat2D> {
    (0..n)
        .map(|_| {
            let a = rng.gen_range(0.3..8.0f32);
            let c = rng.gen_range(0.3..8.0f32);
            let b = rng.gen_range(-0.25..0.25f32) * (a * c).sqrt();
            Splat2D {
                mean2d: [rng.gen_range(-6.0..22.0), rng.gen_range(-6.0..22.0)],
                cov2d: [a, b, c],
                depth: rng.gen_range(0.1..10.0),
                sigma: rng.gen_range(0.01..0.999),
                payload: (0..channels).map(|_| rng.gen_range(0.0..1.0)).collect(),
            }
        })
        .collect()
}
