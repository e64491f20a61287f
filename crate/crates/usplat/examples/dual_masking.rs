//! Walk through the two masking stages: a random encoder mask, then a
//! geometry-guided decoder mask over the surviving tokens.
//!
//! Run with: cargo run --release --example dual_masking

use usplat::masking::{build_masks, mask_budget, pool_importance};
use usplat::diff::Tensor;

fn bits(mask: &[bool]) -> String {
    mask.iter().map(|&hidden| if hidden { 'x' } else { '.' }).collect()
}

fn main() {
    // 8x8 patch grid; a synthetic importance map peaking near the center
    let (gh, gw, patch) = (8, 8, 4);
    let (h, w) = (gh * patch, gw * patch);
    let j: Vec<f32> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f32, (i % w) as f32);
            let (dy, dx) = (y - h as f32 / 2.0, x - w as f32 / 2.0);
            (-(dx * dx + dy * dy) / 120.0).exp()
        })
        .collect();
    let scores = pool_importance(&Tensor::new(vec![h * w, 1], j), gh, gw, patch);

    let n_p = gh * gw;
    let (rho_e, rho_d) = (0.5, 0.5);
    let masks = build_masks(n_p, &[scores.clone()], rho_e, rho_d, 9);

    println!("patch grid {gh}x{gw}, rho_e = {rho_e}, rho_d = {rho_d}");
    println!("stage 1 hides {} of {n_p} tokens at random:", mask_budget(n_p, rho_e));
    for row in 0..gh {
        println!("  {}", bits(&masks.enc[0][row * gw..(row + 1) * gw]));
    }

    let visible = masks.visible_indices(0);
    let surviving = masks.surviving_indices(0);
    println!(
        "stage 2 hides the {} most geometry-important of the {} visible:",
        visible.len() - surviving.len(),
        visible.len()
    );
    let mut grid = vec!['x'; n_p];
    for &p in &surviving {
        grid[p] = '.';
    }
    for row in 0..gh {
        let line: String = grid[row * gw..(row + 1) * gw].iter().collect();
        println!("  {line}");
    }
    println!(
        "surviving tokens: {} = round({rho_d} * round({rho_e} * {n_p}))",
        surviving.len()
    );

    // decoder masking ranks by score, so any monotone rescale is a no-op
    let squashed: Vec<f32> = scores.iter().map(|s| (3.0 * s).tanh()).collect();
    let masks2 = build_masks(n_p, &[squashed], rho_e, rho_d, 9);
    assert_eq!(masks.dec[0], masks2.dec[0]);
    println!("decoder mask unchanged under a monotone score transform");
}
