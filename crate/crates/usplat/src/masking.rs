//! Dual masking: patch tokenization, random encoder masking, and
//! geometry-aware decoder masking driven by rendered importance.
//!
//! Stage 1 hides a random fraction `rho_e` of the patch tokens before the
//! encoder. Stage 2 ranks the surviving tokens by pooled splat importance
//! and hides the top `rho_d` fraction before the decoder, forcing the
//! decoder to reconstruct exactly the regions the current Gaussian field
//! already explains well.

use crate::diff::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum MaskError {
    #[error("image {h}x{w} not divisible by patch size {patch}")]
    BadPatchGrid { h: usize, w: usize, patch: usize },
}

/// One view's image cut into flattened patch tokens, row-major over the
/// patch grid. Tokens are raw pixels (3·patch² values); the linear
/// embedding to the latent width lives in the network module.
#[derive(Clone, Debug)]
pub struct TokenGrid {
    /// `[n_p, 3·patch²]`, patch pixels flattened row-major, RGB interleaved.
    pub tokens: Tensor,
    pub patch: usize,
    /// Grid dims: `(h/patch, w/patch)`.
    pub gh: usize,
    pub gw: usize,
}

impl TokenGrid {
    pub fn n_patches(&self) -> usize {
        self.gh * self.gw
    }
}

/// Per-view masks for both stages. `enc[v][p]` is true when patch `p` of
/// view `v` is hidden from the encoder. `dec[v]` runs over the Stage-1
/// *visible* positions of that view, in ascending patch order.
#[derive(Clone, Debug)]
pub struct MaskSet {
    pub enc: Vec<Vec<bool>>,
    pub dec: Vec<Vec<bool>>,
    pub rho_e: f32,
    pub rho_d: f32,
}

impl MaskSet {
    /// Patch indices of view `v` that survive Stage 1, ascending.
    pub fn visible_indices(&self, v: usize) -> Vec<usize> {
        visible_indices(&self.enc[v])
    }

    /// Patch indices of view `v` that survive both stages, ascending.
    pub fn surviving_indices(&self, v: usize) -> Vec<usize> {
        self.visible_indices(v)
            .into_iter()
            .zip(&self.dec[v])
            .filter(|(_, &hidden)| !hidden)
            .map(|(p, _)| p)
            .collect()
    }
}

/// Ascending patch indices not hidden by an encoder mask.
pub fn visible_indices(enc_mask: &[bool]) -> Vec<usize> {
    enc_mask.iter().enumerate().filter(|(_, &h)| !h).map(|(p, _)| p).collect()
}

/// Cut an `[h·w, 3]` row-major image into patch tokens.
pub fn patchify(img: &Tensor, h: usize, w: usize, patch: usize) -> Result<TokenGrid, MaskError> {
    assert_eq!(img.shape, vec![h * w, 3], "image shape");
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(MaskError::BadPatchGrid { h, w, patch });
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = 3 * patch * patch;
    let mut tokens = vec![0.0f32; gh * gw * dim];
    for gy in 0..gh {
        for gx in 0..gw {
            let base = (gy * gw + gx) * dim;
            for py in 0..patch {
                let row = (gy * patch + py) * w + gx * patch;
                let dst = base + py * patch * 3;
                let src = row * 3;
                tokens[dst..dst + patch * 3].copy_from_slice(&img.data[src..src + patch * 3]);
            }
        }
    }
    Ok(TokenGrid { tokens: Tensor::new(vec![gh * gw, dim], tokens), patch, gh, gw })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(grid: &TokenGrid) -> Tensor {
    let (gh, gw, patch) = (grid.gh, grid.gw, grid.patch);
    let (h, w) = (gh * patch, gw * patch);
    let dim = 3 * patch * patch;
    let mut img = vec![0.0f32; h * w * 3];
    for gy in 0..gh {
        for gx in 0..gw {
            let base = (gy * gw + gx) * dim;
            for py in 0..patch {
                let row = (gy * patch + py) * w + gx * patch;
                let src = base + py * patch * 3;
                img[row * 3..row * 3 + patch * 3]
                    .copy_from_slice(&grid.tokens.data[src..src + patch * 3]);
            }
        }
    }
    Tensor::new(vec![h * w, 3], img)
}

/// Number of positions hidden by a ratio: `round(rho · n)`.
pub fn mask_budget(n: usize, rho: f32) -> usize {
    (rho as f64 * n as f64).round() as usize
}

/// Uniform random Stage-1 mask: exactly `round(rho_e·n_p)` positions
/// hidden, drawn without replacement from a stream derived from
/// `(seed, view)` so views are independent yet jointly reproducible.
pub fn random_encoder_mask(n_p: usize, rho_e: f32, seed: u64, view: usize) -> Vec<bool> {
    assert!((0.0..1.0).contains(&rho_e), "rho_e must be in [0,1)");
    let hidden = mask_budget(n_p, rho_e);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(view as u64);
    // partial Fisher-Yates: the first `hidden` slots end up a uniform sample
    let mut idx: Vec<usize> = (0..n_p).collect();
    for i in 0..hidden {
        let j = rng.gen_range(i..n_p);
        idx.swap(i, j);
    }
    let mut mask = vec![false; n_p];
    for &p in &idx[..hidden] {
        mask[p] = true;
    }
    mask
}

/// Mean rendered importance over each patch footprint.
pub fn pool_importance(j: &Tensor, gh: usize, gw: usize, patch: usize) -> Vec<f32> {
    let (h, w) = (gh * patch, gw * patch);
    assert_eq!(j.numel(), h * w, "importance map dims");
    let mut scores = vec![0.0f32; gh * gw];
    for gy in 0..gh {
        for gx in 0..gw {
            let mut acc = 0.0f64;
            for py in 0..patch {
                let row = (gy * patch + py) * w + gx * patch;
                for px in 0..patch {
                    acc += j.data[row + px] as f64;
                }
            }
            scores[gy * gw + gx] = (acc / (patch * patch) as f64) as f32;
        }
    }
    scores
}

/// Stage-2 mask over the Stage-1-visible positions: hides the top
/// `round(rho_d·n_vis)` by score, ties broken by ascending patch index.
/// Returned vector is aligned with `visible` (ascending patch order).
pub fn geometry_mask(scores: &[f32], visible: &[usize], rho_d: f32) -> Vec<bool> {
    assert!((0.0..1.0).contains(&rho_d), "rho_d must be in [0,1)");
    let hidden = mask_budget(visible.len(), rho_d);
    let mut order: Vec<usize> = (0..visible.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (scores[visible[a]], scores[visible[b]]);
        sb.partial_cmp(&sa).unwrap().then(visible[a].cmp(&visible[b]))
    });
    let mut mask = vec![false; visible.len()];
    for &slot in &order[..hidden] {
        mask[slot] = true;
    }
    mask
}

/// Build both stages for every view in one call.
pub fn build_masks(
    n_p: usize,
    importance_scores: &[Vec<f32>],
    rho_e: f32,
    rho_d: f32,
    seed: u64,
) -> MaskSet {
    let mut enc = Vec::with_capacity(importance_scores.len());
    let mut dec = Vec::with_capacity(importance_scores.len());
    for (v, scores) in importance_scores.iter().enumerate() {
        let e = random_encoder_mask(n_p, rho_e, seed, v);
        let vis = visible_indices(&e);
        dec.push(geometry_mask(scores, &vis, rho_d));
        enc.push(e);
    }
    MaskSet { enc, dec, rho_e, rho_d }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker_image(h: usize, w: usize) -> Tensor {
        let mut d = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let v = ((x * 7 + y * 13) % 29) as f32 / 29.0;
                d.extend_from_slice(&[v, 1.0 - v, (x as f32 + y as f32 * 0.5) / w as f32]);
            }
        }
        Tensor::new(vec![h * w, 3], d)
    }

    #[test]
    fn patch_count_64x64_patch8() {
        let g = patchify(&checker_image(64, 64), 64, 64, 8).unwrap();
        assert_eq!(g.n_patches(), 64);
        assert_eq!(g.tokens.shape, vec![64, 192]);
    }

    #[test]
    fn constant_image_gives_identical_tokens() {
        let img = Tensor::full(vec![16 * 16, 3], 0.4);
        let g = patchify(&img, 16, 16, 4).unwrap();
        let first = &g.tokens.data[..48];
        for p in 1..g.n_patches() {
            assert_eq!(&g.tokens.data[p * 48..(p + 1) * 48], first);
        }
    }

    #[test]
    fn patchify_round_trip_is_exact() {
        let img = checker_image(24, 32);
        let g = patchify(&img, 24, 32, 8).unwrap();
        let back = unpatchify(&g);
        assert_eq!(back.data, img.data);
        assert_eq!(back.shape, img.shape);
    }

    #[test]
    fn indivisible_dims_error() {
        assert!(matches!(
            patchify(&checker_image(10, 16), 10, 16, 8),
            Err(MaskError::BadPatchGrid { .. })
        ));
    }

    #[test]
    fn encoder_mask_budget_and_determinism() {
        let m = random_encoder_mask(64, 0.5, 7, 0);
        assert_eq!(m.iter().filter(|&&b| b).count(), 32);
        assert_eq!(m, random_encoder_mask(64, 0.5, 7, 0));
        assert_ne!(m, random_encoder_mask(64, 0.5, 7, 1));
        assert_ne!(m, random_encoder_mask(64, 0.5, 8, 0));
        let none = random_encoder_mask(64, 0.0, 7, 0);
        assert!(none.iter().all(|&b| !b));
    }

    #[test]
    fn pool_importance_examples() {
        // 2x2 patch with pixels [0,1,2,3] -> mean 1.5
        let j = Tensor::from_vec(vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(pool_importance(&j, 1, 1, 2), vec![1.5]);
        let uni = Tensor::full(vec![64], 0.7);
        for s in pool_importance(&uni, 2, 2, 4) {
            assert!((s - 0.7).abs() < 1e-6);
        }
        let doubled = Tensor::from_vec(vec![0.0, 2.0, 4.0, 6.0]);
        assert_eq!(pool_importance(&doubled, 1, 1, 2), vec![3.0]);
    }

    #[test]
    fn geometry_mask_ranks_by_score() {
        // visible scores [0.1, 0.9, 0.5, 0.7] -> hides the 0.9 and 0.7 slots
        let scores = vec![0.1, 0.9, 0.5, 0.7];
        let visible = vec![0, 1, 2, 3];
        let m = geometry_mask(&scores, &visible, 0.5);
        assert_eq!(m, vec![false, true, false, true]);
    }

    #[test]
    fn geometry_mask_tie_break_by_index() {
        let scores = vec![0.3; 6];
        let visible = vec![1, 2, 4, 5];
        let m = geometry_mask(&scores, &visible, 0.5);
        assert_eq!(m, vec![true, true, false, false]);
    }

    #[test]
    fn geometry_mask_zero_ratio_is_empty() {
        let m = geometry_mask(&[0.5, 0.2], &[0, 1], 0.0);
        assert_eq!(m, vec![false, false]);
    }

    #[test]
    fn geometry_mask_ignores_hidden_patches() {
        // max score sits at a Stage-1-hidden patch; it must never be picked
        let scores = vec![9.0, 0.1, 0.2, 0.3];
        let visible = vec![1, 2, 3];
        let m = geometry_mask(&scores, &visible, 0.4);
        assert_eq!(m, vec![false, false, true]);
    }

    #[test]
    fn two_stage_survivor_count() {
        for n_p in [16usize, 64, 100, 256] {
            let e = random_encoder_mask(n_p, 0.5, 3, 0);
            let vis = visible_indices(&e);
            let scores: Vec<f32> = (0..n_p).map(|i| (i as f32 * 0.37).sin()).collect();
            let d = geometry_mask(&scores, &vis, 0.5);
            let surviving = d.iter().filter(|&&h| !h).count();
            let expect = ((0.5 * (0.5 * n_p as f64).round()).round()) as usize;
            assert_eq!(surviving, expect, "n_p {n_p}");
        }
    }

    #[test]
    fn monotone_transform_invariance() {
        let scores: Vec<f32> = (0..32).map(|i| ((i * 29 + 11) % 37) as f32 / 37.0).collect();
        let visible: Vec<usize> = (0..32).filter(|i| i % 3 != 0).collect();
        let base = geometry_mask(&scores, &visible, 0.5);
        let transforms: Vec<Box<dyn Fn(f32) -> f32>> = vec![
            Box::new(|x| 3.0 * x + 1.0),
            Box::new(|x| x.exp()),
            Box::new(|x| x * x * x + x),
            Box::new(|x| (x + 2.0).ln()),
        ];
        for t in &transforms {
            let mapped: Vec<f32> = scores.iter().map(|&x| t(x)).collect();
            assert_eq!(geometry_mask(&mapped, &visible, 0.5), base);
        }
    }
}
