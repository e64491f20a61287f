//! Finite-difference check of the full network forward on a micro
//! configuration: every head's output is folded into one scalar through
//! fixed pseudo-random weights, and the tape gradients for a cross-section
//! of parameter tensors are compared against central differences.

use std::collections::BTreeMap;
use usplat::diff::gradcheck::grad_check;
use usplat::diff::{Graph, Tensor, Var};
use usplat::masking::{build_masks, visible_indices};
use usplat::network::{
    coarse_heads, decode, encode, fine_heads, point_and_camera_heads, ModelParams, NetConfig,
    TapeModel,
};

fn micro_cfg() -> NetConfig {
    NetConfig {
        d: 16,
        heads: 2,
        enc_depth: 1,
        dec_depth: 1,
        patch: 4,
        n_g: 3,
        views: 2,
        h: 16,
        w: 16,
        focal_prior: 20.0,
        half_extent: 1.0,
        offset_radius: 0.3,
    }
}

/// Weighted sum of all entries with a fixed pseudo-random pattern, so
/// symmetric gradients cannot cancel to zero.
fn probe(g: &mut Graph, v: Var, salt: u64) -> Var {
    let n: usize = g.shape(v).iter().product();
    let data: Vec<f32> = (0..n)
        .map(|i| ((i as u64).wrapping_mul(2654435761).wrapping_add(salt * 97) % 1000) as f32 / 1000.0 - 0.5)
        .collect();
    let shape = g.shape(v).to_vec();
    let c = g.constant(Tensor::new(shape, data));
    let prod = g.mul(v, c);
    g.sum_all(prod)
}

#[test]
fn full_network_matches_finite_differences() {
    let cfg = micro_cfg();
    let params = ModelParams::init(cfg, 42);

    // a cross-section of tensors covering the embedding, both attention
    // stacks, the latent tables, and every head
    let names: Vec<&str> = vec![
        "embed.b",
        "view_embed",
        "cam_tokens",
        "gauss_base",
        "mask_token",
        "enc.0.qkv.b",
        "enc.0.ln1.g",
        "dec.0.ff2.b",
        "head.cam_coarse.b2",
        "head.cam_final.b2",
        "head.gauss_coarse.b2",
        "head.anchor.b2",
        "head.point.b",
    ];
    let tensors: Vec<Tensor> = names.iter().map(|n| params.tensors[*n].clone()).collect();

    let masks = {
        let scores: Vec<Vec<f32>> = (0..cfg.views)
            .map(|v| (0..cfg.n_patches()).map(|p| ((p * 13 + v) % 7) as f32).collect())
            .collect();
        build_masks(cfg.n_patches(), &scores, 0.4, 0.5, 3)
    };

    let forward = move |g: &mut Graph, vars: &[Var]| -> Var {
        let overrides: BTreeMap<&str, Var> =
            names.iter().copied().zip(vars.iter().copied()).collect();
        let m = TapeModel::with_overrides(g, &params, &overrides);
        let mut toks = Vec::new();
        let mut idx = Vec::new();
        for v in 0..cfg.views {
            let vis = visible_indices(&masks.enc[v]);
            let data: Vec<f32> = (0..vis.len() * cfg.token_dim())
                .map(|i| ((i * 29 + v * 11) % 23) as f32 / 23.0 - 0.5)
                .collect();
            toks.push(g.constant(Tensor::new(vec![vis.len(), cfg.token_dim()], data)));
            idx.push(vis);
        }
        let enc = encode(g, &m, &toks, &idx).unwrap();
        let coarse = coarse_heads(g, &m, &enc);
        let dec = decode(g, &m, &enc, &masks).unwrap();
        let fine = fine_heads(g, &m, &dec);
        let pc = point_and_camera_heads(g, &m, &dec, &coarse);

        let mut terms = Vec::new();
        for v in 0..cfg.views {
            terms.push(probe(g, coarse.gauss_raw[v], 1 + v as u64));
            terms.push(probe(g, coarse.cams[v].q, 3 + v as u64));
            terms.push(probe(g, coarse.cams[v].t, 5 + v as u64));
            terms.push(probe(g, coarse.cams[v].f, 7 + v as u64));
            terms.push(probe(g, fine.anchor_gamma[v], 9 + v as u64));
            terms.push(probe(g, fine.sem_eps[v], 11 + v as u64));
            terms.push(probe(g, fine.app_mu[v], 13 + v as u64));
            terms.push(probe(g, fine.app_eps[v], 15 + v as u64));
            terms.push(probe(g, fine.app_gamma[v], 17 + v as u64));
            terms.push(probe(g, pc.p[v], 19 + v as u64));
            terms.push(probe(g, pc.u[v], 21 + v as u64));
            terms.push(probe(g, pc.cams_final[v].q, 23 + v as u64));
            terms.push(probe(g, pc.cams_final[v].t, 25 + v as u64));
            terms.push(probe(g, pc.cams_final[v].f, 27 + v as u64));
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = g.add(total, *t);
        }
        total
    };

    // forward is smooth everywhere (tanh/softmax/normalize); the step is
    // sized so f32 rounding in the deep forward stays below tolerance
    let report = grad_check(&forward, &tensors, 5e-3);
    assert!(
        report.max_rel_err < 1e-3,
        "max rel err {} at param {} index {}",
        report.max_rel_err,
        report.worst_param,
        report.worst_index
    );
}
