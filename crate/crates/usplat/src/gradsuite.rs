//! The standard battery of finite-difference gradient checks, shared by the
//! `gradcheck` CLI subcommand and the acceptance tests.

use crate::diff::gradcheck::grad_check;
use crate::diff::{Graph, Tensor, Var};
use crate::loss::{loss_point_view, loss_pose, loss_rgb_view, loss_sem_view};
use crate::masking::{build_masks, visible_indices};
use crate::network::{
    coarse_heads, decode, encode, fine_heads, point_and_camera_heads, ModelParams, NetConfig,
    TapeModel,
};
use crate::raster::{project_gaussians_diff, rasterize_diff, CamVars, RasterSettings};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, serde::Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn run(
    name: &'static str,
    f: &dyn Fn(&mut Graph, &[Var]) -> Var,
    params: &[Tensor],
    step: f32,
    tolerance: f64,
) -> CheckResult {
    let report = grad_check(f, params, step);
    CheckResult { name, max_rel_err: report.max_rel_err, tolerance, pass: report.max_rel_err <= tolerance }
}

/// Run every check; any failing entry means gradients and finite
/// differences disagree beyond tolerance.
pub fn run_suite() -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(424242);
    let mut results = Vec::new();

    // linear maps are exact under central differences; dyadic values and a
    // power-of-two step keep every f32 operation exact
    let lin_params =
        vec![Tensor::new(vec![3, 2], (0..6).map(|i| i as f32 * 0.25 - 0.75).collect())];
    results.push(run(
        "linear",
        &|g, vs| {
            let w = g.constant(Tensor::new(vec![2, 1], vec![0.5, -1.25]));
            let y = g.matmul(vs[0], w);
            g.sum_all(y)
        },
        &lin_params,
        0.0009765625,
        1e-6,
    ));

    // small tanh MLP (smooth ops, tight tolerance)
    let mlp_params = vec![
        Tensor::new(vec![4, 5], (0..20).map(|_| rng.gen_range(-0.8..0.8)).collect()),
        Tensor::new(vec![5, 1], (0..5).map(|_| rng.gen_range(-0.8..0.8)).collect()),
    ];
    results.push(run(
        "mlp",
        &|g, vs| {
            let x = g.constant(Tensor::new(vec![3, 4], (0..12).map(|i| (i as f32 * 0.21).sin()).collect()));
            let h = g.matmul(x, vs[0]);
            let h = g.tanh(h);
            let y = g.matmul(h, vs[1]);
            g.sum_all(y)
        },
        &mlp_params,
        5e-3,
        1e-4,
    ));

    // bilinear sampling w.r.t. image and fractional coordinates
    let bil_params = vec![
        Tensor::new(vec![36, 2], (0..72).map(|_| rng.gen_range(-0.4..0.4)).collect()),
        Tensor::new(vec![4, 2], vec![1.3, 2.6, 4.2, 0.7, 2.5, 3.4, 0.6, 1.8]),
    ];
    results.push(run(
        "bilinear",
        &|g, vs| {
            let s = g.bilinear(vs[0], vs[1], 6, 6);
            g.sum_all(s)
        },
        &bil_params,
        5e-2,
        1e-3,
    ));

    // full projection + compositing chain on a 5-Gaussian micro-scene, with
    // the camera itself among the checked parameters
    let raster_params = {
        let mut r = ChaCha8Rng::seed_from_u64(17);
        let mu: Vec<f32> = (0..5)
            .flat_map(|_| {
                vec![r.gen_range(-0.15..0.15), r.gen_range(-0.15..0.15), r.gen_range(0.8..1.6)]
            })
            .collect();
        vec![
            Tensor::new(vec![5, 3], mu),
            Tensor::new(vec![5, 4], (0..20).map(|_| r.gen_range(-1.0..1.0)).collect()),
            Tensor::new(vec![5, 3], (0..15).map(|_| r.gen_range(-2.2..-1.4)).collect()),
            Tensor::new(vec![5], (0..5).map(|_| r.gen_range(-0.8..0.8)).collect()),
            Tensor::new(vec![5, 3], (0..15).map(|_| r.gen_range(0.1..0.9)).collect()),
            Tensor::from_vec(vec![0.98, 0.05, -0.08, 0.02]),
            Tensor::from_vec(vec![0.02, -0.03, 0.05]),
            Tensor::from_vec(vec![12.0f32.ln(), 12.5f32.ln()]),
        ]
    };
    results.push(run(
        "rasterizer",
        &|g, vs| {
            let r = g.normalize_rows(vs[1], 1e-12);
            let s = g.exp(vs[2]);
            let sigma = g.logistic(vs[3]);
            let q2 = g.reshape(vs[5], vec![1, 4]);
            let qn = g.normalize_rows(q2, 1e-12);
            let q = g.reshape(qn, vec![4]);
            let f = g.exp(vs[7]);
            let cam = CamVars { q, t: vs[6], f };
            let proj = project_gaussians_diff(g, vs[0], r, s, cam, 8, 8);
            let sigma_k = g.gather0(sigma, &proj.kept);
            let pay_k = g.gather0(vs[4], &proj.kept);
            let depth = g.value(proj.depth).data.clone();
            let st = RasterSettings { early_exit: 0.0, ..RasterSettings::new(8, 8) };
            let out = rasterize_diff(g, proj.mean2d, proj.cov2d, sigma_k, pay_k, &depth, st);
            g.mean_all(out)
        },
        &raster_params,
        1e-3,
        1e-3,
    ));

    // rgb loss (mean-centered images keep the SSIM variance terms away
    // from f32 cancellation; offsets keep the L1 kink out of the stencil)
    let (h, w) = (12, 12);
    let gt: Vec<f32> = (0..h * w * 3).map(|i| ((i as f32 * 0.37).sin()) * 0.3).collect();
    let rend: Vec<f32> = gt.iter().enumerate().map(|(i, &v)| v + 0.12 + 0.16 * ((i % 7) as f32 / 7.0)).collect();
    let rgb_params = vec![Tensor::new(vec![h * w, 3], rend)];
    let gt_t = Tensor::new(vec![h * w, 3], gt);
    results.push(run(
        "loss_rgb",
        &move |g, vs| {
            let gt = g.constant(gt_t.clone());
            loss_rgb_view(g, vs[0], gt, h, w)
        },
        &rgb_params,
        2e-2,
        1e-3,
    ));

    // semantic cosine loss
    let sem_params = vec![Tensor::new(vec![9, 8], (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect())];
    let sem_t = Tensor::new(vec![9, 8], (0..72).map(|i| ((i as f32) * 0.13).cos()).collect());
    results.push(run(
        "loss_sem",
        &move |g, vs| {
            let t = g.constant(sem_t.clone());
            loss_sem_view(g, vs[0], t)
        },
        &sem_params,
        1e-2,
        1e-3,
    ));

    // pose Huber: residuals are kept a safe margin away from the knee at
    // |r| = delta so the FD stencil stays within one branch
    let pose_vals: Vec<f32> = (0..27).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let residuals: Vec<f32> = (0..27)
        .map(|i| {
            let mag = if i % 2 == 0 { 0.03 + 0.04 * ((i % 5) as f32 / 5.0) } else { 0.15 + 0.2 * ((i % 7) as f32 / 7.0) };
            if i % 3 == 0 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    let pose_params = vec![Tensor::new(vec![3, 9], pose_vals.clone())];
    let pose_t = Tensor::new(
        vec![3, 9],
        pose_vals.iter().zip(&residuals).map(|(p, r)| p - r).collect(),
    );
    results.push(run(
        "loss_pose",
        &move |g, vs| {
            let t = g.constant(pose_t.clone());
            loss_pose(g, vs[0], t)
        },
        &pose_params,
        5e-4,
        1e-3,
    ));

    // confidence-weighted point loss (offsets clear both kinks)
    let pt_t = Tensor::new(vec![20, 3], (0..60).map(|i| (i as f32 * 0.17).sin()).collect());
    let ut_t = Tensor::new(vec![20], vec![1.0; 20]);
    let point_params = vec![
        Tensor::new(vec![20, 3], pt_t.data.iter().map(|v| v + 0.15).collect()),
        Tensor::new(vec![20], vec![1.3; 20]),
    ];
    results.push(run(
        "loss_point",
        &move |g, vs| {
            let pt = g.constant(pt_t.clone());
            let ut = g.constant(ut_t.clone());
            loss_point_view(g, vs[0], vs[1], pt, ut)
        },
        &point_params,
        2e-3,
        1e-3,
    ));

    // micro-config full network (a parameter cross-section)
    results.push(network_check());

    results
}

fn network_check() -> CheckResult {
    let cfg = NetConfig {
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
    };
    let params = ModelParams::init(cfg, 42);
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
    let f = move |g: &mut Graph, vars: &[Var]| -> Var {
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
        // fixed pseudo-random weights stop symmetric gradients cancelling
        let probe = |g: &mut Graph, v: Var, salt: u64| -> Var {
            let n: usize = g.shape(v).iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| {
                    ((i as u64).wrapping_mul(2654435761).wrapping_add(salt * 97) % 1000) as f32
                        / 1000.0
                        - 0.5
                })
                .collect();
            let shape = g.shape(v).to_vec();
            let c = g.constant(Tensor::new(shape, data));
            let prod = g.mul(v, c);
            g.sum_all(prod)
        };
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
    run("network_micro", &f, &tensors, 5e-3, 1e-3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_check_passes() {
        for r in run_suite() {
            assert!(r.pass, "{}: {} > {}", r.name, r.max_rel_err, r.tolerance);
        }
    }
}
