//! Training objectives: photometric, semantic, geometric, and
//! pose-conditioned recalibration losses, plus their weighted total.
//!
//! Every builder returns a scalar `Var` in the raw form its contract
//! states (per-view means for RGB, pixel sums elsewhere); the optimizer
//! consumes [`training_objective`], which rescales the pixel sums to
//! per-pixel means so all terms live on comparable scales.

use crate::camera::Z_MIN;
use crate::diff::{Graph, Var};
use crate::raster::{project_points_diff, CamVars};

pub const LAMBDA_POSE: f32 = 10.0;
pub const LAMBDA_POINT: f32 = 1.0;
pub const HUBER_DELTA: f32 = 0.1;
/// Weight of the (1 − SSIM) term standing in for a perceptual metric.
pub const SSIM_WEIGHT: f32 = 0.2;
pub const SSIM_WINDOW: usize = 11;
/// Off-frame tolerance in pixels before a reprojection counts as invalid.
pub const REPROJ_TOLERANCE: f32 = 2.0;

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("non-finite loss term `{0}` = {1}")]
    NonFiniteLoss(&'static str, f32),
}

/// Scalar tape nodes for each term, pre-weighting.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub rgb: Var,
    pub sem: Var,
    pub pose: Var,
    pub point: Var,
    pub recalib_geo: Var,
    pub recalib_sem: Var,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct LossReport {
    pub rgb: f32,
    pub sem: f32,
    pub pose: f32,
    pub point: f32,
    pub recalib_geo: f32,
    pub recalib_sem: f32,
    pub total: f32,
    pub lambda_pose: f32,
    pub lambda_point: f32,
}

/// Mean per-pixel L1 plus `SSIM_WEIGHT·(1 − SSIM)` for one view pair.
/// Callers sum over views.
pub fn loss_rgb_view(g: &mut Graph, rend: Var, gt: Var, h: usize, w: usize) -> Var {
    assert_eq!(g.shape(rend), g.shape(gt), "rgb loss dims");
    let diff = g.sub(rend, gt);
    let l1 = g.abs(diff);
    let l1 = g.mean_all(l1);
    let dssim = one_minus_ssim(g, rend, gt, h, w);
    let dssim = g.scale(dssim, SSIM_WEIGHT);
    g.add(l1, dssim)
}

/// Differentiable mean SSIM distance on the channel-mean luminance,
/// uniform 11×11 windows, standard constants.
fn one_minus_ssim(g: &mut Graph, a: Var, b: Var, h: usize, w: usize) -> Var {
    const C1: f32 = 0.01 * 0.01;
    const C2: f32 = 0.03 * 0.03;
    let c = g.shape(a)[1] as f32;
    let lum_a = g.row_sum(a);
    let lum_a = g.scale(lum_a, 1.0 / c);
    let lum_b = g.row_sum(b);
    let lum_b = g.scale(lum_b, 1.0 / c);
    let k = SSIM_WINDOW;
    let kernel = vec![1.0 / (k * k) as f32; k * k];
    let conv = |g: &mut Graph, x: Var| g.conv2d_valid(x, &kernel, k, h, w);
    let aa = g.mul(lum_a, lum_a);
    let bb = g.mul(lum_b, lum_b);
    let ab = g.mul(lum_a, lum_b);
    let mu_a = conv(g, lum_a);
    let mu_b = conv(g, lum_b);
    let m_aa = conv(g, aa);
    let m_bb = conv(g, bb);
    let m_ab = conv(g, ab);
    let mu_aa = g.mul(mu_a, mu_a);
    let mu_bb = g.mul(mu_b, mu_b);
    let mu_ab = g.mul(mu_a, mu_b);
    let var_a = g.sub(m_aa, mu_aa);
    let var_b = g.sub(m_bb, mu_bb);
    let cov = g.sub(m_ab, mu_ab);
    let n1 = g.scale(mu_ab, 2.0);
    let n1 = g.offset(n1, C1);
    let n2 = g.scale(cov, 2.0);
    let n2 = g.offset(n2, C2);
    let num = g.mul(n1, n2);
    let d1 = g.add(mu_aa, mu_bb);
    let d1 = g.offset(d1, C1);
    let d2 = g.add(var_a, var_b);
    let d2 = g.offset(d2, C2);
    let den = g.mul(d1, d2);
    let ssim_map = g.div(num, den);
    let mean = g.mean_all(ssim_map);
    let neg = g.neg(mean);
    g.offset(neg, 1.0)
}

/// `Σ_pixels (1 − cos(a, b))` for one view; zero rendered vectors score 1.
pub fn loss_sem_view(g: &mut Graph, rend: Var, teacher: Var) -> Var {
    let cos = row_cosine(g, rend, teacher);
    let neg = g.neg(cos);
    let ones = g.offset(neg, 1.0);
    g.sum_all(ones)
}

fn row_cosine(g: &mut Graph, a: Var, b: Var) -> Var {
    let prod = g.mul(a, b);
    let dot = g.row_sum(prod);
    let aa = g.mul(a, a);
    let na = g.row_sum(aa);
    let na = g.offset(na, 1e-24);
    let na = g.sqrt(na);
    let bb = g.mul(b, b);
    let nb = g.row_sum(bb);
    let nb = g.offset(nb, 1e-24);
    let nb = g.sqrt(nb);
    let den = g.mul(na, nb);
    let den = g.offset(den, 1e-12);
    g.div(dot, den)
}

/// Element-wise Huber (δ = 0.1) on the stacked 9-vector camera residuals,
/// summed over views and components.
pub fn loss_pose(g: &mut Graph, c_final: Var, c_teacher: Var) -> Var {
    assert_eq!(g.shape(c_final), g.shape(c_teacher), "pose loss dims");
    let diff = g.sub(c_final, c_teacher);
    let h = g.huber(diff, HUBER_DELTA);
    g.sum_all(h)
}

/// `Σ_j [ Ũ_j·‖P̃_j − P_j‖₂ + |Ũ_j − U_j| ]` for one view.
/// The norm is smoothed as `sqrt(‖d‖² + ε²) − ε` so it is exactly zero at
/// the fixed point and differentiable there.
pub fn loss_point_view(g: &mut Graph, p: Var, u: Var, p_teacher: Var, u_teacher: Var) -> Var {
    const EPS: f32 = 1e-6;
    let d = g.sub(p, p_teacher);
    let sq = g.mul(d, d);
    let rs = g.row_sum(sq);
    let rs = g.offset(rs, EPS * EPS);
    let norm = g.sqrt(rs);
    let norm = g.offset(norm, -EPS);
    let weighted = g.mul(norm, u_teacher);
    let dist = g.sum_all(weighted);
    let du = g.sub(u_teacher, u);
    let du = g.abs(du);
    let conf = g.sum_all(du);
    g.add(dist, conf)
}

/// Pose-conditioned recalibration for one view: reproject the predicted
/// point map through the final camera, warp the rendered image/features to
/// those coordinates, and compare against the originals. Invalid
/// reprojections (behind the camera, or beyond a 2 px frame tolerance) are
/// skipped and the sums renormalized to full-frame scale. Returns
/// `(geo, sem)`; an all-invalid view contributes zero to both.
pub fn loss_recalib_view(
    g: &mut Graph,
    i_rend: Var,
    f_rend: Var,
    p: Var,
    cam: CamVars,
    h: usize,
    w: usize,
) -> (Var, Var) {
    let n = g.shape(p)[0];
    assert_eq!(n, h * w, "point map must be per-pixel");
    let (coords, z) = project_points_diff(g, p, cam, w, h);
    let cv = g.value(coords).data.clone();
    let valid: Vec<usize> = (0..n)
        .filter(|&j| {
            let (u, v) = (cv[2 * j], cv[2 * j + 1]);
            z[j] > Z_MIN
                && u >= -REPROJ_TOLERANCE
                && u <= (w - 1) as f32 + REPROJ_TOLERANCE
                && v >= -REPROJ_TOLERANCE
                && v <= (h - 1) as f32 + REPROJ_TOLERANCE
        })
        .collect();
    if valid.is_empty() {
        eprintln!("recalibration: view has no valid reprojections, contributing 0");
        let zero = g.constant(crate::diff::Tensor::scalar(0.0));
        return (zero, zero);
    }
    let renorm = n as f32 / valid.len() as f32;
    let coords_v = g.gather0(coords, &valid);

    let i_at = g.gather0(i_rend, &valid);
    let i_warp = g.bilinear(i_rend, coords_v, h, w);
    let d = g.sub(i_at, i_warp);
    let d = g.abs(d);
    let geo = g.sum_all(d);
    let geo = g.scale(geo, renorm);

    let f_at = g.gather0(f_rend, &valid);
    let f_warp = g.bilinear(f_rend, coords_v, h, w);
    let cos = row_cosine(g, f_warp, f_at);
    let neg = g.neg(cos);
    let ones = g.offset(neg, 1.0);
    let sem = g.sum_all(ones);
    let sem = g.scale(sem, renorm);
    (geo, sem)
}

/// Weighted total per the report invariant:
/// `total = rgb + sem + (λ_pose·pose + λ_point·point) + recalib`.
/// Errors with the offending term name on any non-finite part.
pub fn total_loss(
    g: &mut Graph,
    parts: &LossParts,
    lambda_pose: f32,
    lambda_point: f32,
) -> Result<(Var, LossReport), LossError> {
    let read = |g: &Graph, v: Var, name: &'static str| -> Result<f32, LossError> {
        let x = g.value(v).data[0];
        if x.is_finite() {
            Ok(x)
        } else {
            Err(LossError::NonFiniteLoss(name, x))
        }
    };
    let rgb = read(g, parts.rgb, "rgb")?;
    let sem = read(g, parts.sem, "sem")?;
    let pose = read(g, parts.pose, "pose")?;
    let point = read(g, parts.point, "point")?;
    let rgeo = read(g, parts.recalib_geo, "recalib_geo")?;
    let rsem = read(g, parts.recalib_sem, "recalib_sem")?;

    let wp = g.scale(parts.pose, lambda_pose);
    let wpt = g.scale(parts.point, lambda_point);
    let t = g.add(parts.rgb, parts.sem);
    let t = g.add(t, wp);
    let t = g.add(t, wpt);
    let t = g.add(t, parts.recalib_geo);
    let total = g.add(t, parts.recalib_sem);
    let total_v = read(g, total, "total")?;
    Ok((
        total,
        LossReport {
            rgb,
            sem,
            pose,
            point,
            recalib_geo: rgeo,
            recalib_sem: rsem,
            total: total_v,
            lambda_pose,
            lambda_point,
        },
    ))
}

/// Optimization objective: same weighted combination, but with each
/// pixel-sum term divided by `h·w·v` (and per-view terms by `v`) so every
/// term is a per-pixel/per-view mean of comparable magnitude. A uniform
/// rescale of the raw total would let the pixel sums drown the RGB mean.
pub fn training_objective(
    g: &mut Graph,
    parts: &LossParts,
    lambda_pose: f32,
    lambda_point: f32,
    h: usize,
    w: usize,
    views: usize,
) -> Var {
    let per_view = 1.0 / views as f32;
    let per_pixel = per_view / (h * w) as f32;
    let rgb = g.scale(parts.rgb, per_view);
    let sem = g.scale(parts.sem, per_pixel);
    let pose = g.scale(parts.pose, lambda_pose * per_view);
    let point = g.scale(parts.point, lambda_point * per_pixel);
    let rgeo = g.scale(parts.recalib_geo, per_pixel);
    let rsem = g.scale(parts.recalib_sem, per_pixel);
    let t = g.add(rgb, sem);
    let t = g.add(t, pose);
    let t = g.add(t, point);
    let t = g.add(t, rgeo);
    g.add(t, rsem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraParams;
    use crate::diff::Tensor;
    use crate::scene::class_codes;

    fn textured(h: usize, w: usize, phase: f32) -> Tensor {
        let mut d = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let v = (x as f32 * 0.37 + y as f32 * 0.19 + phase).sin() * 0.4 + 0.5;
                d.extend_from_slice(&[v, 1.0 - v * 0.7, v * v]);
            }
        }
        Tensor::new(vec![h * w, 3], d)
    }

    #[test]
    fn rgb_zero_on_identical_images() {
        let mut g = Graph::new();
        let img = g.constant(textured(16, 16, 0.3));
        let l = loss_rgb_view(&mut g, img, img, 16, 16);
        assert!(g.value(l).data[0].abs() < 1e-6);
    }

    #[test]
    fn rgb_constant_offset_gives_l1() {
        // a constant 0.1 offset pins the L1 term at exactly 0.1; the SSIM
        // term is checked against the independent scalar implementation
        let ta = Tensor::full(vec![256, 3], 0.3);
        let tb = Tensor::full(vec![256, 3], 0.4);
        let oracle = crate::metrics::ssim(&ta, &tb, 16, 16);
        let mut g = Graph::new();
        let a = g.constant(ta);
        let b = g.constant(tb);
        let l = loss_rgb_view(&mut g, a, b, 16, 16);
        let want = 0.1 + SSIM_WEIGHT * (1.0 - oracle);
        assert!((g.value(l).data[0] - want).abs() < 1e-5, "{} vs {want}", g.value(l).data[0]);
    }

    #[test]
    fn rgb_ssim_matches_scalar_oracle() {
        let ta = textured(16, 16, 0.0);
        let tb = textured(16, 16, 0.9);
        let oracle = crate::metrics::ssim(&ta, &tb, 16, 16);
        let mut g = Graph::new();
        let a = g.constant(ta.clone());
        let b = g.constant(tb.clone());
        let l = loss_rgb_view(&mut g, a, b, 16, 16);
        let l1: f32 = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(&x, &y)| (x - y).abs())
            .sum::<f32>()
            / ta.numel() as f32;
        let want = l1 + SSIM_WEIGHT * (1.0 - oracle);
        assert!((g.value(l).data[0] - want).abs() < 1e-5, "{} vs {want}", g.value(l).data[0]);
    }

    #[test]
    fn sem_fixed_points() {
        let codes = class_codes(2, 9);
        let d = codes.shape[1];
        let row = |k: usize, s: f32| -> Vec<f32> {
            codes.data[k * d..(k + 1) * d].iter().map(|&x| x * s).collect()
        };
        let mut g = Graph::new();
        let t = g.constant(Tensor::new(vec![2, d], [row(0, 1.0), row(1, 1.0)].concat()));
        let same = loss_sem_view(&mut g, t, t);
        assert!(g.value(same).data[0].abs() < 1e-5);
        // doubled features: cosine is scale invariant
        let scaled = g.constant(Tensor::new(vec![2, d], [row(0, 2.0), row(1, 2.0)].concat()));
        let l = loss_sem_view(&mut g, scaled, t);
        assert!(g.value(l).data[0].abs() < 1e-5);
        // orthogonal unit features -> 1 per pixel
        let swapped = g.constant(Tensor::new(vec![2, d], [row(1, 1.0), row(0, 1.0)].concat()));
        let l = loss_sem_view(&mut g, swapped, t);
        assert!((g.value(l).data[0] - 2.0).abs() < 1e-5);
        // zero rendered vector scores 1
        let zero = g.constant(Tensor::zeros(vec![2, d]));
        let l = loss_sem_view(&mut g, zero, t);
        assert!((g.value(l).data[0] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn pose_and_point_fixed_points() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::new(vec![2, 9], (0..18).map(|i| i as f32 * 0.1).collect()));
        let pose = loss_pose(&mut g, c, c);
        assert_eq!(g.value(pose).data[0], 0.0);
        let p = g.constant(Tensor::new(vec![4, 3], (0..12).map(|i| i as f32 * 0.2).collect()));
        let u = g.constant(Tensor::full(vec![4], 1.0));
        let point = loss_point_view(&mut g, p, u, p, u);
        assert!(g.value(point).data[0].abs() < 1e-7);
    }

    #[test]
    fn point_distance_scales_with_teacher_confidence() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(vec![4, 3]));
        let pt = g.constant(Tensor::full(vec![4, 3], 0.5));
        let u1 = g.constant(Tensor::full(vec![4], 1.0));
        let u2 = g.constant(Tensor::full(vec![4], 2.0));
        let l1 = loss_point_view(&mut g, p, u1, pt, u1);
        let l2 = loss_point_view(&mut g, p, u2, pt, u2);
        // same confidence residual (0); distance term doubles with Ũ
        assert!((g.value(l2).data[0] - 2.0 * g.value(l1).data[0]).abs() < 1e-5);
    }

    #[test]
    fn pose_huber_hand_value() {
        // scalar residual 2δ: huber = δ(|r| − δ/2) = 0.1·(0.2 − 0.05) = 0.015
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(0.2));
        let b = g.constant(Tensor::scalar(0.0));
        let l = loss_pose(&mut g, a, b);
        assert!((g.value(l).data[0] - 0.015).abs() < 1e-7);
    }

    fn test_cam_vars(g: &mut Graph, cam: &CameraParams) -> CamVars {
        CamVars {
            q: g.constant(Tensor::from_vec(cam.q.to_vec())),
            t: g.constant(Tensor::from_vec(cam.t.to_vec())),
            f: g.constant(Tensor::from_vec(cam.f.to_vec())),
        }
    }

    #[test]
    fn recalib_zero_for_consistent_geometry() {
        // P = exact backprojection of a depth map through the render camera
        // => every point reprojects to its own pixel, the warp is the
        // identity, and both terms vanish for any image.
        let (h, w) = (12, 12);
        let cam = crate::scene::look_at([0.4, 0.2, -2.0], [0.0, 0.0, 0.0], [15.0, 15.0]);
        let mut pts = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let z = 1.5 + 0.1 * ((x + y) % 5) as f32;
                let p = crate::camera::unproject(&cam, (x as f32, y as f32), z, w, h);
                pts.extend_from_slice(&p);
            }
        }
        let mut g = Graph::new();
        let img = g.constant(textured(h, w, 1.2));
        let codes = class_codes(3, 4);
        let d = codes.shape[1];
        let mut feat = Vec::new();
        for i in 0..h * w {
            let k = i % 3;
            feat.extend_from_slice(&codes.data[k * d..(k + 1) * d]);
        }
        let f = g.constant(Tensor::new(vec![h * w, d], feat));
        let p = g.constant(Tensor::new(vec![h * w, 3], pts));
        let cv = test_cam_vars(&mut g, &cam);
        let (geo, sem) = loss_recalib_view(&mut g, img, f, p, cv, h, w);
        assert!(g.value(geo).data[0].abs() < 1e-3, "geo {}", g.value(geo).data[0]);
        assert!(g.value(sem).data[0].abs() < 1e-2, "sem {}", g.value(sem).data[0]);
    }

    #[test]
    fn recalib_constants_are_fixed_points() {
        // constant color: warp of a constant is the constant
        let (h, w) = (8, 8);
        let cam = crate::scene::look_at([0.0, 0.0, -2.0], [0.0, 0.0, 0.0], [10.0, 10.0]);
        let mut g = Graph::new();
        let img = g.constant(Tensor::full(vec![h * w, 3], 0.6));
        let f = {
            let codes = class_codes(1, 7);
            let dim = codes.shape[1];
            let mut feat = Vec::new();
            for _ in 0..h * w {
                feat.extend_from_slice(&codes.data[..dim]);
            }
            g.constant(Tensor::new(vec![h * w, dim], feat))
        };
        // arbitrary (inconsistent) points still give zero on constants
        let p = g.constant(Tensor::new(
            vec![h * w, 3],
            (0..h * w * 3).map(|i| (i as f32 * 0.11).sin() * 0.5).collect(),
        ));
        let cv = test_cam_vars(&mut g, &cam);
        let (geo, sem) = loss_recalib_view(&mut g, img, f, p, cv, h, w);
        assert!(g.value(geo).data[0].abs() < 1e-5);
        assert!(g.value(sem).data[0].abs() < 1e-4);
    }

    #[test]
    fn total_weights_and_nonfinite_detection() {
        let mut g = Graph::new();
        let zero = g.constant(Tensor::scalar(0.0));
        let one = g.constant(Tensor::scalar(1.0));
        let parts = LossParts {
            rgb: zero,
            sem: zero,
            pose: one,
            point: zero,
            recalib_geo: zero,
            recalib_sem: zero,
        };
        let (_, rep) = total_loss(&mut g, &parts, LAMBDA_POSE, LAMBDA_POINT).unwrap();
        assert_eq!(rep.total, 10.0);
        let parts2 = LossParts { pose: zero, point: one, ..parts };
        let (_, rep2) = total_loss(&mut g, &parts2, LAMBDA_POSE, LAMBDA_POINT).unwrap();
        assert_eq!(rep2.total, 1.0);
        let nan = g.constant(Tensor::scalar(f32::NAN));
        let bad = LossParts { sem: nan, ..parts };
        match total_loss(&mut g, &bad, LAMBDA_POSE, LAMBDA_POINT) {
            Err(LossError::NonFiniteLoss(name, _)) => assert_eq!(name, "sem"),
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }
}
