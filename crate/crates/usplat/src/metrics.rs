//! Evaluation metrics: image quality, segmentation, depth, and pose.

use crate::camera::{relative_rotation_error, CameraParams};
use crate::diff::Tensor;

/// Depth-ratio inlier threshold for the τ metric. The source tables report
/// τ without defining it; 1.25 is the community standard.
pub const TAU_THRESHOLD: f32 = 1.25;

/// PSNR cap for bit-identical images.
pub const PSNR_CAP: f32 = 99.0;

#[derive(Clone, Debug, serde::Serialize)]
pub struct MetricsReport {
    pub psnr: f32,
    pub ssim: f32,
    pub miou: f32,
    pub pix_acc: f32,
    /// Raw mean |d − d̃| / d̃; `None` when no valid depth pixels exist.
    pub abs_rel: Option<f32>,
    /// `abs_rel × 100` for comparison against percentage-style tables.
    pub abs_rel_pct: Option<f32>,
    /// Fraction of pixels with max(d/d̃, d̃/d) < 1.25.
    pub tau: Option<f32>,
    pub pose_auc_5: f32,
    pub pose_auc_10: f32,
    pub pose_auc_20: f32,
}

/// `−10·log10(MSE)` on [0,1] images, capped at 99 dB for exact matches.
pub fn psnr(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape, b.shape, "psnr dims");
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = (x - y) as f64;
            d * d
        })
        .sum::<f64>()
        / a.numel() as f64;
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (-10.0 * mse.log10()).min(PSNR_CAP as f64) as f32
}

/// Mean SSIM over valid 11×11 windows, standard constants, luminance on
/// the channel mean of `[h·w, c]` images.
pub fn ssim(a: &Tensor, b: &Tensor, h: usize, w: usize) -> f32 {
    assert_eq!(a.shape, b.shape, "ssim dims");
    let c = a.shape[1];
    let lum = |t: &Tensor, idx: usize| -> f64 {
        (0..c).map(|k| t.data[idx * c + k] as f64).sum::<f64>() / c as f64
    };
    const WIN: usize = 11;
    const C1: f64 = 0.01 * 0.01;
    const C2: f64 = 0.03 * 0.03;
    if h < WIN || w < WIN {
        return f32::NAN;
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    let n = (WIN * WIN) as f64;
    for y0 in 0..=(h - WIN) {
        for x0 in 0..=(w - WIN) {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0f64, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..WIN {
                for dx in 0..WIN {
                    let idx = (y0 + dy) * w + x0 + dx;
                    let (xa, xb) = (lum(a, idx), lum(b, idx));
                    sa += xa;
                    sb += xb;
                    saa += xa * xa;
                    sbb += xb * xb;
                    sab += xa * xb;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2))
                / ((ma * ma + mb * mb + C1) * (va + vb + C2));
            count += 1;
        }
    }
    (total / count as f64) as f32
}

/// Per-pixel argmax of cosine similarity against the class codes.
pub fn decode_semantics(features: &Tensor, codes: &Tensor) -> Vec<usize> {
    let d = codes.shape[1];
    assert_eq!(features.shape[1], d, "feature dims");
    let n_codes = codes.shape[0];
    features
        .data
        .chunks(d)
        .map(|f| {
            let norm_f: f64 = f.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            let mut best = (0usize, f64::NEG_INFINITY);
            for k in 0..n_codes {
                let row = &codes.data[k * d..(k + 1) * d];
                let dot: f64 = f.iter().zip(row).map(|(&a, &b)| a as f64 * b as f64).sum();
                let cos = dot / norm_f.max(1e-12); // codes are unit norm
                if cos > best.1 {
                    best = (k, cos);
                }
            }
            best.0
        })
        .collect()
}

/// Mean intersection-over-union and pixel accuracy over classes present in
/// either prediction or ground truth.
pub fn miou_pix_acc(pred: &[usize], gt: &[usize], n_classes: usize) -> (f32, f32) {
    assert_eq!(pred.len(), gt.len());
    let mut inter = vec![0usize; n_classes];
    let mut union = vec![0usize; n_classes];
    let mut correct = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        if p == g {
            inter[g] += 1;
            union[g] += 1;
            correct += 1;
        } else {
            union[p.min(n_classes - 1)] += 1;
            union[g] += 1;
        }
    }
    let mut iou_sum = 0.0f64;
    let mut present = 0usize;
    for k in 0..n_classes {
        if union[k] > 0 {
            iou_sum += inter[k] as f64 / union[k] as f64;
            present += 1;
        }
    }
    let miou = if present > 0 { (iou_sum / present as f64) as f32 } else { 1.0 };
    (miou, correct as f32 / pred.len() as f32)
}

/// Depth metrics over pixels where the reference depth is valid (> 0).
/// Returns `(abs_rel, tau)` or `None` when no pixel qualifies.
pub fn depth_metrics(pred: &Tensor, gt: &Tensor) -> Option<(f32, f32)> {
    assert_eq!(pred.numel(), gt.numel());
    let mut rel_sum = 0.0f64;
    let mut inliers = 0usize;
    let mut valid = 0usize;
    for (&d, &g) in pred.data.iter().zip(&gt.data) {
        if g <= 0.0 {
            continue;
        }
        valid += 1;
        rel_sum += ((d - g).abs() / g) as f64;
        if d > 0.0 {
            let ratio = (d / g).max(g / d);
            if ratio < TAU_THRESHOLD {
                inliers += 1;
            }
        }
    }
    if valid == 0 {
        return None;
    }
    Some(((rel_sum / valid as f64) as f32, inliers as f32 / valid as f32))
}

/// Area under the accuracy curve of pairwise relative-rotation errors up
/// to `threshold_deg`: for each unordered camera pair the per-pair AUC is
/// `max(0, 1 − err/θ)`, the exact integral of the step accuracy curve.
pub fn pose_auc(pred: &[CameraParams], gt: &[CameraParams], threshold_deg: f32) -> f32 {
    assert_eq!(pred.len(), gt.len());
    assert!(pred.len() >= 2, "pose auc needs at least two cameras");
    let mut total = 0.0f64;
    let mut pairs = 0usize;
    for i in 0..pred.len() {
        for j in (i + 1)..pred.len() {
            let rp = crate::camera::relative_pose(&pred[i], &pred[j]);
            let rg = crate::camera::relative_pose(&gt[i], &gt[j]);
            let err = relative_rotation_error(&rp, &rg);
            total += (1.0 - (err / threshold_deg) as f64).max(0.0);
            pairs += 1;
        }
    }
    (total / pairs as f64) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::CameraParams;
    use crate::math::quat_from_axis_angle;

    #[test]
    fn psnr_examples() {
        let a = Tensor::full(vec![64, 3], 0.5);
        assert_eq!(psnr(&a, &a), PSNR_CAP);
        // MSE 0.01 -> 20 dB
        let b = Tensor::full(vec![64, 3], 0.6);
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-4);
    }

    #[test]
    fn ssim_identity_and_range() {
        let mut data = Vec::new();
        for i in 0..(16 * 16) {
            let v = ((i * 37) % 100) as f32 / 100.0;
            data.extend_from_slice(&[v, v * 0.5, 1.0 - v]);
        }
        let a = Tensor::new(vec![256, 3], data);
        let s = ssim(&a, &a, 16, 16);
        assert!((s - 1.0).abs() < 1e-6);
        let b = Tensor::full(vec![256, 3], 0.3);
        let sb = ssim(&a, &b, 16, 16);
        assert!((-1.0..1.0).contains(&sb));
    }

    #[test]
    fn semantics_round_trip() {
        let codes = crate::scene::class_codes(4, 3);
        let d = codes.shape[1];
        let labels = vec![2usize, 0, 3, 1, 1];
        let mut feat = Vec::new();
        for &l in &labels {
            // scaled copies: cosine argmax must be scale-invariant
            feat.extend(codes.data[l * d..(l + 1) * d].iter().map(|&x| x * 2.5));
        }
        let f = Tensor::new(vec![5, d], feat);
        assert_eq!(decode_semantics(&f, &codes), labels);
        let (miou, acc) = miou_pix_acc(&labels, &labels, 4);
        assert_eq!((miou, acc), (1.0, 1.0));
    }

    #[test]
    fn miou_counts_disagreement() {
        let pred = vec![0usize, 0, 1, 1];
        let gt = vec![0usize, 1, 1, 1];
        let (miou, acc) = miou_pix_acc(&pred, &gt, 2);
        // class 0: inter 1, union 2; class 1: inter 2, union 3
        assert!((miou - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-6);
        assert!((acc - 0.75).abs() < 1e-6);
    }

    #[test]
    fn depth_metrics_examples() {
        let gt = Tensor::from_vec(vec![1.0, 2.0, 0.0, 4.0]);
        let pred = Tensor::from_vec(vec![1.1, 2.0, 9.0, 6.0]);
        let (rel, tau) = depth_metrics(&pred, &gt).unwrap();
        // valid pixels: (1.1 vs 1), (2 vs 2), (6 vs 4); rel = (0.1 + 0 + 0.5)/3
        assert!((rel - 0.2).abs() < 1e-6);
        // ratios 1.1, 1.0, 1.5 -> 2 of 3 under 1.25
        assert!((tau - 2.0 / 3.0).abs() < 1e-6);
        let none = depth_metrics(&pred, &Tensor::from_vec(vec![0.0; 4]));
        assert!(none.is_none());
    }

    #[test]
    fn pose_auc_examples() {
        let gt = vec![
            CameraParams::identity([50.0, 50.0]),
            CameraParams::new(quat_from_axis_angle([0.0, 1.0, 0.0], 0.4), [0.1, 0.0, 0.0], [50.0, 50.0]),
            CameraParams::new(quat_from_axis_angle([1.0, 0.0, 0.0], -0.3), [0.0, 0.2, 0.0], [50.0, 50.0]),
        ];
        assert_eq!(pose_auc(&gt, &gt, 5.0), 1.0);
        // rotate one prediction by 2.5 degrees: the two pairs touching it
        // lose half their area at the 5-degree threshold
        let mut pred = gt.clone();
        pred[1] = CameraParams::new(
            crate::math::quat_mul(quat_from_axis_angle([0.0, 0.0, 1.0], 2.5f32.to_radians()), gt[1].q),
            gt[1].t,
            gt[1].f,
        );
        let auc = pose_auc(&pred, &gt, 5.0);
        assert!((auc - (1.0 + 0.5 + 0.5) / 3.0).abs() < 1e-3, "auc {auc}");
        assert!(pose_auc(&pred, &gt, 10.0) > auc);
    }
}
