//! Depth-sorted alpha-blending splat renderer with analytic gradients.
//!
//! The forward path projects 3D Gaussians to 2D splats (EWA-style covariance
//! projection), bins them to pixels, sorts per pixel by depth (ties broken by
//! input index), and composites front to back. A splat contributes only
//! inside its 3-sigma Mahalanobis ellipse; the brute-force oracle in the test
//! suite applies the same support rule so the two paths agree to float
//! precision.
//!
//! Gradients: projection is built from generic tape primitives; per-pixel
//! compositing is a single custom tape node with a hand-written backward,
//! validated by finite differences. The depth order is treated as constant
//! during backward.

use crate::camera::{principal_point, CameraParams, Z_MIN};
use crate::diff::{Graph, Tensor, Var};
use crate::gaussians::{GeometricGaussian, RenderGaussian, SEM_DIM};
use crate::math::*;

/// Covariance regularizer added to the projected 2x2 (px^2).
pub const COV_REG: f32 = 0.1;
/// Per-contribution opacity clamp.
pub const ALPHA_CLAMP: f32 = 0.999;
/// Squared Mahalanobis support cutoff. Contributions outside this radius are
/// dropped in every compositing path (production, tape, oracle); 46 puts the
/// dropped mass below 1e-10 of sigma so the forward stays numerically smooth
/// for finite-difference checks while binning stays bounded.
pub const MAHAL_CUTOFF: f32 = 46.0;
/// Transmittance early-exit threshold for the production path. Chosen so
/// the truncated tail stays below 1e-6 for unit-bounded payloads.
pub const EARLY_EXIT: f32 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("non-finite Gaussian parameter at index {0}")]
    NonFiniteInput(usize),
    #[error("backward called without a recorded forward pass")]
    NoForwardTape,
}

#[derive(Clone, Copy, Debug)]
pub struct RasterSettings {
    pub h: usize,
    pub w: usize,
    /// Transmittance threshold below which blending stops; 0 disables.
    pub early_exit: f32,
    /// When set, a contribution uses sigma directly instead of the
    /// falloff-modulated alpha (the literal reading of the importance-map
    /// blending formula); kept for oracle comparisons.
    pub pure_sigma: bool,
}

impl RasterSettings {
    pub fn new(h: usize, w: usize) -> Self {
        RasterSettings { h, w, early_exit: EARLY_EXIT, pure_sigma: false }
    }
}

/// A Gaussian projected to the image plane.
#[derive(Clone, Debug)]
pub struct Splat2D {
    pub mean2d: [f32; 2],
    /// Upper triangle (a, b, c) of the symmetric 2x2 covariance, px^2.
    pub cov2d: [f32; 3],
    /// Camera-frame z, used as the sort key.
    pub depth: f32,
    pub sigma: f32,
    /// Composited channels (any mix of color / semantics / importance / z).
    pub payload: Vec<f32>,
}

/// Project one Gaussian; `None` when culled (behind the camera or more than
/// 3 sigma outside the frame).
pub fn project_gaussian(
    cam: &CameraParams,
    mu: Vec3,
    r: Quat,
    s: Vec3,
    w: usize,
    h: usize,
) -> Option<(f32, f32, [f32; 3], f32)> {
    let pc = cam.to_camera(mu);
    let z = pc[2];
    if z <= Z_MIN {
        return None;
    }
    let (cx, cy) = principal_point(w, h);
    let u = cam.f[0] * pc[0] / z + cx;
    let v = cam.f[1] * pc[1] / z + cy;

    // Sigma_cam = W Sigma_world W^T, W = R_cam R(r) acting on diag(s^2)
    let rot = quat_to_mat(r);
    let m = mat_mul(&cam.rotation(), &rot);
    let mut cov_cam = [[0.0f32; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                cov_cam[i][j] += m[i][k] * s[k] * s[k] * m[j][k];
            }
        }
    }
    // J = d(u,v)/d(x,y,z)
    let (fx, fy) = (cam.f[0], cam.f[1]);
    let j00 = fx / z;
    let j02 = -fx * pc[0] / (z * z);
    let j11 = fy / z;
    let j12 = -fy * pc[1] / (z * z);
    let row0 = [j00 * cov_cam[0][0] + j02 * cov_cam[2][0], j00 * cov_cam[0][1] + j02 * cov_cam[2][1], j00 * cov_cam[0][2] + j02 * cov_cam[2][2]];
    let row1 = [j11 * cov_cam[1][0] + j12 * cov_cam[2][0], j11 * cov_cam[1][1] + j12 * cov_cam[2][1], j11 * cov_cam[1][2] + j12 * cov_cam[2][2]];
    let a = row0[0] * j00 + row0[2] * j02 + COV_REG;
    let b = row1[0] * j00 + row1[2] * j02;
    let c = row1[1] * j11 + row1[2] * j12 + COV_REG;

    let radius = splat_radius([a, b, c]);
    if u + radius < 0.0 || u - radius > (w - 1) as f32 || v + radius < 0.0 || v - radius > (h - 1) as f32 {
        return None;
    }
    Some((u, v, [a, b, c], z))
}

/// Support radius from the 2x2 covariance (largest eigenvalue scaled by the
/// Mahalanobis cutoff). Splats whose support misses the frame entirely are
/// culled; the same radius bounds per-pixel binning.
pub fn splat_radius(cov: [f32; 3]) -> f32 {
    let [a, b, c] = cov;
    let mid = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    MAHAL_CUTOFF.sqrt() * (mid + disc).max(0.0).sqrt()
}

fn alpha_of(splat_sigma: f32, mahal2: f32, pure_sigma: bool) -> Option<f32> {
    // NaN-safe: a degenerate covariance can produce a non-finite distance,
    // which must be treated as out of support, never as a contribution.
    if !(mahal2 <= MAHAL_CUTOFF) {
        return None;
    }
    let a = if pure_sigma { splat_sigma } else { splat_sigma * (-0.5 * mahal2).exp() };
    Some(a.min(ALPHA_CLAMP))
}

/// Squared Mahalanobis distance of a pixel offset under a 2x2 covariance.
/// Evaluated in f64: the f32 determinant of a large near-degenerate
/// covariance cancels to zero while the f64 products of f32 entries are
/// exact.
pub fn mahal2(cov: [f32; 3], dx: f32, dy: f32) -> f32 {
    let (a, b, c) = (cov[0] as f64, cov[1] as f64, cov[2] as f64);
    let (dx, dy) = (dx as f64, dy as f64);
    let det = a * c - b * b;
    ((c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det) as f32
}

/// Forward compositing core shared by the plain renderer and the tape node.
/// Returns channel maps ([h*w, channels]) with alpha appended as the last
/// channel, plus the per-pixel contribution lists (in composite order,
/// truncated at early exit).
pub fn composite(splats: &[Splat2D], channels: usize, st: &RasterSettings) -> (Vec<f32>, Vec<Vec<u32>>) {
    let (h, w) = (st.h, st.w);
    let npix = h * w;
    // Splats are walked once in global depth order; per pixel that restricts
    // to exactly the front-to-back order, so no per-pixel sort is needed and
    // pixels whose transmittance already fell below the early-exit threshold
    // cost one comparison per overlapping splat.
    let mut order: Vec<u32> = (0..splats.len() as u32).collect();
    order.sort_by(|&a, &b| {
        splats[a as usize]
            .depth
            .partial_cmp(&splats[b as usize].depth)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut out = vec![0.0f32; npix * (channels + 1)];
    let mut lists: Vec<Vec<u32>> = vec![Vec::new(); npix];
    let mut trans = vec![1.0f32; npix];
    let mut live = npix;
    for &i in &order {
        if st.early_exit > 0.0 && live == 0 {
            break;
        }
        let s = &splats[i as usize];
        let r = splat_radius(s.cov2d);
        let x0 = (s.mean2d[0] - r).floor().max(0.0) as usize;
        let x1 = ((s.mean2d[0] + r).ceil() as isize).min(w as isize - 1);
        let y0 = (s.mean2d[1] - r).floor().max(0.0) as usize;
        let y1 = ((s.mean2d[1] + r).ceil() as isize).min(h as isize - 1);
        if x1 < 0 || y1 < 0 {
            continue;
        }
        for py in y0..=(y1 as usize) {
            for px in x0..=(x1 as usize) {
                let pix = py * w + px;
                let transmittance = trans[pix];
                if st.early_exit > 0.0 && transmittance < st.early_exit {
                    continue;
                }
                let dx = px as f32 - s.mean2d[0];
                let dy = py as f32 - s.mean2d[1];
                let m2 = mahal2(s.cov2d, dx, dy);
                let Some(alpha) = alpha_of(s.sigma, m2, st.pure_sigma) else { continue };
                let wgt = alpha * transmittance;
                let row = &mut out[pix * (channels + 1)..(pix + 1) * (channels + 1)];
                for ch in 0..channels {
                    row[ch] += wgt * s.payload[ch];
                }
                row[channels] += wgt;
                lists[pix].push(i);
                trans[pix] = transmittance * (1.0 - alpha);
                if st.early_exit > 0.0 && trans[pix] < st.early_exit {
                    live -= 1;
                }
            }
        }
    }
    (out, lists)
}

/// Per-view rendered planes. Channel layout used throughout: rgb(3), then
/// semantics (64), then importance (1), then depth (1), each present only
/// when selected; alpha is always produced.
#[derive(Clone, Copy, Debug, Default)]
pub struct ChannelSelect {
    pub rgb: bool,
    pub sem: bool,
    pub importance: bool,
    pub depth: bool,
}

#[derive(Clone, Debug)]
pub struct RenderedMaps {
    pub h: usize,
    pub w: usize,
    pub rgb: Vec<f32>,
    pub sem: Vec<f32>,
    pub importance: Vec<f32>,
    pub depth: Vec<f32>,
    pub alpha: Vec<f32>,
}

impl RenderedMaps {
    fn zeros(h: usize, w: usize) -> Self {
        RenderedMaps {
            h,
            w,
            rgb: vec![0.0; h * w * 3],
            sem: vec![0.0; h * w * SEM_DIM],
            importance: vec![0.0; h * w],
            depth: vec![0.0; h * w],
            alpha: vec![0.0; h * w],
        }
    }
}

/// Inputs accepted by the plain renderer.
pub enum FieldRef<'a> {
    Render(&'a [RenderGaussian]),
    Geometric(&'a [GeometricGaussian]),
}

/// Non-tape rendering of a field (evaluation, CLI, tests).
pub fn render(
    cam: &CameraParams,
    field: &FieldRef,
    select: ChannelSelect,
    st: &RasterSettings,
) -> Result<RenderedMaps, RasterError> {
    let mut splats = Vec::new();
    let mut channels = 0usize;
    let mut layout = Vec::new(); // (offset into payload, plane kind)
    if select.rgb {
        layout.push(("rgb", channels));
        channels += 3;
    }
    if select.sem {
        layout.push(("sem", channels));
        channels += SEM_DIM;
    }
    if select.importance {
        layout.push(("imp", channels));
        channels += 1;
    }
    if select.depth {
        layout.push(("depth", channels));
        channels += 1;
    }
    let mut push = |idx: usize,
                    mu: Vec3,
                    r: Quat,
                    s: Vec3,
                    sigma: f32,
                    color: Option<&Vec3>,
                    gamma: Option<&[f32]>,
                    beta: f32|
     -> Result<(), RasterError> {
        let finite = mu.iter().chain(s.iter()).chain(r.iter()).all(|v| v.is_finite())
            && sigma.is_finite()
            && beta.is_finite();
        if !finite {
            return Err(RasterError::NonFiniteInput(idx));
        }
        if let Some((u, v, cov, z)) = project_gaussian(cam, mu, r, s, st.w, st.h) {
            let mut payload = vec![0.0f32; channels];
            let mut off = 0;
            if select.rgb {
                let c = color.copied().unwrap_or([0.0; 3]);
                payload[off..off + 3].copy_from_slice(&c);
                off += 3;
            }
            if select.sem {
                if let Some(g) = gamma {
                    payload[off..off + SEM_DIM].copy_from_slice(&g[..SEM_DIM]);
                }
                off += SEM_DIM;
            }
            if select.importance {
                payload[off] = beta;
                off += 1;
            }
            if select.depth {
                payload[off] = z;
            }
            splats.push(Splat2D { mean2d: [u, v], cov2d: cov, depth: z, sigma, payload });
        }
        Ok(())
    };
    match field {
        FieldRef::Render(gs) => {
            for (i, g) in gs.iter().enumerate() {
                push(i, g.center, g.r, g.s, g.sigma, Some(&g.color), Some(&g.gamma), 0.0)?;
            }
        }
        FieldRef::Geometric(gs) => {
            for (i, g) in gs.iter().enumerate() {
                push(i, g.mu, g.r, g.s, g.sigma, None, None, g.beta)?;
            }
        }
    }
    let (flat, _) = composite(&splats, channels, st);
    let mut maps = RenderedMaps::zeros(st.h, st.w);
    for pix in 0..st.h * st.w {
        let row = &flat[pix * (channels + 1)..(pix + 1) * (channels + 1)];
        let mut off = 0;
        if select.rgb {
            maps.rgb[pix * 3..pix * 3 + 3].copy_from_slice(&row[off..off + 3]);
            off += 3;
        }
        if select.sem {
            maps.sem[pix * SEM_DIM..(pix + 1) * SEM_DIM].copy_from_slice(&row[off..off + SEM_DIM]);
            off += SEM_DIM;
        }
        if select.importance {
            maps.importance[pix] = row[off];
            off += 1;
        }
        if select.depth {
            maps.depth[pix] = row[off];
        }
        maps.alpha[pix] = row[channels];
    }
    Ok(maps)
}

/// Importance maps for masking: beta composited under the blend weights.
pub fn importance_for_masking(
    cams: &[CameraParams],
    field: &[GeometricGaussian],
    h: usize,
    w: usize,
) -> Result<Vec<Vec<f32>>, RasterError> {
    let st = RasterSettings::new(h, w);
    cams.iter()
        .map(|cam| {
            render(
                cam,
                &FieldRef::Geometric(field),
                ChannelSelect { importance: true, ..Default::default() },
                &st,
            )
            .map(|m| m.importance)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Tape integration
// ---------------------------------------------------------------------------

/// Recorded state for the compositing tape node.
pub struct RasterTape {
    pub(crate) mean2d: Var,
    pub(crate) cov2d: Var,
    pub(crate) sigma: Var,
    pub(crate) payload: Var,
    pub(crate) settings: RasterSettings,
    pub(crate) channels: usize,
    /// Per-pixel contributing splat indices, composite order.
    pub(crate) lists: Vec<Vec<u32>>,
}

impl RasterTape {
    pub(crate) fn inputs(&self) -> [Var; 4] {
        [self.mean2d, self.cov2d, self.sigma, self.payload]
    }

    /// Hand-written backward through the compositing recurrence. The depth
    /// order and support decisions are constants of the forward pass.
    pub(crate) fn input_grads(&self, graph: &Graph, g_out: &Tensor) -> Vec<(Var, Tensor)> {
        let means = graph.value(self.mean2d);
        let covs = graph.value(self.cov2d);
        let sigmas = graph.value(self.sigma);
        let payloads = graph.value(self.payload);
        let n = sigmas.numel();
        let c = self.channels;
        let (h, w) = (self.settings.h, self.settings.w);

        let mut d_mean = vec![0.0f32; n * 2];
        let mut d_cov = vec![0.0f32; n * 3];
        let mut d_sigma = vec![0.0f32; n];
        let mut d_payload = vec![0.0f32; n * c];

        for pix in 0..h * w {
            let list = &self.lists[pix];
            if list.is_empty() {
                continue;
            }
            let px = (pix % w) as f32;
            let py = (pix / w) as f32;
            let g_row = &g_out.data[pix * (c + 1)..(pix + 1) * (c + 1)];
            let g_alpha_map = g_row[c];

            // forward replay to recover alphas and weights
            let k = list.len();
            let mut alphas = vec![0.0f32; k];
            let mut clamped = vec![false; k];
            let mut m2s = vec![0.0f32; k];
            let mut weights = vec![0.0f32; k];
            let mut trans = vec![0.0f32; k];
            let mut t = 1.0f32;
            for (j, &i) in list.iter().enumerate() {
                let i = i as usize;
                let cov = [covs.data[i * 3], covs.data[i * 3 + 1], covs.data[i * 3 + 2]];
                let dx = px - means.data[i * 2];
                let dy = py - means.data[i * 2 + 1];
                let m2 = mahal2(cov, dx, dy);
                let raw = if self.settings.pure_sigma {
                    sigmas.data[i]
                } else {
                    sigmas.data[i] * (-0.5 * m2).exp()
                };
                let a = raw.min(ALPHA_CLAMP);
                alphas[j] = a;
                // NaN-safe (matches alpha_of's clamp): anything not strictly
                // below the clamp takes the zero-subgradient path
                clamped[j] = !(raw < ALPHA_CLAMP);
                m2s[j] = m2;
                trans[j] = t;
                weights[j] = a * t;
                t *= 1.0 - a;
            }

            // back-to-front: suffix sum of w_j * (g . c_j + g_alpha)
            // dL/dalpha_i = T_i (g.c_i + g_a) - suffix_i / (1 - alpha_i)
            let mut suffix = 0.0f32;
            for j in (0..k).rev() {
                let i = list[j] as usize;
                let pay = &payloads.data[i * c..(i + 1) * c];
                let mut gdotc = g_alpha_map;
                for ch in 0..c {
                    gdotc += g_row[ch] * pay[ch];
                    d_payload[i * c + ch] += weights[j] * g_row[ch];
                }
                let d_alpha = trans[j] * gdotc - suffix / (1.0 - alphas[j]);
                suffix += weights[j] * gdotc;
                if clamped[j] {
                    continue; // alpha clamp: zero subgradient
                }
                if self.settings.pure_sigma {
                    d_sigma[i] += d_alpha;
                    continue;
                }
                let gexp = (-0.5 * m2s[j]).exp();
                d_sigma[i] += d_alpha * gexp;
                // d alpha / d power where alpha = sigma * exp(power)
                let d_power = d_alpha * sigmas.data[i] * gexp;
                // f64, matching mahal2: the f32 determinant can cancel away
                let a_ = covs.data[i * 3] as f64;
                let b_ = covs.data[i * 3 + 1] as f64;
                let c_ = covs.data[i * 3 + 2] as f64;
                let det = a_ * c_ - b_ * b_;
                let dx = (px - means.data[i * 2]) as f64;
                let dy = (py - means.data[i * 2 + 1]) as f64;
                let mx = ((c_ * dx - b_ * dy) / det) as f32;
                let my = ((a_ * dy - b_ * dx) / det) as f32;
                // power = -0.5 d^T Sigma^-1 d, d = pixel - mean
                d_mean[i * 2] += d_power * mx;
                d_mean[i * 2 + 1] += d_power * my;
                d_cov[i * 3] += d_power * 0.5 * mx * mx;
                d_cov[i * 3 + 1] += d_power * mx * my;
                d_cov[i * 3 + 2] += d_power * 0.5 * my * my;
            }
        }

        vec![
            (self.mean2d, Tensor::new(means.shape.clone(), d_mean)),
            (self.cov2d, Tensor::new(covs.shape.clone(), d_cov)),
            (self.sigma, Tensor::new(sigmas.shape.clone(), d_sigma)),
            (self.payload, Tensor::new(payloads.shape.clone(), d_payload)),
        ]
    }
}

/// Camera parameters as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct CamVars {
    /// [4] unit quaternion (w, x, y, z).
    pub q: Var,
    /// [3] translation.
    pub t: Var,
    /// [2] focal lengths.
    pub f: Var,
}

/// Projected splats on the tape, already culled.
pub struct ProjectedSplats {
    /// [m, 2]
    pub mean2d: Var,
    /// [m, 3]
    pub cov2d: Var,
    /// [m]
    pub depth: Var,
    /// Indices into the pre-cull Gaussian list that survived.
    pub kept: Vec<usize>,
}

/// Differentiable EWA projection of a batch of Gaussians. Culling decisions
/// (near plane, frustum margin) are made on forward values and are constant
/// in backward.
pub fn project_gaussians_diff(
    g: &mut Graph,
    mu: Var,
    r: Var,
    s: Var,
    cam: CamVars,
    w: usize,
    h: usize,
) -> ProjectedSplats {
    let n = g.shape(mu)[0];
    let (cx, cy) = principal_point(w, h);

    // camera rotation entries as scalars
    let qw = g.slice0(cam.q, 0, 1);
    let qx = g.slice0(cam.q, 1, 2);
    let qy = g.slice0(cam.q, 2, 3);
    let qz = g.slice0(cam.q, 3, 4);
    let rot = quat_entries(g, qw, qx, qy, qz);
    let rot_m = {
        let flat = g.concat0(&[
            rot[0][0], rot[0][1], rot[0][2], rot[1][0], rot[1][1], rot[1][2], rot[2][0],
            rot[2][1], rot[2][2],
        ]);
        g.reshape(flat, vec![3, 3])
    };
    let rot_t = g.transpose(rot_m);
    let xr = g.matmul(mu, rot_t);
    let xcam = g.add_row_vec(xr, cam.t);

    // cull behind the near plane before the perspective divide
    let z_all = g.value(xcam);
    let kept1: Vec<usize> = (0..n).filter(|&i| z_all.data[i * 3 + 2] > Z_MIN).collect();
    if kept1.is_empty() {
        return empty_projection(g);
    }
    let xcam = g.gather0(xcam, &kept1);
    let r_k = g.gather0(r, &kept1);
    let s_k = g.gather0(s, &kept1);

    let x = g.slice1(xcam, 0, 1);
    let y = g.slice1(xcam, 1, 2);
    let z = g.slice1(xcam, 2, 3);
    let fx = g.slice0(cam.f, 0, 1);
    let fy = g.slice0(cam.f, 1, 2);

    let x_over_z = g.div(x, z);
    let y_over_z = g.div(y, z);
    let fxxz = g.mul(fx, x_over_z);
    let u = g.offset(fxxz, cx);
    let fyyz = g.mul(fy, y_over_z);
    let v = g.offset(fyyz, cy);

    // world covariance entries per Gaussian
    let rw = g.slice1(r_k, 0, 1);
    let rx = g.slice1(r_k, 1, 2);
    let ry = g.slice1(r_k, 2, 3);
    let rz = g.slice1(r_k, 3, 4);
    let rg = quat_entries(g, rw, rx, ry, rz);
    let s2 = g.mul(s_k, s_k);
    let s2c = [g.slice1(s2, 0, 1), g.slice1(s2, 1, 2), g.slice1(s2, 2, 3)];
    // Sigma_ij = sum_k R_ik s_k^2 R_jk (6 unique entries)
    let mut sigma_w = [[None::<Var>; 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            let mut acc: Option<Var> = None;
            for k in 0..3 {
                let p = g.mul(rg[i][k], rg[j][k]);
                let p = g.mul(p, s2c[k]);
                acc = Some(match acc {
                    None => p,
                    Some(a) => g.add(a, p),
                });
            }
            sigma_w[i][j] = acc;
        }
    }
    let sw = |i: usize, j: usize| if i <= j { sigma_w[i][j].unwrap() } else { sigma_w[j][i].unwrap() };

    // A = W Sigma W^T with scalar W entries
    let mut a_entries = [[None::<Var>; 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            let mut acc: Option<Var> = None;
            for k in 0..3 {
                for l in 0..3 {
                    let p = g.mul(rot[i][k], sw(k, l));
                    let p = g.mul(p, rot[j][l]);
                    acc = Some(match acc {
                        None => p,
                        Some(a) => g.add(a, p),
                    });
                }
            }
            a_entries[i][j] = acc;
        }
    }
    let ae = |i: usize, j: usize| if i <= j { a_entries[i][j].unwrap() } else { a_entries[j][i].unwrap() };

    // perspective Jacobian rows: J0 = (fx/z, 0, -fx x/z^2), J1 = (0, fy/z, -fy y/z^2)
    let j00 = g.div(fx, z);
    let j11 = g.div(fy, z);
    let t0 = g.div(fxxz, z); // fx x / z^2
    let j02 = g.neg(t0);
    let t1 = g.div(fyyz, z);
    let j12 = g.neg(t1);

    let cov_a = quad_form(g, j00, j02, ae(0, 0), ae(0, 2), ae(2, 2), COV_REG);
    let cov_c = quad_form(g, j11, j12, ae(1, 1), ae(1, 2), ae(2, 2), COV_REG);
    let cov_b = {
        let p1 = g.mul(j00, j11);
        let p1 = g.mul(p1, ae(0, 1));
        let p2 = g.mul(j00, j12);
        let p2 = g.mul(p2, ae(0, 2));
        let p3 = g.mul(j02, j11);
        let p3 = g.mul(p3, ae(1, 2));
        let p4 = g.mul(j02, j12);
        let p4 = g.mul(p4, ae(2, 2));
        let sum = g.add(p1, p2);
        let sum = g.add(sum, p3);
        g.add(sum, p4)
    };

    // frustum cull on forward values
    let (uv_u, uv_v) = (g.value(u).data.clone(), g.value(v).data.clone());
    let (ca, cb, cc) = (
        g.value(cov_a).data.clone(),
        g.value(cov_b).data.clone(),
        g.value(cov_c).data.clone(),
    );
    let kept2: Vec<usize> = (0..kept1.len())
        .filter(|&i| {
            let rad = splat_radius([ca[i], cb[i], cc[i]]);
            uv_u[i] + rad >= 0.0
                && uv_u[i] - rad <= (w - 1) as f32
                && uv_v[i] + rad >= 0.0
                && uv_v[i] - rad <= (h - 1) as f32
        })
        .collect();
    if kept2.is_empty() {
        return empty_projection(g);
    }

    let u2 = g.reshape(u, vec![kept1.len(), 1]);
    let v2 = g.reshape(v, vec![kept1.len(), 1]);
    let mean2d = g.concat1(&[u2, v2]);
    let a2 = g.reshape(cov_a, vec![kept1.len(), 1]);
    let b2 = g.reshape(cov_b, vec![kept1.len(), 1]);
    let c2 = g.reshape(cov_c, vec![kept1.len(), 1]);
    let cov2d = g.concat1(&[a2, b2, c2]);

    let mean2d = g.gather0(mean2d, &kept2);
    let cov2d = g.gather0(cov2d, &kept2);
    let depth = g.gather0(z, &kept2);
    let kept: Vec<usize> = kept2.iter().map(|&i| kept1[i]).collect();
    ProjectedSplats { mean2d, cov2d, depth, kept }
}

/// Differentiable pinhole projection of world points `[n,3]` to pixel
/// coordinates `[n,2]`. No culling: depth is clamped to the near plane so
/// the forward pass stays finite everywhere, and the returned camera-space
/// z lets callers build their own validity masks.
pub fn project_points_diff(
    g: &mut Graph,
    pts: Var,
    cam: CamVars,
    w: usize,
    h: usize,
) -> (Var, Vec<f32>) {
    let (cx, cy) = principal_point(w, h);
    let qw = g.slice0(cam.q, 0, 1);
    let qx = g.slice0(cam.q, 1, 2);
    let qy = g.slice0(cam.q, 2, 3);
    let qz = g.slice0(cam.q, 3, 4);
    let rot = quat_entries(g, qw, qx, qy, qz);
    let rot_m = {
        let flat = g.concat0(&[
            rot[0][0], rot[0][1], rot[0][2], rot[1][0], rot[1][1], rot[1][2], rot[2][0],
            rot[2][1], rot[2][2],
        ]);
        g.reshape(flat, vec![3, 3])
    };
    let rot_t = g.transpose(rot_m);
    let xr = g.matmul(pts, rot_t);
    let xcam = g.add_row_vec(xr, cam.t);
    let n = g.shape(pts)[0];
    let z_raw = g.value(xcam).data.iter().skip(2).step_by(3).copied().collect::<Vec<f32>>();
    debug_assert_eq!(z_raw.len(), n);

    let x = g.slice1(xcam, 0, 1);
    let y = g.slice1(xcam, 1, 2);
    let z = g.slice1(xcam, 2, 3);
    let z = g.clamp(z, Z_MIN, f32::INFINITY);
    let fx = g.slice0(cam.f, 0, 1);
    let fy = g.slice0(cam.f, 1, 2);
    let xz = g.div(x, z);
    let yz = g.div(y, z);
    let fxxz = g.mul(fx, xz);
    let u = g.offset(fxxz, cx);
    let fyyz = g.mul(fy, yz);
    let v = g.offset(fyyz, cy);
    let u2 = g.reshape(u, vec![n, 1]);
    let v2 = g.reshape(v, vec![n, 1]);
    (g.concat1(&[u2, v2]), z_raw)
}

fn empty_projection(g: &mut Graph) -> ProjectedSplats {
    let mean2d = g.constant(Tensor::zeros(vec![0, 2]));
    let cov2d = g.constant(Tensor::zeros(vec![0, 3]));
    let depth = g.constant(Tensor::zeros(vec![0]));
    ProjectedSplats { mean2d, cov2d, depth, kept: Vec::new() }
}

/// j0^2 e00 + 2 j0 j2 e02 + j2^2 e22 + reg
fn quad_form(g: &mut Graph, j0: Var, j2: Var, e00: Var, e02: Var, e22: Var, reg: f32) -> Var {
    let p1 = g.mul(j0, j0);
    let p1 = g.mul(p1, e00);
    let p2 = g.mul(j0, j2);
    let p2 = g.mul(p2, e02);
    let p2 = g.scale(p2, 2.0);
    let p3 = g.mul(j2, j2);
    let p3 = g.mul(p3, e22);
    let sum = g.add(p1, p2);
    let sum = g.add(sum, p3);
    g.offset(sum, reg)
}

/// Rotation matrix entries of a (broadcastable) quaternion.
fn quat_entries(g: &mut Graph, w: Var, x: Var, y: Var, z: Var) -> [[Var; 3]; 3] {
    let two = 2.0f32;
    let xx = g.mul(x, x);
    let yy = g.mul(y, y);
    let zz = g.mul(z, z);
    let xy = g.mul(x, y);
    let xz = g.mul(x, z);
    let yz = g.mul(y, z);
    let wx = g.mul(w, x);
    let wy = g.mul(w, y);
    let wz = g.mul(w, z);

    let r00 = {
        let s = g.add(yy, zz);
        let s = g.scale(s, -two);
        g.offset(s, 1.0)
    };
    let r11 = {
        let s = g.add(xx, zz);
        let s = g.scale(s, -two);
        g.offset(s, 1.0)
    };
    let r22 = {
        let s = g.add(xx, yy);
        let s = g.scale(s, -two);
        g.offset(s, 1.0)
    };
    let r01 = {
        let s = g.sub(xy, wz);
        g.scale(s, two)
    };
    let r02 = {
        let s = g.add(xz, wy);
        g.scale(s, two)
    };
    let r10 = {
        let s = g.add(xy, wz);
        g.scale(s, two)
    };
    let r12 = {
        let s = g.sub(yz, wx);
        g.scale(s, two)
    };
    let r20 = {
        let s = g.sub(xz, wy);
        g.scale(s, two)
    };
    let r21 = {
        let s = g.add(yz, wx);
        g.scale(s, two)
    };
    [[r00, r01, r02], [r10, r11, r12], [r20, r21, r22]]
}

/// Differentiable compositing: inputs are tape variables `mean2d` [m,2],
/// `cov2d` [m,3], `sigma` [m], `payload` [m,c]; output is [h*w, c+1] with
/// alpha last.
pub fn rasterize_diff(
    g: &mut Graph,
    mean2d: Var,
    cov2d: Var,
    sigma: Var,
    payload: Var,
    depth_sort_key: &[f32],
    settings: RasterSettings,
) -> Var {
    let m = g.shape(sigma).first().copied().unwrap_or(0);
    let channels = g.value(payload).cols();
    let splats: Vec<Splat2D> = (0..m)
        .map(|i| {
            let means = g.value(mean2d);
            let covs = g.value(cov2d);
            let sig = g.value(sigma);
            let pay = g.value(payload);
            Splat2D {
                mean2d: [means.data[i * 2], means.data[i * 2 + 1]],
                cov2d: [covs.data[i * 3], covs.data[i * 3 + 1], covs.data[i * 3 + 2]],
                depth: depth_sort_key[i],
                sigma: sig.data[i],
                payload: pay.data[i * channels..(i + 1) * channels].to_vec(),
            }
        })
        .collect();
    let (flat, lists) = composite(&splats, channels, &settings);
    let value = Tensor::new(vec![settings.h * settings.w, channels + 1], flat);
    let tape = RasterTape { mean2d, cov2d, sigma, payload, settings, channels, lists };
    g.push_raster(value, tape)
}
