//! Synthetic multi-view scenes and oracle teachers.
//!
//! Scenes are a handful of textured, class-labeled boxes and spheres inside
//! the unit cube, enclosed by a large background sphere so every pixel has
//! a well-defined color and depth. Ground-truth views come from an exact
//! analytic ray tracer — a code path fully independent of the Gaussian
//! rasterizer, so renders never confirm themselves.

use crate::camera::{unproject, CameraParams};
use crate::diff::Tensor;
use crate::math::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Radius of the inward-facing background sphere. Large enough to sit well
/// behind the cluster, small enough that depths stay numerically tame.
pub const BACKGROUND_RADIUS: f32 = 3.0;

/// Latent width of the oracle class codes (stand-in for a frozen
/// vision-language teacher).
pub const CLASS_CODE_DIM: usize = crate::gaussians::SEM_DIM;

#[derive(Debug, thiserror::Error)]
pub enum SceneError {
    #[error("need at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("bad image dims {h}x{w}")]
    BadDims { h: usize, w: usize },
    #[error("need at least as many primitives as classes ({prims} < {classes})")]
    TooFewPrimitives { prims: usize, classes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PrimKind {
    /// Radius.
    Sphere(f32),
    /// Half-extents of an axis-aligned box.
    Box([f32; 3]),
}

#[derive(Clone, Debug)]
pub struct Primitive {
    pub kind: PrimKind,
    pub center: Vec3,
    pub color: [f32; 3],
    pub class: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct SceneConfig {
    pub views: usize,
    pub h: usize,
    pub w: usize,
    /// Foreground class count; background gets id `classes`.
    pub classes: usize,
    pub primitives: usize,
    /// Focal length in pixels for every generated camera.
    pub focal: f32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig { views: 4, h: 64, w: 64, classes: 4, primitives: 6, focal: 70.0 }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub cameras: Vec<CameraParams>,
    pub primitives: Vec<Primitive>,
    /// Per view, `[h·w, 3]` in [0,1].
    pub images: Vec<Tensor>,
    /// Per view, `[h·w]` camera-space z. Always valid (background sphere).
    pub gt_depth: Vec<Tensor>,
    /// Per view, per pixel class id; background = `classes`.
    pub gt_sem: Vec<Vec<usize>>,
    pub h: usize,
    pub w: usize,
    pub classes: usize,
    pub seed: u64,
}

/// Pose perturbation applied to teacher cameras.
#[derive(Clone, Copy, Debug, Default)]
pub struct PoseNoise {
    pub rot_deg: f32,
    pub trans: f32,
}

#[derive(Clone, Debug)]
pub struct OracleTeachers {
    /// Teacher cameras (ground truth plus configured noise).
    pub cams: Vec<CameraParams>,
    /// Per view, `[h·w, 3]` world points backprojected from gt depth
    /// through the teacher cameras (so they stay self-consistent).
    pub points: Vec<Tensor>,
    /// Per view, `[h·w]` all-ones confidence.
    pub conf: Vec<Tensor>,
    /// `[classes+1, 64]` orthonormal codes; last row is background.
    pub class_codes: Tensor,
    /// Per view, `[h·w, 64]` the class code of each pixel's label.
    pub features: Vec<Tensor>,
}

/// World-to-camera pose looking from `eye` toward `target`, image y down.
pub fn look_at(eye: Vec3, target: Vec3, focal: [f32; 2]) -> CameraParams {
    let fwd = normalize3(sub3(target, eye));
    let world_up = [0.0, 1.0, 0.0];
    let right = normalize3(cross3(fwd, world_up));
    let down = cross3(fwd, right);
    // rows of R are the camera axes expressed in world coordinates
    let r = [right, down, fwd];
    let q = mat_to_quat(&r);
    let t = scale3(mat_vec(&r, eye), -1.0);
    CameraParams::new(q, t, focal)
}

pub fn gen_scene(cfg: &SceneConfig, seed: u64) -> Result<SyntheticScene, SceneError> {
    if cfg.views < 2 {
        return Err(SceneError::TooFewViews(cfg.views));
    }
    if cfg.classes < 2 {
        return Err(SceneError::TooFewClasses(cfg.classes));
    }
    if cfg.h < 8 || cfg.w < 8 {
        return Err(SceneError::BadDims { h: cfg.h, w: cfg.w });
    }
    if cfg.primitives < cfg.classes {
        return Err(SceneError::TooFewPrimitives { prims: cfg.primitives, classes: cfg.classes });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let palette = |class: usize| -> [f32; 3] {
        let hue = class as f32 * 0.618_034 % 1.0;
        hsv_ish(hue)
    };
    let mut primitives = Vec::with_capacity(cfg.primitives);
    for i in 0..cfg.primitives {
        let class = i % cfg.classes; // guarantees every class id appears
        let center = [
            rng.gen_range(-0.45..0.45f32),
            rng.gen_range(-0.35..0.35),
            rng.gen_range(-0.45..0.45),
        ];
        let base = palette(class);
        let jitter = rng.gen_range(-0.05..0.05f32);
        let color = [
            (base[0] + jitter).clamp(0.1, 1.0),
            (base[1] + jitter).clamp(0.1, 1.0),
            (base[2] + jitter).clamp(0.1, 1.0),
        ];
        let kind = if rng.gen_bool(0.5) {
            PrimKind::Sphere(rng.gen_range(0.12..0.25))
        } else {
            PrimKind::Box([
                rng.gen_range(0.10..0.22),
                rng.gen_range(0.10..0.22),
                rng.gen_range(0.10..0.22),
            ])
        };
        primitives.push(Primitive { kind, center, color, class });
    }

    // cameras on a jittered arc facing the cluster
    let mut cameras = Vec::with_capacity(cfg.views);
    let arc = 1.4f32; // radians swept by the view ring
    for v in 0..cfg.views {
        let frac = if cfg.views == 1 { 0.5 } else { v as f32 / (cfg.views - 1) as f32 };
        let theta = -arc / 2.0 + arc * frac + rng.gen_range(-0.05..0.05f32);
        let radius = 2.3 + rng.gen_range(-0.15..0.15f32);
        let height = rng.gen_range(-0.3..0.3f32);
        let eye = [radius * theta.sin(), height, -radius * theta.cos()];
        let target = [rng.gen_range(-0.05..0.05f32), rng.gen_range(-0.05..0.05), 0.0];
        cameras.push(look_at(eye, target, [cfg.focal, cfg.focal]));
    }

    let mut images = Vec::with_capacity(cfg.views);
    let mut gt_depth = Vec::with_capacity(cfg.views);
    let mut gt_sem = Vec::with_capacity(cfg.views);
    for cam in &cameras {
        let (img, depth, sem) = trace_view(cam, &primitives, cfg.h, cfg.w, cfg.classes);
        images.push(img);
        gt_depth.push(depth);
        gt_sem.push(sem);
    }

    Ok(SyntheticScene {
        cameras,
        primitives,
        images,
        gt_depth,
        gt_sem,
        h: cfg.h,
        w: cfg.w,
        classes: cfg.classes,
        seed,
    })
}

fn hsv_ish(hue: f32) -> [f32; 3] {
    let h6 = hue * 6.0;
    let f = |shift: f32| -> f32 {
        let x = (h6 + shift).rem_euclid(6.0);
        (2.0 - (x - 2.0).abs()).clamp(0.25, 1.0)
    };
    [f(0.0), f(4.0), f(2.0)]
}

struct Hit {
    t: f32,
    normal: Vec3,
    color: [f32; 3],
    class: usize,
}

fn intersect_sphere(origin: Vec3, dir: Vec3, center: Vec3, radius: f32) -> Option<f32> {
    let oc = sub3(origin, center);
    let b = dot3(oc, dir);
    let c = dot3(oc, oc) - radius * radius;
    let disc = b * b - c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let t0 = -b - sq;
    let t1 = -b + sq;
    if t0 > 1e-4 {
        Some(t0)
    } else if t1 > 1e-4 {
        Some(t1)
    } else {
        None
    }
}

fn intersect_box(origin: Vec3, dir: Vec3, center: Vec3, half: [f32; 3]) -> Option<(f32, Vec3)> {
    let mut tmin = f32::NEG_INFINITY;
    let mut tmax = f32::INFINITY;
    let mut axis = 0usize;
    for k in 0..3 {
        let inv = 1.0 / dir[k];
        let mut t0 = (center[k] - half[k] - origin[k]) * inv;
        let mut t1 = (center[k] + half[k] - origin[k]) * inv;
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        if t0 > tmin {
            tmin = t0;
            axis = k;
        }
        tmax = tmax.min(t1);
        if tmin > tmax {
            return None;
        }
    }
    if tmin > 1e-4 {
        let mut n = [0.0; 3];
        n[axis] = if dir[axis] < 0.0 { 1.0 } else { -1.0 };
        Some((tmin, n))
    } else {
        None
    }
}

/// World-space checker modulation: keeps per-primitive color recognizable
/// while giving PSNR something nontrivial to measure.
fn texture(p: Vec3) -> f32 {
    let c = (p[0] * 6.0).floor() + (p[1] * 6.0).floor() + (p[2] * 6.0).floor();
    if (c as i64).rem_euclid(2) == 0 {
        1.0
    } else {
        0.72
    }
}

const LIGHT: Vec3 = [0.424, 0.849, 0.318]; // pre-normalized

fn trace_view(
    cam: &CameraParams,
    prims: &[Primitive],
    h: usize,
    w: usize,
    classes: usize,
) -> (Tensor, Tensor, Vec<usize>) {
    let origin = cam.center();
    let rot_t = transpose3(&cam.rotation());
    let (cx, cy) = crate::camera::principal_point(w, h);
    let mut img = vec![0.0f32; h * w * 3];
    let mut depth = vec![0.0f32; h * w];
    let mut sem = vec![classes; h * w];
    for py in 0..h {
        for px in 0..w {
            let dc = [
                (px as f32 - cx) / cam.f[0],
                (py as f32 - cy) / cam.f[1],
                1.0,
            ];
            let dir = normalize3(mat_vec(&rot_t, dc));
            let mut best: Option<Hit> = None;
            for p in prims {
                let cand = match p.kind {
                    PrimKind::Sphere(r) => intersect_sphere(origin, dir, p.center, r).map(|t| {
                        let hit = add3(origin, scale3(dir, t));
                        Hit { t, normal: normalize3(sub3(hit, p.center)), color: p.color, class: p.class }
                    }),
                    PrimKind::Box(half) => intersect_box(origin, dir, p.center, half)
                        .map(|(t, n)| Hit { t, normal: n, color: p.color, class: p.class }),
                };
                if let Some(hit) = cand {
                    if best.as_ref().map_or(true, |b| hit.t < b.t) {
                        best = Some(hit);
                    }
                }
            }
            let hit = best.unwrap_or_else(|| {
                // inward-facing background sphere: always intersects
                let t = intersect_sphere(origin, dir, [0.0; 3], BACKGROUND_RADIUS)
                    .expect("ray leaves background sphere");
                let p = add3(origin, scale3(dir, t));
                let shade = 0.25 + 0.15 * (p[1] / BACKGROUND_RADIUS + 1.0);
                Hit {
                    t,
                    normal: scale3(normalize3(p), -1.0),
                    color: [shade, shade, shade + 0.05],
                    class: classes,
                }
            });
            let p = add3(origin, scale3(dir, hit.t));
            let lambert = 0.6 + 0.4 * dot3(hit.normal, LIGHT).max(0.0);
            let tex = texture(p);
            let idx = py * w + px;
            for c in 0..3 {
                img[idx * 3 + c] = (hit.color[c] * lambert * tex).clamp(0.0, 1.0);
            }
            depth[idx] = hit.t * dot3(dir, [rot_t[0][2], rot_t[1][2], rot_t[2][2]]);
            sem[idx] = if hit.class == classes { classes } else { hit.class };
        }
    }
    (Tensor::new(vec![h * w, 3], img), Tensor::from_vec(depth), sem)
}

/// Seeded orthonormal class codes via Gram-Schmidt on Gaussian draws.
pub fn class_codes(n: usize, seed: u64) -> Tensor {
    assert!(n <= CLASS_CODE_DIM, "more classes than code dims");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..CLASS_CODE_DIM)
            .map(|_| {
                // Box-Muller
                let u1: f64 = rng.gen_range(1e-9..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        for prev in &rows {
            let d: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (x, &p) in v.iter_mut().zip(prev) {
                *x -= d * p;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for x in &mut v {
                *x /= norm;
            }
            rows.push(v);
        }
    }
    let data: Vec<f32> = rows.into_iter().flatten().map(|x| x as f32).collect();
    Tensor::new(vec![n, CLASS_CODE_DIM], data)
}

pub fn make_teachers(scene: &SyntheticScene, noise: PoseNoise) -> OracleTeachers {
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0x7ea_c4e5);
    let cams: Vec<CameraParams> = scene
        .cameras
        .iter()
        .map(|c| {
            if noise.rot_deg == 0.0 && noise.trans == 0.0 {
                return c.clone();
            }
            let axis = [
                rng.gen_range(-1.0..1.0f32),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ];
            let angle = noise.rot_deg.to_radians() * rng.gen_range(-1.0..1.0f32);
            let dq = quat_from_axis_angle(axis, angle);
            let t = [
                c.t[0] + noise.trans * rng.gen_range(-1.0..1.0f32),
                c.t[1] + noise.trans * rng.gen_range(-1.0..1.0),
                c.t[2] + noise.trans * rng.gen_range(-1.0..1.0),
            ];
            CameraParams::new(quat_mul(dq, c.q), t, c.f)
        })
        .collect();

    let (h, w) = (scene.h, scene.w);
    let mut points = Vec::with_capacity(cams.len());
    let mut conf = Vec::with_capacity(cams.len());
    for (v, cam) in cams.iter().enumerate() {
        let mut pts = vec![0.0f32; h * w * 3];
        for py in 0..h {
            for px in 0..w {
                let idx = py * w + px;
                let z = scene.gt_depth[v].data[idx];
                let p = unproject(cam, (px as f32, py as f32), z, w, h);
                pts[idx * 3..idx * 3 + 3].copy_from_slice(&p);
            }
        }
        points.push(Tensor::new(vec![h * w, 3], pts));
        conf.push(Tensor::full(vec![h * w], 1.0));
    }

    let codes = class_codes(scene.classes + 1, scene.seed);
    let features = scene
        .gt_sem
        .iter()
        .map(|sem| {
            let mut f = vec![0.0f32; h * w * CLASS_CODE_DIM];
            for (idx, &class) in sem.iter().enumerate() {
                let row = &codes.data[class * CLASS_CODE_DIM..(class + 1) * CLASS_CODE_DIM];
                f[idx * CLASS_CODE_DIM..(idx + 1) * CLASS_CODE_DIM].copy_from_slice(row);
            }
            Tensor::new(vec![h * w, CLASS_CODE_DIM], f)
        })
        .collect();

    OracleTeachers { cams, points, conf, class_codes: codes, features }
}

/// `prim <kind> <params...> <r> <g> <b> <class>` line.
pub fn prim_to_line(p: &Primitive) -> String {
    match p.kind {
        PrimKind::Sphere(r) => format!(
            "prim sphere {} {} {} {} {} {} {} {}",
            p.center[0], p.center[1], p.center[2], r, p.color[0], p.color[1], p.color[2], p.class
        ),
        PrimKind::Box(half) => format!(
            "prim box {} {} {} {} {} {} {} {} {} {}",
            p.center[0], p.center[1], p.center[2], half[0], half[1], half[2], p.color[0],
            p.color[1], p.color[2], p.class
        ),
    }
}

pub fn prim_from_line(line: &str) -> Result<Primitive, String> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.first() != Some(&"prim") {
        return Err(format!("not a prim line: {line}"));
    }
    let f = |s: &str| s.parse::<f32>().map_err(|e| format!("bad number {s}: {e}"));
    match toks.get(1) {
        Some(&"sphere") if toks.len() == 10 => Ok(Primitive {
            center: [f(toks[2])?, f(toks[3])?, f(toks[4])?],
            kind: PrimKind::Sphere(f(toks[5])?),
            color: [f(toks[6])?, f(toks[7])?, f(toks[8])?],
            class: toks[9].parse().map_err(|e| format!("bad class: {e}"))?,
        }),
        Some(&"box") if toks.len() == 12 => Ok(Primitive {
            center: [f(toks[2])?, f(toks[3])?, f(toks[4])?],
            kind: PrimKind::Box([f(toks[5])?, f(toks[6])?, f(toks[7])?]),
            color: [f(toks[8])?, f(toks[9])?, f(toks[10])?],
            class: toks[11].parse().map_err(|e| format!("bad class: {e}"))?,
        }),
        _ => Err(format!("malformed prim line: {line}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::project_point;

    fn small() -> SceneConfig {
        SceneConfig { views: 3, h: 32, w: 32, classes: 3, primitives: 5, focal: 35.0 }
    }

    #[test]
    fn deterministic_regeneration() {
        let a = gen_scene(&small(), 11).unwrap();
        let b = gen_scene(&small(), 11).unwrap();
        for v in 0..3 {
            assert_eq!(a.images[v].data, b.images[v].data);
            assert_eq!(a.gt_depth[v].data, b.gt_depth[v].data);
            assert_eq!(a.gt_sem[v], b.gt_sem[v]);
            assert_eq!(a.cameras[v].to_vec9(), b.cameras[v].to_vec9());
        }
    }

    #[test]
    fn view_count_preconditions() {
        let mut cfg = small();
        cfg.views = 1;
        assert!(matches!(gen_scene(&cfg, 0), Err(SceneError::TooFewViews(1))));
        cfg.views = 2;
        assert!(gen_scene(&cfg, 0).is_ok());
    }

    #[test]
    fn class_ids_cover_range_plus_background() {
        let s = gen_scene(&small(), 5).unwrap();
        let mut seen = vec![false; 4];
        for sem in &s.gt_sem {
            for &c in sem {
                assert!(c <= 3);
                seen[c] = true;
            }
        }
        assert!(seen[3], "background must be visible");
    }

    #[test]
    fn look_at_centers_target() {
        let cam = look_at([1.0, 0.5, -2.0], [0.0, 0.0, 0.0], [40.0, 40.0]);
        let pix = project_point(&cam, [0.0, 0.0, 0.0], 64, 64);
        assert!(pix.valid);
        assert!((pix.u - 31.5).abs() < 1e-3 && (pix.v - 31.5).abs() < 1e-3);
    }

    #[test]
    fn depth_is_camera_z() {
        let s = gen_scene(&small(), 7).unwrap();
        for v in 0..s.cameras.len() {
            for idx in [0usize, 200, 1023] {
                let (px, py) = (idx % 32, idx / 32);
                let z = s.gt_depth[v].data[idx];
                assert!(z > 0.5, "background sphere guarantees positive depth");
                let p = unproject(&s.cameras[v], (px as f32, py as f32), z, 32, 32);
                let back = s.cameras[v].to_camera(p);
                assert!((back[2] - z).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn teacher_points_reproject_to_own_pixel() {
        let s = gen_scene(&small(), 9).unwrap();
        let t = make_teachers(&s, PoseNoise::default());
        for v in 0..s.cameras.len() {
            assert_eq!(t.cams[v].to_vec9(), s.cameras[v].to_vec9(), "zero noise keeps gt");
            for idx in (0..1024).step_by(97) {
                let (px, py) = ((idx % 32) as f32, (idx / 32) as f32);
                let p = [
                    t.points[v].data[idx * 3],
                    t.points[v].data[idx * 3 + 1],
                    t.points[v].data[idx * 3 + 2],
                ];
                let pix = project_point(&t.cams[v], p, 32, 32);
                assert!(pix.valid);
                assert!((pix.u - px).abs() < 1e-3 && (pix.v - py).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn noisy_teachers_stay_self_consistent() {
        let s = gen_scene(&small(), 13).unwrap();
        let t = make_teachers(&s, PoseNoise { rot_deg: 2.0, trans: 0.02 });
        let err = crate::camera::relative_rotation_error(&t.cams[0], &s.cameras[0]);
        assert!(err > 0.0 && err < 4.1);
        // points are backprojected through the noisy cameras, so they must
        // still land on their own pixels
        let pix = project_point(
            &t.cams[0],
            [t.points[0].data[300], t.points[0].data[301], t.points[0].data[302]],
            32,
            32,
        );
        assert!((pix.u - (100 % 32) as f32).abs() < 1e-3);
    }

    #[test]
    fn class_codes_orthonormal() {
        let c = class_codes(5, 42);
        for i in 0..5 {
            for j in 0..5 {
                let d: f64 = (0..CLASS_CODE_DIM)
                    .map(|k| {
                        c.data[i * CLASS_CODE_DIM + k] as f64 * c.data[j * CLASS_CODE_DIM + k] as f64
                    })
                    .sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-6, "codes {i},{j}: {d}");
            }
        }
    }

    #[test]
    fn prim_line_round_trip() {
        let s = gen_scene(&small(), 3).unwrap();
        for p in &s.primitives {
            let q = prim_from_line(&prim_to_line(p)).unwrap();
            assert_eq!(q.center, p.center);
            assert_eq!(q.kind, p.kind);
            assert_eq!(q.color, p.color);
            assert_eq!(q.class, p.class);
        }
    }
}
