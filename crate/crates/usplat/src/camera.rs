//! Pinhole cameras with a 9-scalar parameterization, projection, pose
//! canonicalization, and rotation-error metrics.
//!
//! Layout of the 9 scalars: unit quaternion (4, world-to-camera), translation
//! (3), focal lengths (fx, fy). The principal point is pinned to the image
//! center ((W-1)/2, (H-1)/2) and is not stored.

use crate::math::*;

/// Depth guard for the perspective divide.
pub const Z_MIN: f32 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraParams {
    /// World-to-camera rotation, unit quaternion (w, x, y, z).
    pub q: Quat,
    /// Translation, scene units: x_cam = R(q) p + t.
    pub t: Vec3,
    /// Focal lengths in pixels.
    pub f: [f32; 2],
}

impl CameraParams {
    /// Normalizes the quaternion on construction; focals must be positive.
    pub fn new(q: Quat, t: Vec3, f: [f32; 2]) -> Self {
        assert!(f[0] > 0.0 && f[1] > 0.0, "focal lengths must be positive");
        CameraParams { q: quat_normalize(q), t, f }
    }

    pub fn identity(f: [f32; 2]) -> Self {
        CameraParams::new([1.0, 0.0, 0.0, 0.0], [0.0; 3], f)
    }

    pub fn rotation(&self) -> Mat3 {
        quat_to_mat(self.q)
    }

    /// Flat 9-vector (q, t, fx, fy).
    pub fn to_vec9(&self) -> [f32; 9] {
        [
            self.q[0], self.q[1], self.q[2], self.q[3], self.t[0], self.t[1], self.t[2],
            self.f[0], self.f[1],
        ]
    }

    pub fn from_vec9(v: &[f32]) -> Self {
        CameraParams::new([v[0], v[1], v[2], v[3]], [v[4], v[5], v[6]], [v[7], v[8]])
    }

    /// World point -> camera frame.
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        add3(mat_vec(&self.rotation(), p), self.t)
    }

    /// Camera-frame point -> world.
    pub fn to_world(&self, pc: Vec3) -> Vec3 {
        mat_vec(&transpose3(&self.rotation()), sub3(pc, self.t))
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        mat_vec(&transpose3(&self.rotation()), scale3(self.t, -1.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelCoord {
    pub u: f32,
    pub v: f32,
    /// False when the source point had camera-frame z <= Z_MIN.
    pub valid: bool,
}

/// Principal point for a W x H image under the pixel-center convention.
pub fn principal_point(w: usize, h: usize) -> (f32, f32) {
    ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0)
}

/// Pinhole projection of a world point. Points at or behind the near guard
/// carry `valid = false`; callers must skip them in losses.
pub fn project_point(cam: &CameraParams, p: Vec3, w: usize, h: usize) -> PixelCoord {
    let pc = cam.to_camera(p);
    let (cx, cy) = principal_point(w, h);
    if pc[2] <= Z_MIN {
        return PixelCoord { u: 0.0, v: 0.0, valid: false };
    }
    PixelCoord {
        u: cam.f[0] * pc[0] / pc[2] + cx,
        v: cam.f[1] * pc[1] / pc[2] + cy,
        valid: true,
    }
}

/// Inverse of [`project_point`] at a known camera-frame depth.
pub fn unproject(cam: &CameraParams, pix: (f32, f32), depth: f32, w: usize, h: usize) -> Vec3 {
    let (cx, cy) = principal_point(w, h);
    let x = (pix.0 - cx) / cam.f[0] * depth;
    let y = (pix.1 - cy) / cam.f[1] * depth;
    cam.to_world([x, y, depth])
}

/// Bilinear sample of an H x W x C plane at continuous pixel coordinates,
/// clamp-to-edge. (The differentiable twin lives on the gradient tape.)
pub fn bilinear_sample(img: &[f32], h: usize, w: usize, c: usize, u: f32, v: f32) -> Vec<f32> {
    let taps = crate::diff::bilinear_taps(u, v, h, w);
    let mut out = vec![0.0; c];
    for (pix, wt) in taps {
        for ch in 0..c {
            out[ch] += wt * img[pix * c + ch];
        }
    }
    out
}

/// Left-compose every extrinsic with the inverse of camera 0's extrinsic, so
/// camera 0 becomes the identity pose. Relative poses are preserved exactly;
/// intrinsics are untouched. Idempotent.
pub fn canonicalize_poses(cams: &[CameraParams]) -> Vec<CameraParams> {
    assert!(!cams.is_empty(), "need at least one camera");
    let q0_inv = quat_conj(cams[0].q);
    let t0 = cams[0].t;
    cams.iter()
        .map(|c| {
            // R' = R R0^T, t' = t - R' t0
            let mut q = quat_mul(c.q, q0_inv);
            // keep the scalar part nonnegative so canonical output is unique
            if q[0] < 0.0 {
                q = [-q[0], -q[1], -q[2], -q[3]];
            }
            let t = sub3(c.t, rotate3(q, t0));
            CameraParams::new(q, t, c.f)
        })
        .collect()
}

/// Geodesic rotation distance in degrees: 2 acos(|<q_a, q_b>|).
pub fn relative_rotation_error(a: &CameraParams, b: &CameraParams) -> f32 {
    let d = (a.q[0] * b.q[0] + a.q[1] * b.q[1] + a.q[2] * b.q[2] + a.q[3] * b.q[3])
        .abs()
        .clamp(0.0, 1.0);
    2.0 * d.acos().to_degrees()
}

/// Relative pose b relative to a (a^-1 then b), as a camera transform.
pub fn relative_pose(a: &CameraParams, b: &CameraParams) -> CameraParams {
    let q = quat_mul(b.q, quat_conj(a.q));
    let t = sub3(b.t, rotate3(q, a.t));
    CameraParams::new(q, t, b.f)
}

/// Serialize as a scene-file line: `cam qw qx qy qz tx ty tz fx fy`.
pub fn cam_to_line(c: &CameraParams) -> String {
    let v = c.to_vec9();
    let mut s = String::from("cam");
    for x in v {
        s.push_str(&format!(" {x}"));
    }
    s
}

pub fn cam_from_line(line: &str) -> Result<CameraParams, String> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 10 || parts[0] != "cam" {
        return Err(format!("bad camera line: {line}"));
    }
    let vals: Result<Vec<f32>, _> = parts[1..].iter().map(|s| s.parse::<f32>()).collect();
    let vals = vals.map_err(|e| format!("bad camera number: {e}"))?;
    Ok(CameraParams::from_vec9(&vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn test_cam() -> CameraParams {
        CameraParams::identity([100.0, 100.0])
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        let pix = project_point(&test_cam(), [0.0, 0.0, 1.0], 128, 128);
        assert!(pix.valid);
        assert_relative_eq!(pix.u, 63.5);
        assert_relative_eq!(pix.v, 63.5);
    }

    #[test]
    fn hand_pinhole_evaluation() {
        let pix = project_point(&test_cam(), [0.1, 0.0, 1.0], 128, 128);
        assert_relative_eq!(pix.u, 73.5, epsilon = 1e-5);
        assert_relative_eq!(pix.v, 63.5, epsilon = 1e-5);
    }

    #[test]
    fn behind_camera_is_invalid() {
        let pix = project_point(&test_cam(), [0.0, 0.0, -1.0], 128, 128);
        assert!(!pix.valid);
    }

    #[test]
    fn project_unproject_roundtrip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let q = quat_normalize([
                rng.gen_range(-1.0..1.0f32),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]);
            let cam = CameraParams::new(
                q,
                [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                [rng.gen_range(50.0..200.0), rng.gen_range(50.0..200.0)],
            );
            let p = [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0f32),
            ];
            let z = cam.to_camera(p)[2];
            if z <= 0.01 {
                continue;
            }
            let pix = project_point(&cam, p, 64, 64);
            assert!(pix.valid);
            let back = unproject(&cam, (pix.u, pix.v), z, 64, 64);
            for k in 0..3 {
                assert!((back[k] - p[k]).abs() < 1e-4, "{back:?} vs {p:?}");
            }
        }
    }

    #[test]
    fn canonicalize_single_camera() {
        let cam = CameraParams::new(
            quat_from_axis_angle([0.0, 1.0, 0.0], 0.7),
            [0.2, -0.1, 1.0],
            [80.0, 90.0],
        );
        let canon = canonicalize_poses(&[cam]);
        assert_relative_eq!(canon[0].q[0], 1.0, epsilon = 1e-6);
        assert!(norm3(canon[0].t) < 1e-6);
        assert_eq!(canon[0].f, [80.0, 90.0]);
    }

    #[test]
    fn canonicalize_identical_pair() {
        let cam = CameraParams::new(
            quat_from_axis_angle([1.0, 0.0, 0.0], -0.4),
            [0.0, 0.3, 2.0],
            [100.0, 100.0],
        );
        let canon = canonicalize_poses(&[cam, cam]);
        for c in &canon {
            assert_relative_eq!(c.q[0], 1.0, epsilon = 1e-6);
            assert!(norm3(c.t) < 1e-5);
        }
    }

    #[test]
    fn canonicalize_preserves_relative_pose() {
        let a = CameraParams::new(
            quat_from_axis_angle([0.3, 1.0, 0.2], 0.9),
            [0.5, 0.0, 1.5],
            [100.0, 100.0],
        );
        let b = CameraParams::new(
            quat_from_axis_angle([1.0, -0.5, 0.1], -0.3),
            [-0.2, 0.4, 2.0],
            [100.0, 100.0],
        );
        let before = relative_pose(&a, &b);
        let canon = canonicalize_poses(&[a, b]);
        let after = relative_pose(&canon[0], &canon[1]);
        assert!(relative_rotation_error(&before, &after) < 1e-3);
        for k in 0..3 {
            assert!((before.t[k] - after.t[k]).abs() < 1e-5);
        }
    }

    #[test]
    fn canonicalize_idempotent() {
        let cams = vec![
            CameraParams::new(quat_from_axis_angle([0.0, 0.0, 1.0], 0.5), [1.0, 0.0, 0.0], [90.0, 90.0]),
            CameraParams::new(quat_from_axis_angle([0.0, 1.0, 0.0], -0.8), [0.0, 1.0, 2.0], [90.0, 90.0]),
        ];
        let once = canonicalize_poses(&cams);
        let twice = canonicalize_poses(&once);
        for (a, b) in once.iter().zip(&twice) {
            for k in 0..4 {
                assert!((a.q[k] - b.q[k]).abs() < 1e-6);
            }
            for k in 0..3 {
                assert!((a.t[k] - b.t[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rotation_error_basics() {
        let id = test_cam();
        assert_eq!(relative_rotation_error(&id, &id), 0.0);
        let rz = CameraParams::new(
            quat_from_axis_angle([0.0, 0.0, 1.0], std::f32::consts::FRAC_PI_2),
            [0.0; 3],
            [100.0, 100.0],
        );
        assert_relative_eq!(relative_rotation_error(&id, &rz), 90.0, epsilon = 1e-3);
        let neg = CameraParams { q: [-id.q[0], -id.q[1], -id.q[2], -id.q[3]], ..id };
        assert_eq!(relative_rotation_error(&id, &neg), 0.0);
    }

    #[test]
    fn rotation_error_triangle_inequality() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let mut rq = || {
                let q = quat_normalize([
                    rng.gen_range(-1.0..1.0f32),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]);
                CameraParams::new(q, [0.0; 3], [100.0, 100.0])
            };
            let (a, b, c) = (rq(), rq(), rq());
            let ab = relative_rotation_error(&a, &b);
            let bc = relative_rotation_error(&b, &c);
            let ac = relative_rotation_error(&a, &c);
            assert!(ac <= ab + bc + 1e-3, "{ac} > {ab} + {bc}");
        }
    }

    #[test]
    fn camera_line_roundtrip() {
        let cam = CameraParams::new(
            quat_from_axis_angle([0.1, 0.9, -0.3], 1.1),
            [0.25, -0.75, 3.0],
            [123.5, 98.0],
        );
        let line = cam_to_line(&cam);
        let back = cam_from_line(&line).unwrap();
        for k in 0..4 {
            assert!((cam.q[k] - back.q[k]).abs() < 1e-5);
        }
    }
}
