//! Gaussian hierarchy: geometric field, anchors, and the anchor -> semantic
//! -> appearance fan-out (10 children per parent at each stage).

use crate::diff::logistic;
use crate::math::*;

/// Children spawned per parent at each expansion stage.
pub const FAN_OUT: usize = 10;
/// Dimension of the semantic feature carried by anchors and render Gaussians.
pub const SEM_DIM: usize = 64;
/// Dimension of the packed geometric feature (opacity 1 + rotation 4 +
/// scale 3 + color 3).
pub const GEO_FEATURE_DIM: usize = 11;
/// Upper clamp on activated scales, scene units.
pub const S_MAX: f32 = 1.0;
pub const S_MIN: f32 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum GaussianError {
    #[error("degenerate rotation: quaternion slice has zero norm")]
    DegenerateRotation,
    #[error("fan-out mismatch: expected {expected} offset records, got {got}")]
    FanOutMismatch { expected: usize, got: usize },
}

/// Coarse geometric Gaussian with a learnable importance score.
#[derive(Clone, Debug)]
pub struct GeometricGaussian {
    pub mu: Vec3,
    pub sigma: f32,
    pub r: Quat,
    pub s: Vec3,
    pub beta: f32,
}

/// Anchor of the hierarchy: center plus packed geometric and semantic
/// features.
#[derive(Clone, Debug)]
pub struct AnchorGaussian {
    pub mu_a: Vec3,
    pub eps: [f32; GEO_FEATURE_DIM],
    pub gamma: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GaussianLevel {
    Semantic,
    Appearance,
}

/// Renderable Gaussian at the semantic or appearance level.
#[derive(Clone, Debug)]
pub struct RenderGaussian {
    pub center: Vec3,
    pub color: Vec3,
    pub sigma: f32,
    pub r: Quat,
    pub s: Vec3,
    pub gamma: Vec<f32>,
    pub level: GaussianLevel,
}

/// Activated attributes decoded from an 11-dim geometric feature.
#[derive(Clone, Debug)]
pub struct UnpackedAttrs {
    pub sigma: f32,
    pub r: Quat,
    pub s: Vec3,
    pub color: Vec3,
}

/// Decode the packed 11-dim geometric feature:
/// sigma = logistic(eps[0]); r = normalize(eps[1..5]); s = exp(eps[5..8])
/// clamped to [S_MIN, S_MAX]; color = logistic(eps[8..11]).
pub fn unpack_geometric_feature(eps: &[f32]) -> Result<UnpackedAttrs, GaussianError> {
    assert_eq!(eps.len(), GEO_FEATURE_DIM);
    let q = [eps[1], eps[2], eps[3], eps[4]];
    let n = quat_norm(q);
    if n < 1e-12 {
        return Err(GaussianError::DegenerateRotation);
    }
    Ok(UnpackedAttrs {
        sigma: logistic(eps[0]),
        r: [q[0] / n, q[1] / n, q[2] / n, q[3] / n],
        s: [
            eps[5].exp().clamp(S_MIN, S_MAX),
            eps[6].exp().clamp(S_MIN, S_MAX),
            eps[7].exp().clamp(S_MIN, S_MAX),
        ],
        color: [logistic(eps[8]), logistic(eps[9]), logistic(eps[10])],
    })
}

/// One raw fan-out record: offset, packed attributes, fresh semantic feature.
#[derive(Clone, Debug)]
pub struct OffsetRecord {
    pub delta: Vec3,
    pub attrs: [f32; GEO_FEATURE_DIM],
    pub gamma: Vec<f32>,
}

fn expand<'a>(
    centers: impl ExactSizeIterator<Item = &'a Vec3>,
    offsets: &[OffsetRecord],
    level: GaussianLevel,
) -> Result<Vec<RenderGaussian>, GaussianError> {
    let n = centers.len();
    if offsets.len() != n * FAN_OUT {
        return Err(GaussianError::FanOutMismatch { expected: n * FAN_OUT, got: offsets.len() });
    }
    let mut out = Vec::with_capacity(n * FAN_OUT);
    for (i, base) in centers.enumerate() {
        for k in 0..FAN_OUT {
            let rec = &offsets[i * FAN_OUT + k];
            let a = unpack_geometric_feature(&rec.attrs)?;
            out.push(RenderGaussian {
                center: add3(*base, rec.delta),
                color: a.color,
                sigma: a.sigma,
                r: a.r,
                s: a.s,
                gamma: rec.gamma.clone(),
                level,
            });
        }
    }
    Ok(out)
}

/// Expand anchors into semantic Gaussians, 10 per anchor, ordered anchor
/// index major / fan-out index minor.
pub fn expand_anchors_to_semantic(
    anchors: &[AnchorGaussian],
    offsets: &[OffsetRecord],
) -> Result<Vec<RenderGaussian>, GaussianError> {
    expand(anchors.iter().map(|a| &a.mu_a), offsets, GaussianLevel::Semantic)
}

/// Expand semantic Gaussians into appearance Gaussians; each semantic
/// Gaussian's realized center acts as the new anchor.
pub fn expand_semantic_to_appearance(
    sems: &[RenderGaussian],
    offsets: &[OffsetRecord],
) -> Result<Vec<RenderGaussian>, GaussianError> {
    expand(sems.iter().map(|s| &s.center), offsets, GaussianLevel::Appearance)
}

/// Serialize one Gaussian as a scene-file line:
/// `g <level> <cx> <cy> <cz> <sigma> <qw> <qx> <qy> <qz> <sx> <sy> <sz> <r> <g> <b> [gamma...]`.
pub fn gaussian_to_line(g: &RenderGaussian) -> String {
    let level = match g.level {
        GaussianLevel::Semantic => "semantic",
        GaussianLevel::Appearance => "appearance",
    };
    let mut s = format!(
        "g {level} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
        g.center[0], g.center[1], g.center[2], g.sigma, g.r[0], g.r[1], g.r[2], g.r[3],
        g.s[0], g.s[1], g.s[2], g.color[0], g.color[1], g.color[2],
    );
    for v in &g.gamma {
        s.push_str(&format!(" {v}"));
    }
    s
}

pub fn gaussian_from_line(line: &str) -> Result<RenderGaussian, String> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() < 16 || parts[0] != "g" {
        return Err(format!("bad gaussian line: {line}"));
    }
    let level = match parts[1] {
        "semantic" => GaussianLevel::Semantic,
        "appearance" => GaussianLevel::Appearance,
        other => return Err(format!("bad gaussian level: {other}")),
    };
    let nums: Result<Vec<f32>, _> = parts[2..].iter().map(|s| s.parse::<f32>()).collect();
    let v = nums.map_err(|e| format!("bad gaussian number: {e}"))?;
    Ok(RenderGaussian {
        center: [v[0], v[1], v[2]],
        sigma: v[3],
        r: [v[4], v[5], v[6], v[7]],
        s: [v[8], v[9], v[10]],
        color: [v[11], v[12], v[13]],
        gamma: v[14..].to_vec(),
        level,
    })
}
