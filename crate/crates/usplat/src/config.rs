//! Flat `key = value` run configuration: one assignment per line, `#`
//! comments, unknown keys rejected.

use std::collections::BTreeSet;
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {0}: expected `key = value`, got `{1}`")]
    BadLine(usize, String),
    #[error("line {0}: unknown key `{1}`")]
    UnknownKey(usize, String),
    #[error("line {0}: bad value for `{1}`: {2}")]
    BadValue(usize, String, String),
    #[error("line {0}: duplicate key `{1}`")]
    DuplicateKey(usize, String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything one training/evaluation run needs. Field names double as the
/// config-file keys.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // scene
    pub views: usize,
    pub eval_views: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub primitives: usize,
    pub focal: f32,
    pub pose_noise_rot_deg: f32,
    pub pose_noise_trans: f32,
    // masking
    pub rho_e: f32,
    pub rho_d: f32,
    // network
    pub latent_dim: usize,
    pub heads: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub patch: usize,
    pub n_g: usize,
    pub half_extent: f32,
    pub offset_radius: f32,
    // optimization
    pub steps: usize,
    pub lr: f32,
    pub lambda_pose: f32,
    pub lambda_point: f32,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            views: 4,
            eval_views: 2,
            height: 64,
            width: 64,
            classes: 4,
            primitives: 6,
            focal: 70.0,
            pose_noise_rot_deg: 0.0,
            pose_noise_trans: 0.0,
            rho_e: 0.5,
            rho_d: 0.5,
            latent_dim: 64,
            heads: 4,
            enc_depth: 4,
            dec_depth: 2,
            patch: 8,
            n_g: 32,
            // the canonical frame is the first camera's frame, so the
            // position bound must cover the whole visible scene, not just
            // the unit primitive cluster
            half_extent: 6.0,
            offset_radius: 0.3,
            steps: 5000,
            lr: 1e-4,
            lambda_pose: 10.0,
            lambda_point: 1.0,
            checkpoint_every: 1000,
            seed: 7,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::BadLine(lineno, raw.to_string()))?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey(lineno, key.to_string()));
            }
            macro_rules! set {
                ($field:ident) => {
                    cfg.$field = value.parse().map_err(|e| {
                        ConfigError::BadValue(lineno, key.to_string(), format!("{e}"))
                    })?
                };
            }
            match key {
                "views" => set!(views),
                "eval_views" => set!(eval_views),
                "height" => set!(height),
                "width" => set!(width),
                "classes" => set!(classes),
                "primitives" => set!(primitives),
                "focal" => set!(focal),
                "pose_noise_rot_deg" => set!(pose_noise_rot_deg),
                "pose_noise_trans" => set!(pose_noise_trans),
                "rho_e" => set!(rho_e),
                "rho_d" => set!(rho_d),
                "latent_dim" => set!(latent_dim),
                "heads" => set!(heads),
                "enc_depth" => set!(enc_depth),
                "dec_depth" => set!(dec_depth),
                "patch" => set!(patch),
                "n_g" => set!(n_g),
                "half_extent" => set!(half_extent),
                "offset_radius" => set!(offset_radius),
                "steps" => set!(steps),
                "lr" => set!(lr),
                "lambda_pose" => set!(lambda_pose),
                "lambda_point" => set!(lambda_point),
                "checkpoint_every" => set!(checkpoint_every),
                "seed" => set!(seed),
                other => return Err(ConfigError::UnknownKey(lineno, other.to_string())),
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Round-trippable textual form (every key, one per line).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "views = {}", self.views);
        let _ = writeln!(s, "eval_views = {}", self.eval_views);
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "classes = {}", self.classes);
        let _ = writeln!(s, "primitives = {}", self.primitives);
        let _ = writeln!(s, "focal = {}", self.focal);
        let _ = writeln!(s, "pose_noise_rot_deg = {}", self.pose_noise_rot_deg);
        let _ = writeln!(s, "pose_noise_trans = {}", self.pose_noise_trans);
        let _ = writeln!(s, "rho_e = {}", self.rho_e);
        let _ = writeln!(s, "rho_d = {}", self.rho_d);
        let _ = writeln!(s, "latent_dim = {}", self.latent_dim);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "enc_depth = {}", self.enc_depth);
        let _ = writeln!(s, "dec_depth = {}", self.dec_depth);
        let _ = writeln!(s, "patch = {}", self.patch);
        let _ = writeln!(s, "n_g = {}", self.n_g);
        let _ = writeln!(s, "half_extent = {}", self.half_extent);
        let _ = writeln!(s, "offset_radius = {}", self.offset_radius);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "lr = {}", self.lr);
        let _ = writeln!(s, "lambda_pose = {}", self.lambda_pose);
        let _ = writeln!(s, "lambda_point = {}", self.lambda_point);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "seed = {}", self.seed);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_comments_and_blanks() {
        let cfg = RunConfig::parse(
            "# run setup\nviews = 6\n\nlr = 0.001   # tuned\nseed=42\n",
        )
        .unwrap();
        assert_eq!(cfg.views, 6);
        assert_eq!(cfg.lr, 0.001);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.patch, RunConfig::default().patch);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::parse("momentum = 0.9\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(1, k) if k == "momentum"));
    }

    #[test]
    fn malformed_line_is_an_error() {
        assert!(matches!(RunConfig::parse("views 6\n"), Err(ConfigError::BadLine(1, _))));
    }

    #[test]
    fn duplicate_key_is_an_error() {
        assert!(matches!(
            RunConfig::parse("views = 4\nviews = 5\n"),
            Err(ConfigError::DuplicateKey(2, _))
        ));
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.steps = 123;
        cfg.lr = 3e-4;
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }
}
