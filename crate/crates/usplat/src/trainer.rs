//! Training loop and evaluation harness: wires scene generation, dual
//! masking, the network, hierarchical rendering, and all losses into one
//! deterministic optimization step.

use crate::camera::{canonicalize_poses, relative_rotation_error, CameraParams};
use crate::config::RunConfig;
use crate::diff::optim::{AdamW, AdamWConfig};
use crate::diff::{DiffError, Graph, Tensor, Var};
use crate::gaussians::{
    unpack_geometric_feature, GaussianLevel, RenderGaussian, FAN_OUT, GEO_FEATURE_DIM, SEM_DIM,
};
use crate::io::IoError;
use crate::loss::{
    loss_point_view, loss_pose, loss_recalib_view, loss_rgb_view, loss_sem_view, total_loss,
    training_objective, LossError, LossParts, LossReport,
};
use crate::masking::{
    geometry_mask, patchify, pool_importance, random_encoder_mask, visible_indices, MaskSet,
    TokenGrid,
};
use crate::metrics::{decode_semantics, miou_pix_acc, pose_auc, psnr, ssim, MetricsReport};
use crate::network::{
    coarse_heads, decode, encode, fine_heads, point_and_camera_heads, CoarseOut, DecodedState,
    FineOut, ModelParams, NetConfig, PointCamOut, TapeModel,
};
use crate::raster::{
    importance_for_masking, project_gaussians_diff, rasterize_diff, CamVars, ChannelSelect,
    FieldRef, RasterError, RasterSettings,
};
use crate::scene::{gen_scene, make_teachers, OracleTeachers, PoseNoise, SceneConfig, SyntheticScene};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("scene: {0}")]
    Scene(#[from] crate::scene::SceneError),
    #[error("raster: {0}")]
    Raster(#[from] RasterError),
    #[error("loss at step {step}: {source}")]
    Loss { step: usize, source: LossError },
    #[error("autodiff at step {step}: {source}")]
    Diff { step: usize, source: DiffError },
    #[error("optimizer at step {step}: {source}")]
    Optim { step: usize, source: crate::diff::optim::OptimError },
    #[error("mask: {0}")]
    Mask(#[from] crate::masking::MaskError),
    #[error("io: {0}")]
    Io(#[from] IoError),
    #[error("{0}")]
    Config(String),
}

/// One line of the JSON-lines loss log.
#[derive(serde::Serialize)]
struct StepLog<'a> {
    step: usize,
    #[serde(flatten)]
    report: &'a LossReport,
}

// ---------------------------------------------------------------------------
// Tape-side quaternion helpers (all operands are [1]-shaped variables)
// ---------------------------------------------------------------------------

fn qsplit(g: &mut Graph, q: Var) -> [Var; 4] {
    [g.slice0(q, 0, 1), g.slice0(q, 1, 2), g.slice0(q, 2, 3), g.slice0(q, 3, 4)]
}

/// Hamilton product, matching `math::quat_mul`.
fn qmul(g: &mut Graph, a: [Var; 4], b: [Var; 4]) -> [Var; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    let term = |g: &mut Graph, p: Var, q: Var| g.mul(p, q);
    let w = {
        let t0 = term(g, aw, bw);
        let t1 = term(g, ax, bx);
        let t2 = term(g, ay, by);
        let t3 = term(g, az, bz);
        let s = g.add(t1, t2);
        let s = g.add(s, t3);
        g.sub(t0, s)
    };
    let x = {
        let t0 = term(g, aw, bx);
        let t1 = term(g, ax, bw);
        let t2 = term(g, ay, bz);
        let t3 = term(g, az, by);
        let s = g.add(t0, t1);
        let s = g.add(s, t2);
        g.sub(s, t3)
    };
    let y = {
        let t0 = term(g, aw, by);
        let t1 = term(g, ax, bz);
        let t2 = term(g, ay, bw);
        let t3 = term(g, az, bx);
        let s = g.sub(t0, t1);
        let s = g.add(s, t2);
        g.add(s, t3)
    };
    let z = {
        let t0 = term(g, aw, bz);
        let t1 = term(g, ax, by);
        let t2 = term(g, ay, bx);
        let t3 = term(g, az, bw);
        let s = g.add(t0, t1);
        let s = g.sub(s, t2);
        g.add(s, t3)
    };
    [w, x, y, z]
}

fn qconj(g: &mut Graph, q: [Var; 4]) -> [Var; 4] {
    [q[0], g.neg(q[1]), g.neg(q[2]), g.neg(q[3])]
}

/// Rotate a [3] vector by a unit quaternion via the sandwich product.
fn qrotate(g: &mut Graph, q: [Var; 4], v: Var) -> [Var; 3] {
    let zero = g.constant(Tensor::from_vec(vec![0.0]));
    let p = [zero, g.slice0(v, 0, 1), g.slice0(v, 1, 2), g.slice0(v, 2, 3)];
    let qc = qconj(g, q);
    let qp = qmul(g, q, p);
    let out = qmul(g, qp, qc);
    [out[1], out[2], out[3]]
}

/// Differentiable pose canonicalization: left-compose every predicted
/// camera with the inverse of camera 0's extrinsic (mirroring
/// `camera::canonicalize_poses`) and pack the results as `[V, 9]` rows.
/// Each quaternion's sign is aligned to the matching target row so the
/// double cover cannot inflate the pose loss.
fn canonical_cam9_rows(g: &mut Graph, cams: &[CamVars], targets: &Tensor) -> Var {
    let q0 = qsplit(g, cams[0].q);
    let q0c = qconj(g, q0);
    let t0 = cams[0].t;
    let mut rows = Vec::with_capacity(cams.len());
    for (v, cam) in cams.iter().enumerate() {
        let qv = qsplit(g, cam.q);
        let qrel = qmul(g, qv, q0c);
        let rot = qrotate(g, qrel, t0);
        let t_x = g.slice0(cam.t, 0, 1);
        let t_y = g.slice0(cam.t, 1, 2);
        let t_z = g.slice0(cam.t, 2, 3);
        let tx = g.sub(t_x, rot[0]);
        let ty = g.sub(t_y, rot[1]);
        let tz = g.sub(t_z, rot[2]);
        let fx = g.slice0(cam.f, 0, 1);
        let fy = g.slice0(cam.f, 1, 2);
        let mut row = g.concat0(&[qrel[0], qrel[1], qrel[2], qrel[3], tx, ty, tz, fx, fy]);
        // sign choice is a constant of the forward pass (double cover)
        let dot: f32 = (0..4)
            .map(|i| g.value(row).data[i] * targets.data[v * 9 + i])
            .sum();
        if dot < 0.0 {
            let qpart = g.slice0(row, 0, 4);
            let qneg = g.neg(qpart);
            let rest = g.slice0(row, 4, 9);
            row = g.concat0(&[qneg, rest]);
        }
        rows.push(g.reshape(row, vec![1, 9]));
    }
    g.concat0(&rows)
}

/// Read a tape camera back into scalar parameters.
fn cam_params_from_vars(g: &Graph, cam: &CamVars) -> CameraParams {
    let q = g.value(cam.q).data.clone();
    let t = g.value(cam.t).data.clone();
    let f = g.value(cam.f).data.clone();
    CameraParams::new([q[0], q[1], q[2], q[3]], [t[0], t[1], t[2]], [f[0], f[1]])
}

// ---------------------------------------------------------------------------
// Differentiable hierarchical rendering
// ---------------------------------------------------------------------------

enum Payload {
    /// RGB from the packed feature's color slot.
    Color,
    /// An explicit `[n, c]` per-Gaussian payload (semantics).
    Explicit(Var),
}

/// Unpack a level's packed features on the tape and splat it into one view.
/// Returns `[h·w, c]`; an empty projection yields a zero image.
fn render_level_diff(
    g: &mut Graph,
    mu: Var,
    eps: Var,
    payload: Payload,
    cam: CamVars,
    h: usize,
    w: usize,
) -> Var {
    let sig_raw = g.slice1(eps, 0, 1);
    let sigma = g.logistic(sig_raw);
    let r_raw = g.slice1(eps, 1, 5);
    let r = g.normalize_rows(r_raw, 1e-12);
    let s_log = g.slice1(eps, 5, 8);
    let s_exp = g.exp(s_log);
    let s = g.clamp(s_exp, 1e-4, 1.0);
    let pay = match payload {
        Payload::Color => {
            let c_raw = g.slice1(eps, 8, 11);
            g.logistic(c_raw)
        }
        Payload::Explicit(v) => v,
    };
    let channels = g.shape(pay)[1];
    let proj = project_gaussians_diff(g, mu, r, s, cam, w, h);
    if proj.kept.is_empty() {
        return g.constant(Tensor::zeros(vec![h * w, channels]));
    }
    let sigma_k = g.gather0(sigma, &proj.kept);
    let pay_k = g.gather0(pay, &proj.kept);
    let depth_vals = g.value(proj.depth).data.clone();
    let st = RasterSettings::new(h, w);
    let out = rasterize_diff(g, proj.mean2d, proj.cov2d, sigma_k, pay_k, &depth_vals, st);
    // drop the trailing alpha channel the compositor appends
    g.slice1(out, 0, channels)
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

pub struct Trainer {
    pub cfg: RunConfig,
    pub scene: SyntheticScene,
    pub teachers: OracleTeachers,
    pub params: ModelParams,
    pub step: usize,
    opt: AdamW,
    /// Patchified training-view images (reused every step).
    tokens: Vec<TokenGrid>,
    /// `[V, 9]` canonicalized teacher cameras.
    teacher_cam9: Tensor,
    /// Per view, `[h·w, 3]` teacher points in the canonical frame.
    teacher_points: Vec<Tensor>,
}

struct ForwardOut {
    /// Parameter name → tape variable, for gradient lookup after backward.
    vars: BTreeMap<String, Var>,
    coarse: CoarseOut,
    #[allow(dead_code)]
    dec: DecodedState,
    fine: FineOut,
    pc: PointCamOut,
    masks: MaskSet,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self, TrainError> {
        Self::with_params(cfg, None)
    }

    pub fn from_checkpoint(path: &Path) -> Result<Self, TrainError> {
        let (tensors, config_text) = crate::io::load_checkpoint(path)?;
        let cfg = RunConfig::parse(&config_text)
            .map_err(|e| TrainError::Config(format!("checkpoint config: {e}")))?;
        Self::with_params(cfg, Some(tensors))
    }

    fn with_params(
        cfg: RunConfig,
        tensors: Option<BTreeMap<String, Tensor>>,
    ) -> Result<Self, TrainError> {
        let scene_cfg = SceneConfig {
            views: cfg.views + cfg.eval_views,
            h: cfg.height,
            w: cfg.width,
            classes: cfg.classes,
            primitives: cfg.primitives,
            focal: cfg.focal,
        };
        let scene = gen_scene(&scene_cfg, cfg.seed)?;
        let noise = PoseNoise { rot_deg: cfg.pose_noise_rot_deg, trans: cfg.pose_noise_trans };
        let teachers = make_teachers(&scene, noise);

        let net_cfg = NetConfig {
            d: cfg.latent_dim,
            heads: cfg.heads,
            enc_depth: cfg.enc_depth,
            dec_depth: cfg.dec_depth,
            patch: cfg.patch,
            n_g: cfg.n_g,
            views: cfg.views,
            h: cfg.height,
            w: cfg.width,
            focal_prior: cfg.focal,
            half_extent: cfg.half_extent,
            offset_radius: cfg.offset_radius,
        };
        if cfg.height % cfg.patch != 0 || cfg.width % cfg.patch != 0 {
            return Err(TrainError::Config(format!(
                "patch {} must divide {}x{}",
                cfg.patch, cfg.height, cfg.width
            )));
        }
        let mut params = ModelParams::init(net_cfg, cfg.seed);
        if let Some(t) = tensors {
            for (name, tensor) in t {
                match params.tensors.get(&name) {
                    Some(existing) if existing.shape == tensor.shape => {
                        params.tensors.insert(name, tensor);
                    }
                    _ => {
                        return Err(TrainError::Config(format!(
                            "checkpoint tensor `{name}` does not match the model"
                        )))
                    }
                }
            }
        }

        let tokens = scene.images[..cfg.views]
            .iter()
            .map(|img| patchify(img, cfg.height, cfg.width, cfg.patch))
            .collect::<Result<Vec<_>, _>>()?;

        // supervision targets live in the canonical frame of teacher cam 0
        let train_cams = &teachers.cams[..cfg.views];
        let canon = canonicalize_poses(train_cams);
        let mut cam9 = Vec::with_capacity(cfg.views * 9);
        for c in &canon {
            cam9.extend_from_slice(&c.to_vec9());
        }
        let teacher_cam9 = Tensor::new(vec![cfg.views, 9], cam9);
        let cam0 = train_cams[0];
        let teacher_points = teachers.points[..cfg.views]
            .iter()
            .map(|p| {
                let mut d = Vec::with_capacity(p.data.len());
                for row in p.data.chunks_exact(3) {
                    let q = cam0.to_camera([row[0], row[1], row[2]]);
                    d.extend_from_slice(&q);
                }
                Tensor::new(p.shape.clone(), d)
            })
            .collect();

        let opt = AdamW::new(AdamWConfig { lr: cfg.lr, ..Default::default() });
        Ok(Trainer {
            cfg,
            scene,
            teachers,
            params,
            step: 0,
            opt,
            tokens,
            teacher_cam9,
            teacher_points,
        })
    }

    /// Full forward pass in spec order: random encoder masking, encoding,
    /// coarse heads, rendered-importance geometry masking, decoding, fine
    /// heads, point/camera heads.
    fn forward(
        &self,
        g: &mut Graph,
        rho_e: f32,
        rho_d: f32,
        mask_seed: u64,
    ) -> Result<ForwardOut, TrainError> {
        let cfg = &self.cfg;
        let (h, w, v_train) = (cfg.height, cfg.width, cfg.views);
        let n_p = self.tokens[0].n_patches();
        let (gh, gw) = (h / cfg.patch, w / cfg.patch);
        let m = TapeModel::new(g, &self.params);

        let mut enc_masks = Vec::with_capacity(v_train);
        let mut vis_idx = Vec::with_capacity(v_train);
        let mut vis_tokens = Vec::with_capacity(v_train);
        for v in 0..v_train {
            let mask = random_encoder_mask(n_p, rho_e, mask_seed, v);
            let vis = visible_indices(&mask);
            let tok = &self.tokens[v].tokens;
            let width = tok.cols();
            let rows: Vec<f32> = vis
                .iter()
                .flat_map(|&p| tok.data[p * width..(p + 1) * width].to_vec())
                .collect();
            vis_tokens.push(g.constant(Tensor::new(vec![vis.len(), width], rows)));
            vis_idx.push(vis);
            enc_masks.push(mask);
        }
        let enc = encode(g, &m, &vis_tokens, &vis_idx)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let coarse = coarse_heads(g, &m, &enc);

        // geometry masking from the rendered importance of the coarse field
        let coarse_cams: Vec<CameraParams> =
            coarse.cams.iter().map(|c| cam_params_from_vars(g, c)).collect();
        let mut coarse_field = Vec::with_capacity(v_train * cfg.n_g);
        for v in 0..v_train {
            let raw = g.value(coarse.gauss_raw[v]);
            for row in raw.data.chunks_exact(12) {
                let nrm = (row[3] * row[3] + row[4] * row[4] + row[5] * row[5] + row[6] * row[6])
                    .sqrt()
                    .max(1e-12);
                coarse_field.push(crate::gaussians::GeometricGaussian {
                    mu: [
                        cfg.half_extent * row[0].tanh(),
                        cfg.half_extent * row[1].tanh(),
                        cfg.half_extent * row[2].tanh(),
                    ],
                    r: [row[3] / nrm, row[4] / nrm, row[5] / nrm, row[6] / nrm],
                    s: [
                        row[7].exp().clamp(1e-4, 1.0),
                        row[8].exp().clamp(1e-4, 1.0),
                        row[9].exp().clamp(1e-4, 1.0),
                    ],
                    sigma: crate::diff::logistic(row[10]),
                    beta: crate::diff::logistic(row[11]),
                });
            }
        }
        let imp = importance_for_masking(&coarse_cams, &coarse_field, h, w)?;
        let mut dec_masks = Vec::with_capacity(v_train);
        for v in 0..v_train {
            let j = Tensor::new(vec![h * w], imp[v].clone());
            let scores = pool_importance(&j, gh, gw, cfg.patch);
            dec_masks.push(geometry_mask(&scores, &vis_idx[v], rho_d));
        }
        let masks = MaskSet { enc: enc_masks, dec: dec_masks, rho_e, rho_d };

        let dec = decode(g, &m, &enc, &masks).map_err(|e| TrainError::Config(e.to_string()))?;
        let fine = fine_heads(g, &m, &dec);
        let pc = point_and_camera_heads(g, &m, &dec, &coarse);
        Ok(ForwardOut { vars: m.vars.clone(), coarse, dec, fine, pc, masks })
    }

    /// One optimization step. Returns the (unweighted-sum) loss report.
    pub fn train_step(&mut self) -> Result<LossReport, TrainError> {
        let step = self.step;
        let cfg = self.cfg.clone();
        let (h, w, v_train) = (cfg.height, cfg.width, cfg.views);
        let mask_seed = cfg.seed.wrapping_add((step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));

        let mut g = Graph::new();
        let fwd = self.forward(&mut g, cfg.rho_e, cfg.rho_d, mask_seed)?;

        // union fields across views, per hierarchy level
        let sem_mu = g.concat0(&fwd.fine.sem_mu);
        let sem_eps = g.concat0(&fwd.fine.sem_eps);
        let sem_gamma = g.concat0(&fwd.fine.sem_gamma);
        let app_mu = g.concat0(&fwd.fine.app_mu);
        let app_eps = g.concat0(&fwd.fine.app_eps);

        let mut rgb_sum: Option<Var> = None;
        let mut sem_sum: Option<Var> = None;
        let mut point_sum: Option<Var> = None;
        let mut rgeo_sum: Option<Var> = None;
        let mut rsem_sum: Option<Var> = None;
        let mut acc = |slot: &mut Option<Var>, g: &mut Graph, v: Var| {
            *slot = Some(match *slot {
                None => v,
                Some(prev) => g.add(prev, v),
            });
        };
        for v in 0..v_train {
            let cam = fwd.pc.cams_final[v];
            let rgb = render_level_diff(&mut g, app_mu, app_eps, Payload::Color, cam, h, w);
            let sem =
                render_level_diff(&mut g, sem_mu, sem_eps, Payload::Explicit(sem_gamma), cam, h, w);

            let gt = g.constant(self.scene.images[v].clone());
            let l_rgb = loss_rgb_view(&mut g, rgb, gt, h, w);
            acc(&mut rgb_sum, &mut g, l_rgb);

            let teach_f = g.constant(self.teachers.features[v].clone());
            let l_sem = loss_sem_view(&mut g, sem, teach_f);
            acc(&mut sem_sum, &mut g, l_sem);

            let tp = g.constant(self.teacher_points[v].clone());
            let tu = g.constant(self.teachers.conf[v].clone());
            let l_point = loss_point_view(&mut g, fwd.pc.p[v], fwd.pc.u[v], tp, tu);
            acc(&mut point_sum, &mut g, l_point);

            let (l_rgeo, l_rsem) = loss_recalib_view(&mut g, rgb, sem, fwd.pc.p[v], cam, h, w);
            acc(&mut rgeo_sum, &mut g, l_rgeo);
            acc(&mut rsem_sum, &mut g, l_rsem);
        }

        let pred9 = canonical_cam9_rows(&mut g, &fwd.pc.cams_final, &self.teacher_cam9);
        let teacher9 = g.constant(self.teacher_cam9.clone());
        let l_pose = loss_pose(&mut g, pred9, teacher9);

        let parts = LossParts {
            rgb: rgb_sum.unwrap(),
            sem: sem_sum.unwrap(),
            pose: l_pose,
            point: point_sum.unwrap(),
            recalib_geo: rgeo_sum.unwrap(),
            recalib_sem: rsem_sum.unwrap(),
        };
        let (_, report) = total_loss(&mut g, &parts, cfg.lambda_pose, cfg.lambda_point)
            .map_err(|source| TrainError::Loss { step, source })?;
        let objective =
            training_objective(&mut g, &parts, cfg.lambda_pose, cfg.lambda_point, h, w, v_train);

        let grads =
            g.backward(objective).map_err(|source| TrainError::Diff { step, source })?;
        let grad_map: BTreeMap<String, Option<Tensor>> = fwd
            .vars
            .iter()
            .map(|(name, &var)| (name.clone(), grads.get(var).cloned()))
            .collect();
        self.opt
            .step(self.params.tensors.iter_mut().map(|(name, t)| {
                (name.as_str(), t, grad_map[name].as_ref())
            }))
            .map_err(|source| TrainError::Optim { step, source })?;
        self.step += 1;
        Ok(report)
    }

    /// Run `steps` optimization steps, streaming JSON-lines loss records and
    /// writing periodic checkpoints into `out_dir` when provided.
    pub fn train(
        &mut self,
        steps: usize,
        mut log: Option<&mut dyn Write>,
        out_dir: Option<&Path>,
    ) -> Result<(), TrainError> {
        for _ in 0..steps {
            let report = self.train_step()?;
            if let Some(log) = log.as_deref_mut() {
                let line = serde_json::to_string(&StepLog { step: self.step - 1, report: &report })
                    .expect("loss report serializes");
                writeln!(log, "{line}").map_err(|e| TrainError::Io(IoError::Io(e)))?;
            }
            if let Some(dir) = out_dir {
                if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                    self.save_checkpoint(&dir.join(format!("step{:06}.ckpt", self.step)))?;
                }
            }
        }
        Ok(())
    }

    /// Masks a fresh forward pass would draw for `mask_seed` (visualization).
    pub fn mask_preview(&self, mask_seed: u64) -> Result<MaskSet, TrainError> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, self.cfg.rho_e, self.cfg.rho_d, mask_seed)?;
        Ok(fwd.masks)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        crate::io::save_checkpoint(path, &self.params.tensors, &self.cfg.to_text())?;
        Ok(())
    }

    /// Unmasked forward pass, returning the renderable hierarchy and the
    /// predicted cameras (scalar side, for evaluation and the CLI).
    pub fn predict_field(
        &self,
    ) -> Result<(Vec<RenderGaussian>, Vec<RenderGaussian>, Vec<CameraParams>), TrainError> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, 0.0, 0.0, self.cfg.seed)?;
        let cams: Vec<CameraParams> =
            fwd.pc.cams_final.iter().map(|c| cam_params_from_vars(&g, c)).collect();
        let collect_level = |g: &Graph,
                             mus: &[Var],
                             epss: &[Var],
                             gammas: &[Var],
                             level: GaussianLevel|
         -> Result<Vec<RenderGaussian>, TrainError> {
            let mut out = Vec::new();
            for ((mu, eps), gamma) in mus.iter().zip(epss).zip(gammas) {
                let mu = g.value(*mu);
                let eps = g.value(*eps);
                let gamma = g.value(*gamma);
                let n = mu.rows();
                for i in 0..n {
                    let e = &eps.data[i * GEO_FEATURE_DIM..(i + 1) * GEO_FEATURE_DIM];
                    let a = unpack_geometric_feature(e)
                        .map_err(|e| TrainError::Config(e.to_string()))?;
                    out.push(RenderGaussian {
                        center: [
                            mu.data[i * 3],
                            mu.data[i * 3 + 1],
                            mu.data[i * 3 + 2],
                        ],
                        color: a.color,
                        sigma: a.sigma,
                        r: a.r,
                        s: a.s,
                        gamma: gamma.data[i * SEM_DIM..(i + 1) * SEM_DIM].to_vec(),
                        level,
                    });
                }
            }
            Ok(out)
        };
        let sem = collect_level(
            &g,
            &fwd.fine.sem_mu,
            &fwd.fine.sem_eps,
            &fwd.fine.sem_gamma,
            GaussianLevel::Semantic,
        )?;
        let app = collect_level(
            &g,
            &fwd.fine.app_mu,
            &fwd.fine.app_eps,
            &fwd.fine.app_gamma,
            GaussianLevel::Appearance,
        )?;
        debug_assert_eq!(sem.len(), self.cfg.views * self.cfg.n_g * FAN_OUT);
        debug_assert_eq!(app.len(), sem.len() * FAN_OUT);
        Ok((sem, app, cams))
    }

    /// Metrics on the source views (predicted cameras) and on the held-out
    /// views (canonicalized ground-truth cameras, never seen in training).
    pub fn evaluate(&self) -> Result<EvalReport, TrainError> {
        let cfg = &self.cfg;
        let (h, w) = (cfg.height, cfg.width);
        let (sem_field, app_field, pred_cams) = self.predict_field()?;
        let st = RasterSettings::new(h, w);

        // the model's frame is pinned to teacher camera 0; express every
        // ground-truth camera there for held-out rendering
        let all_canon = {
            let mut cams = vec![self.teachers.cams[0]];
            cams.extend_from_slice(&self.scene.cameras);
            canonicalize_poses(&cams)[1..].to_vec()
        };

        let render_group = |cams: &[CameraParams],
                            view_ids: &[usize]|
         -> Result<(Tensor, Tensor, Vec<f32>, Vec<Tensor>, Vec<Tensor>), TrainError> {
            let mut rgb_all = Vec::new();
            let mut gt_all = Vec::new();
            let mut ssims = Vec::new();
            let mut sem_maps = Vec::new();
            let mut depth_maps = Vec::new();
            for (cam, &vid) in cams.iter().zip(view_ids) {
                let maps = crate::raster::render(
                    cam,
                    &FieldRef::Render(&app_field),
                    ChannelSelect { rgb: true, depth: true, ..Default::default() },
                    &st,
                )?;
                let sem_maps_v = crate::raster::render(
                    cam,
                    &FieldRef::Render(&sem_field),
                    ChannelSelect { sem: true, ..Default::default() },
                    &st,
                )?;
                let rend = Tensor::new(vec![h * w, 3], maps.rgb.clone());
                let gt = self.scene.images[vid].clone();
                ssims.push(ssim(&rend, &gt, h, w));
                rgb_all.extend_from_slice(&maps.rgb);
                gt_all.extend_from_slice(&gt.data);
                sem_maps.push(Tensor::new(vec![h * w, SEM_DIM], sem_maps_v.sem));
                depth_maps.push(Tensor::new(vec![h * w], maps.depth));
            }
            let n = rgb_all.len() / 3;
            Ok((
                Tensor::new(vec![n, 3], rgb_all),
                Tensor::new(vec![n, 3], gt_all),
                ssims,
                sem_maps,
                depth_maps,
            ))
        };

        let group_report = |rend: &Tensor,
                            gt: &Tensor,
                            ssims: &[f32],
                            sem_maps: &[Tensor],
                            depth_maps: &[Tensor],
                            view_ids: &[usize]|
         -> MetricsReport {
            let mut pred_labels = Vec::new();
            let mut gt_labels = Vec::new();
            for (sm, &vid) in sem_maps.iter().zip(view_ids) {
                pred_labels.extend(decode_semantics(sm, &self.teachers.class_codes));
                gt_labels.extend_from_slice(&self.scene.gt_sem[vid]);
            }
            let (miou, pix_acc) = miou_pix_acc(&pred_labels, &gt_labels, cfg.classes + 1);
            let mut d_pred = Vec::new();
            let mut d_gt = Vec::new();
            for (dm, &vid) in depth_maps.iter().zip(view_ids) {
                d_pred.extend_from_slice(&dm.data);
                d_gt.extend_from_slice(&self.scene.gt_depth[vid].data);
            }
            let dp = Tensor::new(vec![d_pred.len()], d_pred);
            let dg = Tensor::new(vec![d_gt.len()], d_gt);
            let depth = crate::metrics::depth_metrics(&dp, &dg);
            let gt_train_cams = canonicalize_poses(&self.teachers.cams[..cfg.views]);
            MetricsReport {
                psnr: psnr(rend, gt),
                ssim: ssims.iter().sum::<f32>() / ssims.len() as f32,
                miou,
                pix_acc,
                abs_rel: depth.map(|d| d.0),
                abs_rel_pct: depth.map(|d| d.0 * 100.0),
                tau: depth.map(|d| d.1),
                pose_auc_5: pose_auc(&pred_cams, &gt_train_cams, 5.0),
                pose_auc_10: pose_auc(&pred_cams, &gt_train_cams, 10.0),
                pose_auc_20: pose_auc(&pred_cams, &gt_train_cams, 20.0),
            }
        };

        let src_ids: Vec<usize> = (0..cfg.views).collect();
        let (rend, gt, ssims, sems, depths) = render_group(&pred_cams, &src_ids)?;
        let source = group_report(&rend, &gt, &ssims, &sems, &depths, &src_ids);

        let held_out = if cfg.eval_views > 0 {
            let ids: Vec<usize> = (cfg.views..cfg.views + cfg.eval_views).collect();
            let cams: Vec<CameraParams> = ids.iter().map(|&i| all_canon[i]).collect();
            let (rend, gt, ssims, sems, depths) = render_group(&cams, &ids)?;
            Some(group_report(&rend, &gt, &ssims, &sems, &depths, &ids))
        } else {
            None
        };

        // worst relative rotation error across all source-view pairs
        let gt_train_cams = canonicalize_poses(&self.teachers.cams[..cfg.views]);
        let mut max_rre = 0.0f32;
        for i in 0..pred_cams.len() {
            for j in i + 1..pred_cams.len() {
                let pr = crate::camera::relative_pose(&pred_cams[i], &pred_cams[j]);
                let gr = crate::camera::relative_pose(&gt_train_cams[i], &gt_train_cams[j]);
                max_rre = max_rre.max(relative_rotation_error(&pr, &gr));
            }
        }

        Ok(EvalReport { source, held_out, max_pairwise_rre_deg: max_rre })
    }
}

#[derive(Debug, serde::Serialize)]
pub struct EvalReport {
    pub source: MetricsReport,
    pub held_out: Option<MetricsReport>,
    pub max_pairwise_rre_deg: f32,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            views: 2,
            eval_views: 1,
            height: 16,
            width: 16,
            classes: 2,
            primitives: 2,
            patch: 4,
            latent_dim: 16,
            heads: 2,
            enc_depth: 1,
            dec_depth: 1,
            n_g: 4,
            steps: 2,
            checkpoint_every: 0,
            ..RunConfig::default()
        }
    }

    #[test]
    fn train_step_runs_and_reports_finite_losses() {
        let mut tr = Trainer::new(tiny_cfg()).unwrap();
        let report = tr.train_step().unwrap();
        for v in [report.rgb, report.sem, report.pose, report.point, report.total] {
            assert!(v.is_finite() && v >= 0.0, "{report:?}");
        }
        assert_eq!(tr.step, 1);
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let run = || {
            let mut tr = Trainer::new(tiny_cfg()).unwrap();
            let mut log = Vec::new();
            tr.train(2, Some(&mut log), None).unwrap();
            String::from_utf8(log).unwrap()
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.lines().count(), 2);
    }

    #[test]
    fn checkpoint_round_trip_restores_parameters() {
        let dir = std::env::temp_dir().join("usplat-trainer-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ckpt");
        let mut tr = Trainer::new(tiny_cfg()).unwrap();
        tr.train_step().unwrap();
        tr.save_checkpoint(&path).unwrap();
        let tr2 = Trainer::from_checkpoint(&path).unwrap();
        for (name, t) in &tr.params.tensors {
            assert_eq!(&tr2.params.tensors[name].data, &t.data, "{name}");
        }
    }

    #[test]
    fn zero_steps_checkpoint_equals_initialization() {
        let tr = Trainer::new(tiny_cfg()).unwrap();
        let init = ModelParams::init(tr.params.cfg, tiny_cfg().seed);
        for (name, t) in &tr.params.tensors {
            assert_eq!(&init.tensors[name].data, &t.data, "{name}");
        }
    }

    #[test]
    fn evaluate_produces_bounded_metrics() {
        let tr = Trainer::new(tiny_cfg()).unwrap();
        let ev = tr.evaluate().unwrap();
        assert!(ev.source.psnr >= 0.0);
        assert!(ev.source.miou >= 0.0 && ev.source.miou <= 1.0);
        assert!(ev.source.pose_auc_5 >= 0.0 && ev.source.pose_auc_5 <= 1.0);
        assert!(ev.held_out.is_some());
    }

    #[test]
    fn held_out_views_only_touch_evaluation() {
        // the training tape reads images/teachers for the first `views`
        // views only; tokens are precomputed from that prefix
        let tr = Trainer::new(tiny_cfg()).unwrap();
        assert_eq!(tr.tokens.len(), tr.cfg.views);
        assert_eq!(tr.teacher_points.len(), tr.cfg.views);
        assert_eq!(tr.scene.images.len(), tr.cfg.views + tr.cfg.eval_views);
    }
}

