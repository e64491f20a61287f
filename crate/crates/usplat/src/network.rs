//! Toy-scale transformer with camera and Gaussian latent tokens, plus the
//! seven prediction heads feeding the splatting pipeline.
//!
//! The encoder attends over the concatenation of all views' visible patch
//! tokens, per-view camera tokens, and per-view Gaussian latent tokens.
//! The decoder restores the full patch grid, filling masked slots with a
//! learnable mask token. Heads are small MLPs; the point head is a
//! per-token linear unpatcher standing in for a dense prediction tower.

use crate::diff::{Graph, Tensor, Var};
use crate::gaussians::{GEO_FEATURE_DIM, SEM_DIM};
use crate::masking::MaskSet;
use crate::raster::CamVars;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Raw width of a fine-level record: offset (3) + packed geometric feature
/// (11) + semantic embedding (64).
pub const RECORD_DIM: usize = 3 + GEO_FEATURE_DIM + SEM_DIM;
/// Raw width of a coarse geometric Gaussian: mu(3) r(4) s(3) sigma(1) beta(1).
pub const COARSE_DIM: usize = 12;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeError(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetConfig {
    /// Latent width.
    pub d: usize,
    pub heads: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub patch: usize,
    /// Gaussian latent tokens per view.
    pub n_g: usize,
    pub views: usize,
    pub h: usize,
    pub w: usize,
    /// Focal prior in pixels; camera heads predict log-scale around it.
    pub focal_prior: f32,
    /// Half-extent of the canonical position cube.
    pub half_extent: f32,
    /// Radius of the semantic-level offsets; appearance offsets use 0.3x.
    pub offset_radius: f32,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            d: 64,
            heads: 4,
            enc_depth: 4,
            dec_depth: 2,
            patch: 8,
            n_g: 64,
            views: 4,
            h: 64,
            w: 64,
            focal_prior: 70.0,
            half_extent: 1.0,
            offset_radius: 0.3,
        }
    }
}

impl NetConfig {
    pub fn n_patches(&self) -> usize {
        (self.h / self.patch) * (self.w / self.patch)
    }
    pub fn token_dim(&self) -> usize {
        3 * self.patch * self.patch
    }
}

/// All learnable tensors, keyed by stable names (checkpoint order is the
/// map order).
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub cfg: NetConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn init(cfg: NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = BTreeMap::new();
        let d = cfg.d;
        let mut xavier = |shape: [usize; 2], scale: f32| -> Tensor {
            let lim = scale * (6.0 / (shape[0] + shape[1]) as f32).sqrt();
            Tensor::new(
                vec![shape[0], shape[1]],
                (0..shape[0] * shape[1]).map(|_| rng.gen_range(-lim..lim)).collect(),
            )
        };

        t.insert("embed.w".into(), xavier([cfg.token_dim(), d], 1.0));
        t.insert("embed.b".into(), Tensor::zeros(vec![d]));
        t.insert("view_embed".into(), xavier([cfg.views, d], 0.1));
        t.insert("cam_tokens".into(), xavier([cfg.views, d], 0.1));
        t.insert("gauss_base".into(), xavier([cfg.n_g, d], 0.1));
        t.insert("mask_token".into(), xavier([1, d], 0.1));

        let mut block = |prefix: String, t: &mut BTreeMap<String, Tensor>,
                         xavier: &mut dyn FnMut([usize; 2], f32) -> Tensor| {
            t.insert(format!("{prefix}.ln1.g"), Tensor::full(vec![d], 1.0));
            t.insert(format!("{prefix}.qkv.w"), xavier([d, 3 * d], 1.0));
            t.insert(format!("{prefix}.qkv.b"), Tensor::zeros(vec![3 * d]));
            t.insert(format!("{prefix}.proj.w"), xavier([d, d], 0.2));
            t.insert(format!("{prefix}.proj.b"), Tensor::zeros(vec![d]));
            t.insert(format!("{prefix}.ln2.g"), Tensor::full(vec![d], 1.0));
            t.insert(format!("{prefix}.ff1.w"), xavier([d, 2 * d], 1.0));
            t.insert(format!("{prefix}.ff1.b"), Tensor::zeros(vec![2 * d]));
            t.insert(format!("{prefix}.ff2.w"), xavier([2 * d, d], 0.2));
            t.insert(format!("{prefix}.ff2.b"), Tensor::zeros(vec![d]));
        };
        for i in 0..cfg.enc_depth {
            block(format!("enc.{i}"), &mut t, &mut xavier);
        }
        for i in 0..cfg.dec_depth {
            block(format!("dec.{i}"), &mut t, &mut xavier);
        }

        // camera heads: zero-initialized output layers make the identity
        // behaviors (prior camera, no-op refinement) exact at step 0
        t.insert("head.cam_coarse.w1".into(), xavier([d, d], 1.0));
        t.insert("head.cam_coarse.b1".into(), Tensor::zeros(vec![d]));
        t.insert("head.cam_coarse.w2".into(), Tensor::zeros(vec![d, 9]));
        t.insert("head.cam_coarse.b2".into(), Tensor::zeros(vec![9]));
        t.insert("head.cam_final.w1".into(), xavier([d, d], 1.0));
        t.insert("head.cam_final.b1".into(), Tensor::zeros(vec![d]));
        t.insert("head.cam_final.w2".into(), Tensor::zeros(vec![d, 9]));
        t.insert("head.cam_final.b2".into(), Tensor::zeros(vec![9]));

        // raw layout [mu3 r4 s3 sigma beta]: bias the rotation toward the
        // identity quaternion and the log-scales small so unpacking never
        // degenerates at init
        let mut coarse_b = vec![0.0f32; COARSE_DIM];
        coarse_b[3] = 1.0;
        coarse_b[7] = -2.5;
        coarse_b[8] = -2.5;
        coarse_b[9] = -2.5;
        t.insert("head.gauss_coarse.w1".into(), xavier([d + 9, d], 1.0));
        t.insert("head.gauss_coarse.b1".into(), Tensor::zeros(vec![d]));
        t.insert("head.gauss_coarse.w2".into(), xavier([d, COARSE_DIM], 0.1));
        t.insert("head.gauss_coarse.b2".into(), Tensor::from_vec(coarse_b));

        // record layout [delta3 eps11 gamma64]; eps = [sigma r4 s3 color3]
        let record_bias = |s_log: f32| -> Vec<f32> {
            let mut b = vec![0.0f32; RECORD_DIM];
            b[4] = 1.0; // eps quaternion w
            b[8] = s_log;
            b[9] = s_log;
            b[10] = s_log;
            b
        };
        t.insert("head.anchor.w1".into(), xavier([d, d], 1.0));
        t.insert("head.anchor.b1".into(), Tensor::zeros(vec![d]));
        t.insert("head.anchor.w2".into(), xavier([d, RECORD_DIM], 0.1));
        t.insert("head.anchor.b2".into(), {
            let mut b = record_bias(-2.5);
            b[0] = 0.0; // anchor's first 3 raws are mu, not an offset
            Tensor::from_vec(b)
        });
        let fan = crate::gaussians::FAN_OUT;
        t.insert("head.semantic.w1".into(), xavier([d, d], 1.0));
        t.insert("head.semantic.b1".into(), Tensor::zeros(vec![d]));
        t.insert("head.semantic.w2".into(), xavier([d, fan * RECORD_DIM], 0.1));
        t.insert(
            "head.semantic.b2".into(),
            Tensor::from_vec(record_bias(-3.0).repeat(fan)),
        );
        t.insert("head.appearance.w1".into(), xavier([d + RECORD_DIM, d], 1.0));
        t.insert("head.appearance.b1".into(), Tensor::zeros(vec![d]));
        t.insert("head.appearance.w2".into(), xavier([d, fan * RECORD_DIM], 0.1));
        t.insert(
            "head.appearance.b2".into(),
            Tensor::from_vec(record_bias(-3.5).repeat(fan)),
        );

        let p2 = cfg.patch * cfg.patch;
        t.insert("head.point.w".into(), xavier([d, p2 * 4], 0.1));
        t.insert("head.point.b".into(), Tensor::zeros(vec![p2 * 4]));

        ModelParams { cfg, tensors: t }
    }
}

/// Tape handles for every parameter of one forward/backward pass.
pub struct TapeModel {
    pub cfg: NetConfig,
    pub vars: BTreeMap<String, Var>,
    /// `[N_p, D]` constant sinusoidal patch-position encodings.
    pos: Tensor,
}

impl TapeModel {
    pub fn new(g: &mut Graph, params: &ModelParams) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.param(t.clone())))
            .collect();
        let cfg = params.cfg;
        let pos = sinusoidal_pos(cfg.h / cfg.patch, cfg.w / cfg.patch, cfg.d);
        TapeModel { cfg, vars, pos }
    }

    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("no parameter `{name}`"))
    }

    /// Like [`TapeModel::new`], but the named tensors are replaced by
    /// externally created variables. Gradient checks use this to probe a
    /// subset of the parameters while the rest stay fixed.
    pub fn with_overrides(
        g: &mut Graph,
        params: &ModelParams,
        overrides: &BTreeMap<&str, Var>,
    ) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = overrides
                    .get(k.as_str())
                    .copied()
                    .unwrap_or_else(|| g.constant(t.clone()));
                (k.clone(), v)
            })
            .collect();
        let cfg = params.cfg;
        let pos = sinusoidal_pos(cfg.h / cfg.patch, cfg.w / cfg.patch, cfg.d);
        TapeModel { cfg, vars, pos }
    }
}

/// Standard 2D sinusoidal encodings over the patch grid, `[gh·gw, d]`.
pub fn sinusoidal_pos(gh: usize, gw: usize, d: usize) -> Tensor {
    assert!(d % 4 == 0, "latent width must be divisible by 4");
    let quarter = d / 4;
    let mut data = vec![0.0f32; gh * gw * d];
    for gy in 0..gh {
        for gx in 0..gw {
            let row = (gy * gw + gx) * d;
            for i in 0..quarter {
                let omega = 1.0 / 10000f32.powf(i as f32 / quarter as f32);
                data[row + 4 * i] = (gx as f32 * omega).sin();
                data[row + 4 * i + 1] = (gx as f32 * omega).cos();
                data[row + 4 * i + 2] = (gy as f32 * omega).sin();
                data[row + 4 * i + 3] = (gy as f32 * omega).cos();
            }
        }
    }
    Tensor::new(vec![gh * gw, d], data)
}

fn view_row(g: &mut Graph, m: &TapeModel, name: &str, v: usize) -> Var {
    let table = m.var(name);
    let row = g.slice0(table, v, v + 1);
    let d = g.shape(row)[1];
    g.reshape(row, vec![d])
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Var {
    let y = g.matmul(x, w);
    g.add_row_vec(y, b)
}

fn mlp2(g: &mut Graph, m: &TapeModel, prefix: &str, x: Var) -> Var {
    let h = linear(g, x, m.var(&format!("{prefix}.w1")), m.var(&format!("{prefix}.b1")));
    let h = g.tanh(h);
    linear(g, h, m.var(&format!("{prefix}.w2")), m.var(&format!("{prefix}.b2")))
}

/// Pre-norm attention + feed-forward block over one `[n, D]` sequence.
fn attn_block(g: &mut Graph, m: &TapeModel, prefix: &str, x: Var) -> Var {
    let cfg = &m.cfg;
    let (d, heads) = (cfg.d, cfg.heads);
    let dh = d / heads;
    let ln1 = {
        let gain = m.var(&format!("{prefix}.ln1.g"));
        g.layer_norm_rows(x, gain, 1e-5)
    };
    let qkv = linear(g, ln1, m.var(&format!("{prefix}.qkv.w")), m.var(&format!("{prefix}.qkv.b")));
    let mut head_outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let q = g.slice1(qkv, hd * dh, (hd + 1) * dh);
        let k = g.slice1(qkv, d + hd * dh, d + (hd + 1) * dh);
        let v = g.slice1(qkv, 2 * d + hd * dh, 2 * d + (hd + 1) * dh);
        let kt = g.transpose(k);
        let scores = g.matmul(q, kt);
        let scores = g.scale(scores, 1.0 / (dh as f32).sqrt());
        let attn = g.softmax_rows(scores);
        head_outs.push(g.matmul(attn, v));
    }
    let cat = g.concat1(&head_outs);
    let proj = linear(g, cat, m.var(&format!("{prefix}.proj.w")), m.var(&format!("{prefix}.proj.b")));
    let x = g.add(x, proj);
    let ln2 = {
        let gain = m.var(&format!("{prefix}.ln2.g"));
        g.layer_norm_rows(x, gain, 1e-5)
    };
    let h = linear(g, ln2, m.var(&format!("{prefix}.ff1.w")), m.var(&format!("{prefix}.ff1.b")));
    let h = g.tanh(h);
    let ff = linear(g, h, m.var(&format!("{prefix}.ff2.w")), m.var(&format!("{prefix}.ff2.b")));
    g.add(x, ff)
}

pub struct EncodedState {
    /// Per view, `[n_vis, D]`, aligned with the visible patch indices.
    pub y_vis: Vec<Var>,
    /// `[V, D]` updated camera tokens.
    pub cam: Var,
    /// Per view, `[N_g, D]` updated Gaussian latent tokens.
    pub gauss: Vec<Var>,
}

/// Full self-attention over all views' visible tokens + camera tokens +
/// Gaussian latent tokens. `vis_tokens[v]` is the raw `[n_vis, 3·patch²]`
/// pixel tokens of view `v`; `vis_idx[v]` their patch indices.
pub fn encode(
    g: &mut Graph,
    m: &TapeModel,
    vis_tokens: &[Var],
    vis_idx: &[Vec<usize>],
) -> Result<EncodedState, NetError> {
    let cfg = m.cfg;
    if vis_tokens.len() != cfg.views || vis_idx.len() != cfg.views {
        return Err(NetError::ShapeError(format!(
            "expected {} views, got {}",
            cfg.views,
            vis_tokens.len()
        )));
    }
    let mut parts = Vec::new();
    let mut counts = Vec::new();
    for v in 0..cfg.views {
        let tok = vis_tokens[v];
        if g.shape(tok)[1] != cfg.token_dim() {
            return Err(NetError::ShapeError(format!(
                "view {v}: token width {} != {}",
                g.shape(tok)[1],
                cfg.token_dim()
            )));
        }
        let emb = linear(g, tok, m.var("embed.w"), m.var("embed.b"));
        let pos = {
            let rows: Vec<f32> = vis_idx[v]
                .iter()
                .flat_map(|&p| m.pos.data[p * cfg.d..(p + 1) * cfg.d].to_vec())
                .collect();
            g.constant(Tensor::new(vec![vis_idx[v].len(), cfg.d], rows))
        };
        let emb = g.add(emb, pos);
        let ve = view_row(g, m, "view_embed", v);
        let emb = g.add_row_vec(emb, ve);
        counts.push(vis_idx[v].len());
        parts.push(emb);
    }
    let cam_tokens = m.var("cam_tokens");
    let view_embed = m.var("view_embed");
    let cam_in = g.add(cam_tokens, view_embed);
    parts.push(cam_in);
    for v in 0..cfg.views {
        let ve = view_row(g, m, "view_embed", v);
        let base = m.var("gauss_base");
        parts.push(g.add_row_vec(base, ve));
    }
    let mut x = g.concat0(&parts);
    for i in 0..cfg.enc_depth {
        x = attn_block(g, m, &format!("enc.{i}"), x);
    }
    // split back by role
    let mut y_vis = Vec::with_capacity(cfg.views);
    let mut off = 0usize;
    for &c in &counts {
        y_vis.push(g.slice0(x, off, off + c));
        off += c;
    }
    let cam = g.slice0(x, off, off + cfg.views);
    off += cfg.views;
    let mut gauss = Vec::with_capacity(cfg.views);
    for _ in 0..cfg.views {
        gauss.push(g.slice0(x, off, off + cfg.n_g));
        off += cfg.n_g;
    }
    Ok(EncodedState { y_vis, cam, gauss })
}

/// Map a raw 9-vector row (`[1, 9]`) into differentiable camera variables:
/// quaternion normalized around identity, focals as log-scale around the
/// prior.
pub fn camera_from_raw(g: &mut Graph, raw: Var, prior: f32) -> CamVars {
    let qraw = g.slice1(raw, 0, 4);
    let ident = g.constant(Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]));
    let qsum = g.add(qraw, ident);
    let qn = g.normalize_rows(qsum, 1e-12);
    let q = g.reshape(qn, vec![4]);
    let t2 = g.slice1(raw, 4, 7);
    let t = g.reshape(t2, vec![3]);
    let flog = g.slice1(raw, 7, 9);
    let fexp = g.exp(flog);
    let fexp = g.scale(fexp, prior);
    let f = g.reshape(fexp, vec![2]);
    CamVars { q, t, f }
}

pub struct CoarseOut {
    /// `[V, 9]` raw camera head output.
    pub cam_raw: Var,
    pub cams: Vec<CamVars>,
    /// Per view, `[N_g, 12]` raw coarse Gaussians `[mu3 r4 s3 sigma beta]`.
    pub gauss_raw: Vec<Var>,
}

pub fn coarse_heads(g: &mut Graph, m: &TapeModel, enc: &EncodedState) -> CoarseOut {
    let cfg = m.cfg;
    let cam_raw = mlp2(g, m, "head.cam_coarse", enc.cam);
    let mut cams = Vec::with_capacity(cfg.views);
    let mut gauss_raw = Vec::with_capacity(cfg.views);
    for v in 0..cfg.views {
        let row = g.slice0(cam_raw, v, v + 1);
        cams.push(camera_from_raw(g, row, cfg.focal_prior));
        // condition each Gaussian token on its view's raw camera 9-vector
        let rep = g.repeat_rows(row, cfg.n_g);
        let cat = g.concat1(&[enc.gauss[v], rep]);
        gauss_raw.push(mlp2(g, m, "head.gauss_coarse", cat));
    }
    CoarseOut { cam_raw, cams, gauss_raw }
}

pub struct DecodedState {
    /// Per view, `[N_p, D]` full restored grid.
    pub z_grid: Vec<Var>,
    /// `[V, D]`.
    pub cam: Var,
    /// Per view, `[N_g, D]`.
    pub gauss: Vec<Var>,
}

/// Restore the full token grid (mask token in every hidden slot, encoder
/// output elsewhere) and run the decoder blocks.
pub fn decode(
    g: &mut Graph,
    m: &TapeModel,
    enc: &EncodedState,
    masks: &MaskSet,
) -> Result<DecodedState, NetError> {
    let cfg = m.cfg;
    let n_p = cfg.n_patches();
    if masks.enc.len() != cfg.views {
        return Err(NetError::ShapeError(format!(
            "mask set covers {} views, model has {}",
            masks.enc.len(),
            cfg.views
        )));
    }
    let mut parts = Vec::new();
    for v in 0..cfg.views {
        if masks.enc[v].len() != n_p {
            return Err(NetError::ShapeError(format!(
                "view {v}: mask over {} patches, grid has {n_p}",
                masks.enc[v].len()
            )));
        }
        let visible = masks.visible_indices(v);
        let kept_rows: Vec<usize> =
            (0..visible.len()).filter(|&i| !masks.dec[v][i]).collect();
        let kept_patches: Vec<usize> = kept_rows.iter().map(|&i| visible[i]).collect();
        // scatter kept rows into the grid with a constant selection matrix;
        // everything else gets the mask token
        let mut sel = vec![0.0f32; n_p * kept_rows.len()];
        for (j, &p) in kept_patches.iter().enumerate() {
            sel[p * kept_rows.len() + j] = 1.0;
        }
        let mut hole = vec![1.0f32; n_p];
        for &p in &kept_patches {
            hole[p] = 0.0;
        }
        let kept = if kept_rows.is_empty() {
            None
        } else {
            let rows = g.gather0(enc.y_vis[v], &kept_rows);
            let selc = g.constant(Tensor::new(vec![n_p, kept_rows.len()], sel));
            Some(g.matmul(selc, rows))
        };
        let holec = g.constant(Tensor::new(vec![n_p, 1], hole));
        let masked = g.matmul(holec, m.var("mask_token"));
        let grid = match kept {
            Some(k) => g.add(k, masked),
            None => masked,
        };
        let pos = g.constant(m.pos.clone());
        let grid = g.add(grid, pos);
        let ve = view_row(g, m, "view_embed", v);
        parts.push(g.add_row_vec(grid, ve));
    }
    parts.push(enc.cam);
    for v in 0..cfg.views {
        parts.push(enc.gauss[v]);
    }
    let mut x = g.concat0(&parts);
    for i in 0..cfg.dec_depth {
        x = attn_block(g, m, &format!("dec.{i}"), x);
    }
    let mut z_grid = Vec::with_capacity(cfg.views);
    let mut off = 0usize;
    for _ in 0..cfg.views {
        z_grid.push(g.slice0(x, off, off + n_p));
        off += n_p;
    }
    let cam = g.slice0(x, off, off + cfg.views);
    off += cfg.views;
    let mut gauss = Vec::with_capacity(cfg.views);
    for _ in 0..cfg.views {
        gauss.push(g.slice0(x, off, off + cfg.n_g));
        off += cfg.n_g;
    }
    Ok(DecodedState { z_grid, cam, gauss })
}

pub struct FineOut {
    /// Per view, `[N_g, 3+11+64]` anchors (mu already tanh-bounded).
    pub anchor_mu: Vec<Var>,
    pub anchor_eps: Vec<Var>,
    pub anchor_gamma: Vec<Var>,
    /// Per view, semantic level `[N_g·10, …]` (mu = anchor + offset).
    pub sem_mu: Vec<Var>,
    pub sem_eps: Vec<Var>,
    pub sem_gamma: Vec<Var>,
    /// Per view, appearance level `[N_g·100, …]`.
    pub app_mu: Vec<Var>,
    pub app_eps: Vec<Var>,
    pub app_gamma: Vec<Var>,
}

/// Split `[n, RECORD_DIM]` records into tanh-bounded centers around
/// `parent_mu` (repeated `fan` times), raw attributes, and semantics.
fn expand_records(
    g: &mut Graph,
    parent_mu: Var,
    records: Var,
    fan: usize,
    radius: f32,
) -> (Var, Var, Var) {
    let delta_raw = g.slice1(records, 0, 3);
    let delta = g.tanh(delta_raw);
    let delta = g.scale(delta, radius);
    let parents = g.repeat_rows(parent_mu, fan);
    let mu = g.add(parents, delta);
    let eps = g.slice1(records, 3, 3 + GEO_FEATURE_DIM);
    let gamma = g.slice1(records, 3 + GEO_FEATURE_DIM, RECORD_DIM);
    (mu, eps, gamma)
}

pub fn fine_heads(g: &mut Graph, m: &TapeModel, dec: &DecodedState) -> FineOut {
    let cfg = m.cfg;
    let fan = crate::gaussians::FAN_OUT;
    let mut out = FineOut {
        anchor_mu: vec![],
        anchor_eps: vec![],
        anchor_gamma: vec![],
        sem_mu: vec![],
        sem_eps: vec![],
        sem_gamma: vec![],
        app_mu: vec![],
        app_eps: vec![],
        app_gamma: vec![],
    };
    for v in 0..cfg.views {
        let tok = dec.gauss[v];
        let a = mlp2(g, m, "head.anchor", tok);
        let mu_raw = g.slice1(a, 0, 3);
        let mu = g.tanh(mu_raw);
        let mu = g.scale(mu, cfg.half_extent);
        let eps = g.slice1(a, 3, 3 + GEO_FEATURE_DIM);
        let gamma = g.slice1(a, 3 + GEO_FEATURE_DIM, RECORD_DIM);

        let sem_flat = mlp2(g, m, "head.semantic", tok);
        let sem_records = g.reshape(sem_flat, vec![cfg.n_g * fan, RECORD_DIM]);
        let (sem_mu, sem_eps, sem_gamma) =
            expand_records(g, mu, sem_records, fan, cfg.offset_radius);

        // appearance head sees its parent's token feature and raw record
        let tok_rep = g.repeat_rows(tok, fan);
        let app_in = g.concat1(&[tok_rep, sem_records]);
        let app_flat = mlp2(g, m, "head.appearance", app_in);
        let app_records = g.reshape(app_flat, vec![cfg.n_g * fan * fan, RECORD_DIM]);
        let (app_mu, app_eps, app_gamma) =
            expand_records(g, sem_mu, app_records, fan, cfg.offset_radius * 0.3);

        out.anchor_mu.push(mu);
        out.anchor_eps.push(eps);
        out.anchor_gamma.push(gamma);
        out.sem_mu.push(sem_mu);
        out.sem_eps.push(sem_eps);
        out.sem_gamma.push(sem_gamma);
        out.app_mu.push(app_mu);
        out.app_eps.push(app_eps);
        out.app_gamma.push(app_gamma);
    }
    out
}

pub struct PointCamOut {
    /// Per view, `[H·W, 3]` tanh-bounded world points.
    pub p: Vec<Var>,
    /// Per view, `[H·W]` confidence ≥ 1.
    pub u: Vec<Var>,
    /// `[V, 9]` raw deltas.
    pub cam_delta: Var,
    pub cams_final: Vec<CamVars>,
}

pub fn point_and_camera_heads(
    g: &mut Graph,
    m: &TapeModel,
    dec: &DecodedState,
    coarse: &CoarseOut,
) -> PointCamOut {
    let cfg = m.cfg;
    let p2 = cfg.patch * cfg.patch;
    let (gh, gw) = (cfg.h / cfg.patch, cfg.w / cfg.patch);
    // pixel -> (patch, within-patch) row permutation for the unpatcher
    let mut perm = Vec::with_capacity(cfg.h * cfg.w);
    for y in 0..cfg.h {
        for x in 0..cfg.w {
            let (gy, gx) = (y / cfg.patch, x / cfg.patch);
            let (py, px) = (y % cfg.patch, x % cfg.patch);
            perm.push((gy * gw + gx) * p2 + py * cfg.patch + px);
        }
    }
    debug_assert_eq!(gh * gw, cfg.n_patches());

    let mut p_out = Vec::with_capacity(cfg.views);
    let mut u_out = Vec::with_capacity(cfg.views);
    for v in 0..cfg.views {
        let raw = linear(g, dec.z_grid[v], m.var("head.point.w"), m.var("head.point.b"));
        let rows = g.reshape(raw, vec![cfg.n_patches() * p2, 4]);
        let per_pixel = g.gather0(rows, &perm);
        let xyz_raw = g.slice1(per_pixel, 0, 3);
        let xyz = g.tanh(xyz_raw);
        let p = g.scale(xyz, cfg.half_extent);
        let u_raw = g.slice1(per_pixel, 3, 4);
        let u = g.softplus(u_raw);
        let u = g.offset(u, 1.0);
        p_out.push(p);
        u_out.push(u);
    }

    let cam_delta = mlp2(g, m, "head.cam_final", dec.cam);
    let mut cams_final = Vec::with_capacity(cfg.views);
    for v in 0..cfg.views {
        let row = g.slice0(cam_delta, v, v + 1);
        let dq2 = g.slice1(row, 0, 4);
        let dq = g.reshape(dq2, vec![4]);
        let dt2 = g.slice1(row, 4, 7);
        let dt = g.reshape(dt2, vec![3]);
        let df2 = g.slice1(row, 7, 9);
        let df = g.reshape(df2, vec![2]);
        let base = &coarse.cams[v];
        let qsum = g.add(base.q, dq);
        let qsum2 = g.reshape(qsum, vec![1, 4]);
        let qn = g.normalize_rows(qsum2, 1e-12);
        let q = g.reshape(qn, vec![4]);
        let t = g.add(base.t, dt);
        let fx = g.exp(df);
        let f = g.mul(base.f, fx);
        cams_final.push(CamVars { q, t, f });
    }
    PointCamOut { p: p_out, u: u_out, cam_delta, cams_final }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{build_masks, random_encoder_mask};

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

    fn micro_inputs(g: &mut Graph, cfg: &NetConfig, seed: u64) -> (Vec<Var>, Vec<Vec<usize>>) {
        let mut toks = Vec::new();
        let mut idx = Vec::new();
        for v in 0..cfg.views {
            let mask = random_encoder_mask(cfg.n_patches(), 0.5, seed, v);
            let vis = crate::masking::visible_indices(&mask);
            let n = vis.len();
            let data: Vec<f32> =
                (0..n * cfg.token_dim()).map(|i| ((i * 31 + v * 7) % 17) as f32 / 17.0).collect();
            toks.push(g.constant(Tensor::new(vec![n, cfg.token_dim()], data)));
            idx.push(vis);
        }
        (toks, idx)
    }

    #[test]
    fn encoder_preserves_cardinalities() {
        let cfg = micro_cfg();
        let params = ModelParams::init(cfg, 1);
        let mut g = Graph::new();
        let m = TapeModel::new(&mut g, &params);
        let (toks, idx) = micro_inputs(&mut g, &cfg, 5);
        let n_vis: Vec<usize> = idx.iter().map(|v| v.len()).collect();
        let enc = encode(&mut g, &m, &toks, &idx).unwrap();
        for v in 0..cfg.views {
            assert_eq!(g.shape(enc.y_vis[v]), &[n_vis[v], cfg.d]);
        }
        assert_eq!(g.shape(enc.cam), &[cfg.views, cfg.d]);
        for v in 0..cfg.views {
            assert_eq!(g.shape(enc.gauss[v]), &[cfg.n_g, cfg.d]);
        }
    }

    #[test]
    fn zeroed_blocks_are_identity() {
        let cfg = micro_cfg();
        let mut params = ModelParams::init(cfg, 1);
        for (name, t) in params.tensors.iter_mut() {
            if name.contains(".proj.") || name.contains(".ff2.") {
                t.data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let mut g = Graph::new();
        let m = TapeModel::new(&mut g, &params);
        let (toks, idx) = micro_inputs(&mut g, &cfg, 6);
        let enc = encode(&mut g, &m, &toks, &idx).unwrap();
        // reconstruct the raw input embedding of view 0 and compare
        let emb = linear(&mut g, toks[0], m.var("embed.w"), m.var("embed.b"));
        let rows: Vec<f32> = idx[0]
            .iter()
            .flat_map(|&p| m.pos.data[p * cfg.d..(p + 1) * cfg.d].to_vec())
            .collect();
        let pos = g.constant(Tensor::new(vec![idx[0].len(), cfg.d], rows));
        let emb = g.add(emb, pos);
        let ve = view_row(&mut g, &m, "view_embed", 0);
        let emb = g.add_row_vec(emb, ve);
        let want = g.value(emb).data.clone();
        let got = g.value(enc.y_vis[0]).data.clone();
        for (a, b) in want.iter().zip(&got) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_camera_head_gives_prior() {
        let cfg = micro_cfg();
        let params = ModelParams::init(cfg, 2); // cam head output is zero-init
        let mut g = Graph::new();
        let m = TapeModel::new(&mut g, &params);
        let (toks, idx) = micro_inputs(&mut g, &cfg, 7);
        let enc = encode(&mut g, &m, &toks, &idx).unwrap();
        let coarse = coarse_heads(&mut g, &m, &enc);
        for cam in &coarse.cams {
            let q = g.value(cam.q).data.clone();
            assert!((q[0] - 1.0).abs() < 1e-6 && q[1].abs() < 1e-6);
            let t = g.value(cam.t).data.clone();
            assert!(t.iter().all(|x| x.abs() < 1e-6));
            let f = g.value(cam.f).data.clone();
            assert!((f[0] - cfg.focal_prior).abs() < 1e-4);
        }
    }

    #[test]
    fn zero_final_head_keeps_coarse_camera() {
        let cfg = micro_cfg();
        let params = ModelParams::init(cfg, 3);
        let mut g = Graph::new();
        let m = TapeModel::new(&mut g, &params);
        let (toks, idx) = micro_inputs(&mut g, &cfg, 8);
        let enc = encode(&mut g, &m, &toks, &idx).unwrap();
        let coarse = coarse_heads(&mut g, &m, &enc);
        let masks = build_masks(cfg.n_patches(), &vec![vec![0.0; cfg.n_patches()]; cfg.views], 0.5, 0.5, 8);
        let dec = decode(&mut g, &m, &enc, &masks).unwrap();
        let pc = point_and_camera_heads(&mut g, &m, &dec, &coarse);
        for v in 0..cfg.views {
            let a = g.value(coarse.cams[v].q).data.clone();
            let b = g.value(pc.cams_final[v].q).data.clone();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-6);
            }
            assert_eq!(g.value(coarse.cams[v].f).data, g.value(pc.cams_final[v].f).data);
        }
    }

    #[test]
    fn decoder_restores_full_grid_and_cardinality_chain() {
        let cfg = micro_cfg();
        let params = ModelParams::init(cfg, 4);
        let mut g = Graph::new();
        let m = TapeModel::new(&mut g, &params);
        let (toks, idx) = micro_inputs(&mut g, &cfg, 9);
        let enc = encode(&mut g, &m, &toks, &idx).unwrap();
        let scores = vec![vec![0.5f32; cfg.n_patches()]; cfg.views];
        let masks = build_masks(cfg.n_patches(), &scores, 0.5, 0.5, 9);
        let dec = decode(&mut g, &m, &enc, &masks).unwrap();
        for v in 0..cfg.views {
            assert_eq!(g.shape(dec.z_grid[v]), &[cfg.n_patches(), cfg.d]);
        }
        let fine = fine_heads(&mut g, &m, &dec);
        let fan = crate::gaussians::FAN_OUT;
        for v in 0..cfg.views {
            assert_eq!(g.shape(fine.anchor_mu[v]), &[cfg.n_g, 3]);
            assert_eq!(g.shape(fine.sem_mu[v]), &[cfg.n_g * fan, 3]);
            assert_eq!(g.shape(fine.app_mu[v]), &[cfg.n_g * fan * fan, 3]);
            assert_eq!(g.shape(fine.app_gamma[v]), &[cfg.n_g * fan * fan, SEM_DIM]);
        }
        let coarse = coarse_heads(&mut g, &m, &enc);
        let pc = point_and_camera_heads(&mut g, &m, &dec, &coarse);
        for v in 0..cfg.views {
            assert_eq!(g.shape(pc.p[v]), &[cfg.h * cfg.w, 3]);
            assert_eq!(g.shape(pc.u[v]), &[cfg.h * cfg.w]);
            assert!(g.value(pc.u[v]).data.iter().all(|&x| x >= 1.0));
        }
    }

    #[test]
    fn deterministic_outputs() {
        let cfg = micro_cfg();
        let run = || {
            let params = ModelParams::init(cfg, 11);
            let mut g = Graph::new();
            let m = TapeModel::new(&mut g, &params);
            let (toks, idx) = micro_inputs(&mut g, &cfg, 12);
            let enc = encode(&mut g, &m, &toks, &idx).unwrap();
            let coarse = coarse_heads(&mut g, &m, &enc);
            g.value(coarse.gauss_raw[0]).data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn view_permutation_equivariance() {
        // swapping the two views' tokens, indices, view embeddings, and
        // camera tokens swaps the corresponding outputs
        let cfg = micro_cfg();
        let params = ModelParams::init(cfg, 13);
        let forward = |params: &ModelParams, swap: bool| -> (Vec<f32>, Vec<f32>) {
            let mut g = Graph::new();
            let m = TapeModel::new(&mut g, params);
            let (mut toks, mut idx) = micro_inputs(&mut g, &cfg, 14);
            if swap {
                toks.swap(0, 1);
                idx.swap(0, 1);
            }
            let enc = encode(&mut g, &m, &toks, &idx).unwrap();
            (g.value(enc.y_vis[0]).data.clone(), g.value(enc.y_vis[1]).data.clone())
        };
        let (a0, a1) = forward(&params, false);
        let mut swapped = params.clone();
        let ve = swapped.tensors.get_mut("view_embed").unwrap();
        for k in 0..cfg.d {
            ve.data.swap(k, cfg.d + k);
        }
        let ct = swapped.tensors.get_mut("cam_tokens").unwrap();
        for k in 0..cfg.d {
            ct.data.swap(k, cfg.d + k);
        }
        let (b0, b1) = forward(&swapped, true);
        for (x, y) in a0.iter().zip(&b1) {
            assert!((x - y).abs() < 2e-4, "{x} vs {y}");
        }
        for (x, y) in a1.iter().zip(&b0) {
            assert!((x - y).abs() < 2e-4, "{x} vs {y}");
        }
    }

    #[test]
    fn softplus_head_examples() {
        // raw 0 -> beta = softplus(0) = ln 2; raw 0 -> U = 1 + ln 2
        assert!((crate::diff::softplus(0.0) - 0.693_147).abs() < 1e-5);
    }
}
