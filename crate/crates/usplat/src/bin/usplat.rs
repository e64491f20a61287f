use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use usplat::config::RunConfig;
use usplat::io::{self, SceneFile};
use usplat::raster::{render, ChannelSelect, FieldRef, RasterSettings};
use usplat::scene::{gen_scene, SceneConfig};
use usplat::trainer::Trainer;

#[derive(Parser)]
#[command(name = "usplat", about = "Desk-scale hierarchical Gaussian splatting harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Parser, Debug, Default)]
struct CommonOpts {
    /// Flat `key = value` run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the number of training views.
    #[arg(long)]
    views: Option<usize>,
    /// Overrides the number of optimization steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Checkpoint to resume from / evaluate / render.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-view scene and write it to disk.
    GenScene(CommonOpts),
    /// Train the model on a synthetic scene, logging per-step losses.
    Train(CommonOpts),
    /// Render RGB / semantic / depth maps from a checkpoint.
    Render(CommonOpts),
    /// Visualize the dual-masking pattern on the input views.
    MaskVis(CommonOpts),
    /// Evaluate a checkpoint (source views, held-out views, pose metrics).
    Eval(CommonOpts),
    /// Run the finite-difference gradient suite; nonzero exit on violation.
    Gradcheck(CommonOpts),
}

fn run_config(opts: &CommonOpts) -> Result<RunConfig, String> {
    let mut cfg = match &opts.config {
        Some(p) => RunConfig::load(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(v) = opts.views {
        cfg.views = v;
    }
    if let Some(s) = opts.steps {
        cfg.steps = s;
    }
    Ok(cfg)
}

fn out_dir(opts: &CommonOpts) -> Result<PathBuf, String> {
    let dir = opts.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    std::fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    Ok(dir)
}

fn cmd_gen_scene(opts: &CommonOpts) -> Result<(), String> {
    let cfg = run_config(opts)?;
    let dir = out_dir(opts)?;
    let sc = SceneConfig {
        views: cfg.views + cfg.eval_views,
        h: cfg.height,
        w: cfg.width,
        classes: cfg.classes,
        primitives: cfg.primitives,
        focal: cfg.focal,
    };
    let scene = gen_scene(&sc, cfg.seed).map_err(|e| e.to_string())?;
    let sf = SceneFile {
        meta: Some((sc.views, sc.h, sc.w, sc.classes, cfg.seed)),
        cams: scene.cameras.clone(),
        prims: scene.primitives.clone(),
        gaussians: Vec::new(),
    };
    io::write_scene_file(&dir.join("scene.txt"), &sf).map_err(|e| e.to_string())?;
    for v in 0..sc.views {
        io::write_ppm(&dir.join(format!("view{v:02}.ppm")), &scene.images[v].data, sc.h, sc.w)
            .map_err(|e| e.to_string())?;
        io::write_plane(
            &dir.join(format!("depth{v:02}.plane")),
            &scene.gt_depth[v].data,
            sc.h,
            sc.w,
            1,
        )
        .map_err(|e| e.to_string())?;
        let sem: Vec<f32> = scene.gt_sem[v].iter().map(|&c| c as f32).collect();
        io::write_plane(&dir.join(format!("sem{v:02}.plane")), &sem, sc.h, sc.w, 1)
            .map_err(|e| e.to_string())?;
    }
    println!("wrote {} views to {}", sc.views, dir.display());
    Ok(())
}

fn cmd_train(opts: &CommonOpts) -> Result<(), String> {
    let cfg = run_config(opts)?;
    let dir = out_dir(opts)?;
    let mut tr = match &opts.checkpoint {
        Some(p) => Trainer::from_checkpoint(p).map_err(|e| e.to_string())?,
        None => Trainer::new(cfg.clone()).map_err(|e| e.to_string())?,
    };
    let steps = opts.steps.unwrap_or(tr.cfg.steps);
    let log_file = File::create(dir.join("train.jsonl")).map_err(|e| e.to_string())?;
    let mut log = BufWriter::new(log_file);
    tr.train(steps, Some(&mut log), Some(&dir)).map_err(|e| e.to_string())?;
    log.flush().map_err(|e| e.to_string())?;
    tr.save_checkpoint(&dir.join("final.ckpt")).map_err(|e| e.to_string())?;
    println!("trained {steps} steps; checkpoint at {}", dir.join("final.ckpt").display());
    Ok(())
}

fn cmd_render(opts: &CommonOpts) -> Result<(), String> {
    let ckpt = opts.checkpoint.as_ref().ok_or("render needs --checkpoint")?;
    let dir = out_dir(opts)?;
    let tr = Trainer::from_checkpoint(ckpt).map_err(|e| e.to_string())?;
    let (sem_field, app_field, cams) = tr.predict_field().map_err(|e| e.to_string())?;
    let st = RasterSettings::new(tr.cfg.height, tr.cfg.width);
    for (v, cam) in cams.iter().enumerate() {
        let app = render(
            cam,
            &FieldRef::Render(&app_field),
            ChannelSelect { rgb: true, sem: false, importance: false, depth: true },
            &st,
        )
        .map_err(|e| e.to_string())?;
        let sem = render(
            cam,
            &FieldRef::Render(&sem_field),
            ChannelSelect { rgb: false, sem: true, importance: true, depth: false },
            &st,
        )
        .map_err(|e| e.to_string())?;
        io::write_ppm(&dir.join(format!("rgb{v:02}.ppm")), &app.rgb, st.h, st.w)
            .map_err(|e| e.to_string())?;
        io::write_plane(&dir.join(format!("depth{v:02}.plane")), &app.depth, st.h, st.w, 1)
            .map_err(|e| e.to_string())?;
        io::write_plane(&dir.join(format!("sem{v:02}.plane")), &sem.sem, st.h, st.w, 64)
            .map_err(|e| e.to_string())?;
        io::write_plane(
            &dir.join(format!("importance{v:02}.plane")),
            &sem.importance,
            st.h,
            st.w,
            1,
        )
        .map_err(|e| e.to_string())?;
    }
    let sf = SceneFile {
        meta: None,
        cams,
        prims: Vec::new(),
        gaussians: sem_field.into_iter().chain(app_field).collect(),
    };
    io::write_scene_file(&dir.join("field.txt"), &sf).map_err(|e| e.to_string())?;
    println!("rendered {} views to {}", tr.cfg.views, dir.display());
    Ok(())
}

fn cmd_mask_vis(opts: &CommonOpts) -> Result<(), String> {
    let cfg = run_config(opts)?;
    let dir = out_dir(opts)?;
    let tr = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
    let masks = tr.mask_preview(cfg.seed).map_err(|e| e.to_string())?;
    let (h, w, p) = (cfg.height, cfg.width, cfg.patch);
    let gw = w / p;
    let dim_hidden = |img: &[f32], keep: &[bool]| -> Vec<f32> {
        let mut out = img.to_vec();
        for y in 0..h {
            for x in 0..w {
                if !keep[(y / p) * gw + x / p] {
                    for c in 0..3 {
                        out[(y * w + x) * 3 + c] *= 0.25;
                    }
                }
            }
        }
        out
    };
    let bitstring = |keep: &[bool]| -> String {
        keep.iter().map(|&k| if k { '1' } else { '0' }).collect()
    };
    let n_p = (h / p) * gw;
    let mut enc_keep = Vec::with_capacity(cfg.views);
    let mut dec_keep = Vec::with_capacity(cfg.views);
    for v in 0..cfg.views {
        enc_keep.push(masks.enc[v].iter().map(|&hid| !hid).collect::<Vec<bool>>());
        let surviving = masks.surviving_indices(v);
        let mut keep = vec![false; n_p];
        for i in surviving {
            keep[i] = true;
        }
        dec_keep.push(keep);
    }
    for v in 0..cfg.views {
        let img = &tr.scene.images[v].data;
        io::write_ppm(&dir.join(format!("enc{v:02}.ppm")), &dim_hidden(img, &enc_keep[v]), h, w)
            .map_err(|e| e.to_string())?;
        io::write_ppm(&dir.join(format!("dec{v:02}.ppm")), &dim_hidden(img, &dec_keep[v]), h, w)
            .map_err(|e| e.to_string())?;
    }
    let mut dump = String::new();
    dump.push_str("# encoder (stage 1), 1 = token visible to the encoder\n");
    for v in 0..cfg.views {
        dump.push_str(&format!("v{v}: {}\n", bitstring(&enc_keep[v])));
    }
    dump.push_str("# decoder (stage 2), 1 = token survives both stages\n");
    for v in 0..cfg.views {
        dump.push_str(&format!("v{v}: {}\n", bitstring(&dec_keep[v])));
    }
    std::fs::write(dir.join("masks.txt"), dump).map_err(|e| e.to_string())?;
    println!("wrote mask overlays for {} views to {}", cfg.views, dir.display());
    Ok(())
}

fn cmd_eval(opts: &CommonOpts) -> Result<(), String> {
    let ckpt = opts.checkpoint.as_ref().ok_or("eval needs --checkpoint")?;
    let tr = Trainer::from_checkpoint(ckpt).map_err(|e| e.to_string())?;
    let report = tr.evaluate().map_err(|e| e.to_string())?;
    let line = serde_json::to_string(&report).map_err(|e| e.to_string())?;
    println!("{line}");
    if let Some(out) = &opts.out {
        std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
        std::fs::write(out.join("eval.json"), format!("{line}\n")).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn cmd_gradcheck(opts: &CommonOpts) -> Result<(), String> {
    let results = usplat::gradsuite::run_suite();
    let mut lines = String::new();
    for r in &results {
        let line = serde_json::to_string(r).map_err(|e| e.to_string())?;
        println!("{line}");
        lines.push_str(&line);
        lines.push('\n');
    }
    if let Some(out) = &opts.out {
        std::fs::create_dir_all(out).map_err(|e| e.to_string())?;
        std::fs::write(out.join("gradcheck.jsonl"), lines).map_err(|e| e.to_string())?;
    }
    if results.iter().any(|r| !r.pass) {
        return Err("gradient check failed".into());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::GenScene(o) => cmd_gen_scene(o),
        Cmd::Train(o) => cmd_train(o),
        Cmd::Render(o) => cmd_render(o),
        Cmd::MaskVis(o) => cmd_mask_vis(o),
        Cmd::Eval(o) => cmd_eval(o),
        Cmd::Gradcheck(o) => cmd_gradcheck(o),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
