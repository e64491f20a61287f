//! Binary interchange formats: PPM renders, raw float planes, checkpoints,
//! and the line-oriented scene file.

use crate::camera::{cam_from_line, cam_to_line, CameraParams};
use crate::diff::Tensor;
use crate::gaussians::{gaussian_from_line, gaussian_to_line, RenderGaussian};
use crate::scene::{prim_from_line, prim_to_line, Primitive};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
}

fn format_err<T>(msg: impl Into<String>) -> Result<T, IoError> {
    Err(IoError::Format(msg.into()))
}

// ---------------------------------------------------------------------------
// PPM (P6, maxval 255)
// ---------------------------------------------------------------------------

/// `rgb` is `h·w·3` values in [0,1], row-major.
pub fn write_ppm(path: &Path, rgb: &[f32], h: usize, w: usize) -> Result<(), IoError> {
    if rgb.len() != h * w * 3 {
        return format_err(format!("ppm: expected {} values, got {}", h * w * 3, rgb.len()));
    }
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> =
        rgb.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<(Vec<f32>, usize, usize), IoError> {
    let data = std::fs::read(path)?;
    // header: three whitespace-separated fields after the magic
    if !data.starts_with(b"P6") {
        return format_err("ppm: bad magic");
    }
    let mut pos = 2;
    let mut fields = Vec::new();
    while fields.len() < 3 {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < data.len() && data[pos] == b'#' {
            while pos < data.len() && data[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < data.len() && !data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(
            std::str::from_utf8(&data[start..pos])
                .ok()
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| IoError::Format("ppm: bad header field".into()))?,
        );
    }
    pos += 1; // single whitespace after maxval
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return format_err("ppm: only maxval 255 supported");
    }
    let body = &data[pos..];
    if body.len() != h * w * 3 {
        return format_err(format!("ppm: expected {} bytes, got {}", h * w * 3, body.len()));
    }
    Ok((body.iter().map(|&b| b as f32 / 255.0).collect(), h, w))
}

// ---------------------------------------------------------------------------
// Float planes: `USPL` + u32 h,w,c (LE) + f32 LE data
// ---------------------------------------------------------------------------

pub fn write_plane(path: &Path, data: &[f32], h: usize, w: usize, c: usize) -> Result<(), IoError> {
    if data.len() != h * w * c {
        return format_err(format!("plane: expected {} values, got {}", h * w * c, data.len()));
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(b"USPL")?;
    f.write_all(&(h as u32).to_le_bytes())?;
    f.write_all(&(w as u32).to_le_bytes())?;
    f.write_all(&(c as u32).to_le_bytes())?;
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for &v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_plane(path: &Path) -> Result<(Vec<f32>, usize, usize, usize), IoError> {
    let data = std::fs::read(path)?;
    if data.len() < 16 || &data[0..4] != b"USPL" {
        return format_err("plane: bad header");
    }
    let u32_at = |i: usize| u32::from_le_bytes(data[i..i + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (u32_at(4), u32_at(8), u32_at(12));
    let body = &data[16..];
    if body.len() != h * w * c * 4 {
        return format_err("plane: size mismatch");
    }
    let vals = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((vals, h, w, c))
}

// ---------------------------------------------------------------------------
// Checkpoints: `USPCKPT1`, name-length-prefixed (name, shape, f32 LE data)
// records, zero-length name as terminator, config text to EOF
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8] = b"USPCKPT1";

pub fn save_checkpoint(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    config_text: &str,
) -> Result<(), IoError> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(CKPT_MAGIC)?;
    for (name, t) in tensors {
        f.write_all(&(name.len() as u32).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        f.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(t.data.len() * 4);
        for &v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes)?;
    }
    f.write_all(&0u32.to_le_bytes())?;
    f.write_all(config_text.as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(BTreeMap<String, Tensor>, String), IoError> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    if !data.starts_with(CKPT_MAGIC) {
        return format_err("checkpoint: bad magic");
    }
    let mut pos = CKPT_MAGIC.len();
    let mut need = |pos: &mut usize, n: usize| -> Result<std::ops::Range<usize>, IoError> {
        if *pos + n > data.len() {
            return format_err("checkpoint: truncated");
        }
        let r = *pos..*pos + n;
        *pos += n;
        Ok(r)
    };
    let mut tensors = BTreeMap::new();
    loop {
        let r = need(&mut pos, 4)?;
        let name_len = u32::from_le_bytes(data[r].try_into().unwrap()) as usize;
        if name_len == 0 {
            break;
        }
        let r = need(&mut pos, name_len)?;
        let name = std::str::from_utf8(&data[r])
            .map_err(|_| IoError::Format("checkpoint: non-utf8 name".into()))?
            .to_string();
        let r = need(&mut pos, 4)?;
        let ndim = u32::from_le_bytes(data[r].try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let r = need(&mut pos, 4)?;
            shape.push(u32::from_le_bytes(data[r].try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let r = need(&mut pos, numel * 4)?;
        let vals: Vec<f32> = data[r]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(shape, vals));
    }
    let config = String::from_utf8_lossy(&data[pos..]).into_owned();
    Ok((tensors, config))
}

// ---------------------------------------------------------------------------
// Scene files: `scene`, `cam`, `prim`, and `g` lines
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct SceneFile {
    /// `scene <views> <h> <w> <classes> <seed>` header, if present.
    pub meta: Option<(usize, usize, usize, usize, u64)>,
    pub cams: Vec<CameraParams>,
    pub prims: Vec<Primitive>,
    pub gaussians: Vec<RenderGaussian>,
}

pub fn write_scene_file(path: &Path, sf: &SceneFile) -> Result<(), IoError> {
    let mut out = String::new();
    if let Some((v, h, w, k, seed)) = sf.meta {
        out.push_str(&format!("scene {v} {h} {w} {k} {seed}\n"));
    }
    for c in &sf.cams {
        out.push_str(&cam_to_line(c));
        out.push('\n');
    }
    for p in &sf.prims {
        out.push_str(&prim_to_line(p));
        out.push('\n');
    }
    for gs in &sf.gaussians {
        out.push_str(&gaussian_to_line(gs));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_scene_file(path: &Path) -> Result<SceneFile, IoError> {
    let text = std::fs::read_to_string(path)?;
    let mut sf = SceneFile::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let kind = line.split_whitespace().next().unwrap();
        match kind {
            "scene" => {
                let parts: Vec<&str> = line.split_whitespace().skip(1).collect();
                if parts.len() != 5 {
                    return format_err(format!("line {}: scene header needs 5 fields", i + 1));
                }
                let p = |j: usize| -> Result<usize, IoError> {
                    parts[j]
                        .parse()
                        .map_err(|e| IoError::Format(format!("line {}: {e}", i + 1)))
                };
                let seed: u64 = parts[4]
                    .parse()
                    .map_err(|e| IoError::Format(format!("line {}: {e}", i + 1)))?;
                sf.meta = Some((p(0)?, p(1)?, p(2)?, p(3)?, seed));
            }
            "cam" => sf
                .cams
                .push(cam_from_line(line).map_err(|e| IoError::Format(format!("line {}: {e}", i + 1)))?),
            "prim" => sf.prims.push(
                prim_from_line(line).map_err(|e| IoError::Format(format!("line {}: {e}", i + 1)))?,
            ),
            "g" => sf.gaussians.push(
                gaussian_from_line(line)
                    .map_err(|e| IoError::Format(format!("line {}: {e}", i + 1)))?,
            ),
            other => return format_err(format!("line {}: unknown record `{other}`", i + 1)),
        }
    }
    Ok(sf)
}
