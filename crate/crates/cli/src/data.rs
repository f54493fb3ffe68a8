//! On-disk dataset layout: one directory per sample holding binary PPM
//! images, a PGM label map, raw little-endian depth/flow buffers and a pose
//! table, indexed by a top-level manifest. The loader accepts anything in
//! this layout, so externally produced frames can stand in for the
//! generator's.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use pfn_core::loss::RigidPose;
use pfn_core::metrics::FlowField;
use pfn_core::synth::{dataset, FrameTriplet, SceneConfig, Split};
use pfn_core::{Shape, Tensor};

pub const DATASET_FORMAT: &str = "pfn-dataset-v1";

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub samples: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseFile {
    /// Source-from-target motions, previous frame first.
    poses: Vec<PoseEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PoseEntry {
    rotation: [f64; 3],
    translation: [f64; 3],
}

// ---- PPM / PGM ----

/// Writes batch entry `n` of a (N,3,H,W) image as binary PPM, quantized to
/// 8 bits.
pub fn save_ppm(path: &Path, image: &Tensor<f32>, n: usize) -> Result<()> {
    let s = image.shape;
    if s.c != 3 || n >= s.n {
        bail!("save_ppm wants (N,3,H,W) and a valid batch index, got {s} [{n}]");
    }
    let mut out = format!("P6\n{} {}\n255\n", s.w, s.h).into_bytes();
    let data = image.data();
    for y in 0..s.h {
        for x in 0..s.w {
            for ch in 0..3 {
                let v = data[s.idx(n, ch, y, x)];
                out.push(quantize(v));
            }
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8
}

pub fn load_ppm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (magic, w, h, maxval, payload) = parse_netpbm_header(&bytes, path)?;
    if &magic != b"P6" {
        bail!("{}: expected P6, got {:?}", path.display(), magic);
    }
    if payload.len() < w * h * 3 {
        bail!("{}: truncated pixel data", path.display());
    }
    let scale = 1.0 / maxval as f32;
    let t = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        payload[(y * w + x) * 3 + c] as f32 * scale
    });
    Ok(t)
}

pub fn save_pgm(path: &Path, labels: &[i32], h: usize, w: usize) -> Result<()> {
    if labels.len() != h * w {
        bail!("save_pgm wants {}x{} labels, got {}", h, w, labels.len());
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for &l in labels {
        if !(0..=255).contains(&l) {
            bail!("label {l} does not fit one byte");
        }
        out.push(l as u8);
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_pgm(path: &Path) -> Result<(Vec<i32>, usize, usize)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (magic, w, h, _maxval, payload) = parse_netpbm_header(&bytes, path)?;
    if &magic != b"P5" {
        bail!("{}: expected P5, got {:?}", path.display(), magic);
    }
    if payload.len() < w * h {
        bail!("{}: truncated label data", path.display());
    }
    Ok((payload[..w * h].iter().map(|&b| b as i32).collect(), h, w))
}

/// Advances past leading whitespace, then returns the (start, end) of the
/// next whitespace-free run.
fn netpbm_token(bytes: &[u8], pos: &mut usize) -> Option<(usize, usize)> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then_some((start, *pos))
}

/// Parses "Pn\n<w> <h>\n<maxval>\n" headers (whitespace-separated tokens, no
/// comments) and returns the payload after the header.
fn parse_netpbm_header<'a>(
    bytes: &'a [u8],
    path: &Path,
) -> Result<([u8; 2], usize, usize, usize, &'a [u8])> {
    let mut pos = 0;
    let (ms, me) = netpbm_token(bytes, &mut pos)
        .with_context(|| format!("{}: truncated header", path.display()))?;
    if me - ms != 2 {
        bail!("{}: bad magic", path.display());
    }
    let magic = [bytes[ms], bytes[ms + 1]];
    let mut number = |what: &str| -> Result<usize> {
        let (s, e) = netpbm_token(bytes, &mut pos)
            .with_context(|| format!("{}: truncated header", path.display()))?;
        std::str::from_utf8(&bytes[s..e])?
            .parse::<usize>()
            .with_context(|| format!("{}: bad {what}", path.display()))
    };
    let w = number("width")?;
    let h = number("height")?;
    let maxval = number("maxval")?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        bail!("{}: unsupported dimensions {w}x{h}/{maxval}", path.display());
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() {
        bail!("{}: missing payload", path.display());
    }
    pos += 1;
    Ok((magic, w, h, maxval, &bytes[pos..]))
}

// ---- raw plane buffers ----

/// Writes `planes` as one file: u32 height, u32 width, u32 plane count,
/// then each plane as h*w little-endian f32.
pub fn save_planes(path: &Path, h: usize, w: usize, planes: &[&[f32]]) -> Result<()> {
    let mut out = Vec::with_capacity(12 + planes.len() * h * w * 4);
    for v in [h as u32, w as u32, planes.len() as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for plane in planes {
        if plane.len() != h * w {
            bail!("plane holds {} values, expected {}", plane.len(), h * w);
        }
        for &v in *plane {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn load_planes(path: &Path, expected: usize) -> Result<(usize, usize, Vec<Vec<f32>>)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.len() < 12 {
        bail!("{}: truncated header", path.display());
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
    let (h, w, k) = (word(0), word(1), word(2));
    if k != expected {
        bail!("{}: holds {k} planes, expected {expected}", path.display());
    }
    if bytes.len() != 12 + k * h * w * 4 {
        bail!("{}: payload size mismatch", path.display());
    }
    let mut planes = Vec::with_capacity(k);
    let mut off = 12;
    for _ in 0..k {
        let mut plane = Vec::with_capacity(h * w);
        for _ in 0..h * w {
            plane.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
            off += 4;
        }
        planes.push(plane);
    }
    Ok((h, w, planes))
}

// ---- dataset export / import ----

/// Renders `count` scene indices (filtered by `split`) into `dir` and
/// writes the manifest. Returns the number of samples written.
pub fn export_dataset(
    dir: &Path,
    cfg: &SceneConfig,
    count: usize,
    seed: u64,
    split: Split,
) -> Result<usize> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut samples = Vec::new();
    for (i, item) in dataset::<f32>(cfg, count, seed, split).enumerate() {
        let triplet = item.map_err(|e| anyhow::anyhow!("scene generation: {e}"))?;
        let name = format!("sample-{i:04}");
        write_triplet(&dir.join(&name), &triplet)?;
        samples.push(name);
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        height: cfg.height,
        width: cfg.width,
        num_classes: cfg.num_classes,
        seed,
        samples,
    };
    fs::write(
        dir.join("manifest.toml"),
        toml::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest.samples.len())
}

fn write_triplet(dir: &Path, t: &FrameTriplet<f32>) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_ppm(&dir.join("target.ppm"), &t.target, 0)?;
    save_ppm(&dir.join("src-0.ppm"), &t.sources[0], 0)?;
    save_ppm(&dir.join("src-1.ppm"), &t.sources[1], 0)?;
    let s = t.gt_depth.shape;
    save_planes(&dir.join("depth.bin"), s.h, s.w, &[t.gt_depth.data()])?;
    let flow = &t.gt_flow;
    let dx: Vec<f32> = flow.dx.iter().map(|&v| v as f32).collect();
    let dy: Vec<f32> = flow.dy.iter().map(|&v| v as f32).collect();
    let valid: Vec<f32> = flow.valid.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    save_planes(&dir.join("flow.bin"), flow.h, flow.w, &[&dx, &dy, &valid])?;
    save_pgm(&dir.join("labels.pgm"), &t.gt_labels, s.h, s.w)?;
    let poses = PoseFile {
        poses: t
            .gt_poses
            .iter()
            .map(|p| PoseEntry {
                rotation: p.rotation,
                translation: p.translation,
            })
            .collect(),
    };
    fs::write(dir.join("poses.toml"), toml::to_string_pretty(&poses)?)?;
    Ok(())
}

pub fn load_triplet(dir: &Path) -> Result<FrameTriplet<f32>> {
    let target = load_ppm(&dir.join("target.ppm"))?;
    let src0 = load_ppm(&dir.join("src-0.ppm"))?;
    let src1 = load_ppm(&dir.join("src-1.ppm"))?;
    let (h, w) = (target.shape.h, target.shape.w);
    let (dh, dw, depth_planes) = load_planes(&dir.join("depth.bin"), 1)?;
    if (dh, dw) != (h, w) {
        bail!("{}: depth is {dh}x{dw}, images are {h}x{w}", dir.display());
    }
    let gt_depth = Tensor::new(
        Shape::new(1, 1, h, w),
        depth_planes.into_iter().next().unwrap(),
    )
    .map_err(|e| anyhow::anyhow!("{e}"))?;
    let (fh, fw, flow_planes) = load_planes(&dir.join("flow.bin"), 3)?;
    if (fh, fw) != (h, w) {
        bail!("{}: flow is {fh}x{fw}, images are {h}x{w}", dir.display());
    }
    let flow = FlowField {
        h,
        w,
        dx: flow_planes[0].iter().map(|&v| v as f64).collect(),
        dy: flow_planes[1].iter().map(|&v| v as f64).collect(),
        valid: flow_planes[2].iter().map(|&v| v > 0.5).collect(),
    };
    let (labels, lh, lw) = load_pgm(&dir.join("labels.pgm"))?;
    if (lh, lw) != (h, w) {
        bail!("{}: labels are {lh}x{lw}, images are {h}x{w}", dir.display());
    }
    let pose_text = fs::read_to_string(dir.join("poses.toml"))?;
    let pose_file: PoseFile = toml::from_str(&pose_text)?;
    if pose_file.poses.len() != 2 {
        bail!("{}: need 2 poses, got {}", dir.display(), pose_file.poses.len());
    }
    let pose = |i: usize| RigidPose {
        rotation: pose_file.poses[i].rotation,
        translation: pose_file.poses[i].translation,
    };
    Ok(FrameTriplet {
        target,
        sources: [src0, src1],
        gt_depth,
        gt_poses: [pose(0), pose(1)],
        gt_flow: flow,
        gt_labels: labels,
    })
}

pub fn load_dataset(dir: &Path) -> Result<Vec<(PathBuf, FrameTriplet<f32>)>> {
    let text = fs::read_to_string(dir.join("manifest.toml"))
        .with_context(|| format!("no manifest in {}", dir.display()))?;
    let manifest: DatasetManifest = toml::from_str(&text)?;
    if manifest.format != DATASET_FORMAT {
        bail!("unsupported dataset format {:?}", manifest.format);
    }
    let mut out = Vec::with_capacity(manifest.samples.len());
    for name in &manifest.samples {
        let sample_dir = dir.join(name);
        let triplet =
            load_triplet(&sample_dir).with_context(|| format!("loading {name}"))?;
        out.push((sample_dir, triplet));
    }
    Ok(out)
}
