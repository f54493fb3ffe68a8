//! Procedural multi-plane scenes with exact ground truth.
//!
//! Every scene is a set of textured, possibly slanted rectangles floating in
//! front of an infinite backdrop, filmed by a small camera track. Depth,
//! pose, optical flow, and labels all come from the same closed-form
//! geometry, so they serve as oracles for the differentiable pipeline —
//! flow in particular is computed by scalar per-pixel projection, fully
//! independent of the graph warp.

use alloc::format;
use alloc::vec::Vec;
use core::marker::PhantomData;

#[allow(unused_imports)] // resolves f64 transcendentals when built without std
use num_traits::Float;

use crate::error::Error;
use crate::loss::warp::{CameraIntrinsics, RigidPose};
use crate::metrics::FlowField;
use crate::real::Real;
use crate::rng::{hash_mix, hash_unit, SplitMix64};
use crate::tensor::{Shape, Tensor};
use crate::Result;

/// One textured rectangle. `region` is the normalized [x0, y0, x1, y1]
/// footprint in the canonical (world-frame) camera; `depth` is the distance
/// of the rectangle center along that camera's axis, and `normal` tilts the
/// surface (z component must stay positive).
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneSpec {
    pub depth: f64,
    pub normal: [f64; 3],
    pub texture_seed: u64,
    pub label: i32,
    pub region: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub planes: Vec<PlaneSpec>,
    /// World-from-camera pose per frame; the canonical frame is the world.
    pub camera_track: Vec<RigidPose>,
    pub intrinsics: CameraIntrinsics,
    pub height: usize,
    pub width: usize,
    pub background_depth: f64,
    /// Backdrop orientation; z component must stay positive. The backdrop
    /// passes through the canonical optical axis at `background_depth`.
    pub background_normal: [f64; 3],
    pub background_seed: u64,
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("empty resolution".into()));
        }
        if self.camera_track.len() < 2 {
            return Err(Error::Config("camera track needs at least two frames".into()));
        }
        if !(self.background_depth > 0.0) || !self.background_depth.is_finite() {
            return Err(Error::Config(format!(
                "background depth must be positive, got {}",
                self.background_depth
            )));
        }
        if !(self.background_normal[2] > 0.0) {
            return Err(Error::Config("backdrop must face the canonical camera".into()));
        }
        for (i, p) in self.planes.iter().enumerate() {
            if !(p.depth > 0.0) || p.depth >= self.background_depth {
                return Err(Error::Config(format!(
                    "plane {i} depth {} outside (0, background {})",
                    p.depth, self.background_depth
                )));
            }
            if !(p.normal[2] > 0.0) {
                return Err(Error::Config(format!(
                    "plane {i} normal must face the canonical camera"
                )));
            }
            let r = p.region;
            let ok = r.iter().all(|v| (0.0..=1.0).contains(v)) && r[0] < r[2] && r[1] < r[3];
            if !ok {
                return Err(Error::Config(format!("plane {i} region {r:?} malformed")));
            }
            if p.label < 0 {
                return Err(Error::Config(format!("plane {i} has negative label")));
            }
        }
        Ok(())
    }
}

/// Knobs for random scene generation.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Inclusive range for the number of floating planes.
    pub num_planes: (usize, usize),
    /// Plane depths are drawn log-uniformly from this range.
    pub depth_range: (f64, f64),
    pub background_depth: f64,
    /// Per-step camera motion bounds (radians / scene units per component).
    pub max_rotation: f64,
    pub max_translation: f64,
    /// Total label count including background class 0.
    pub num_classes: usize,
    pub slanted: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 64,
            width: 64,
            num_planes: (2, 4),
            depth_range: (1.0, 12.0),
            background_depth: 14.0,
            max_rotation: 0.02,
            max_translation: 0.15,
            num_classes: 5,
            slanted: true,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("empty resolution".into()));
        }
        if self.num_planes.0 > self.num_planes.1 || self.num_planes.1 == 0 {
            return Err(Error::Config(format!(
                "bad plane count range {:?}",
                self.num_planes
            )));
        }
        let (lo, hi) = self.depth_range;
        if !(lo > 0.0) || !(hi > lo) || !(self.background_depth > hi) {
            return Err(Error::Config(format!(
                "need 0 < {lo} < {hi} < background {}",
                self.background_depth
            )));
        }
        if self.max_rotation < 0.0 || self.max_translation < 0.0 {
            return Err(Error::Config("negative motion bound".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need background plus at least one class".into()));
        }
        Ok(())
    }
}

/// Everything the training and evaluation loops need for one target frame:
/// the frame itself, its two neighbors, and exact geometry.
#[derive(Debug, Clone)]
pub struct FrameTriplet<T: Real> {
    /// (1, 3, H, W) target image.
    pub target: Tensor<T>,
    /// Previous and next frames, same shape as `target`.
    pub sources: [Tensor<T>; 2],
    /// (1, 1, H, W) target-frame depth along the camera axis.
    pub gt_depth: Tensor<T>,
    /// Source-from-target rigid motion per source frame.
    pub gt_poses: [RigidPose; 2],
    /// Target-to-next displacement field.
    pub gt_flow: FlowField,
    /// Row-major (H*W) class id per target pixel; background is 0.
    pub gt_labels: Vec<i32>,
}

// ---------------------------------------------------------------------------
// geometry helpers (plain scalar math; deliberately not the graph kernels)

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

struct PlaneGeom {
    n: [f64; 3],
    rho: f64,
    e1: [f64; 3],
    e2: [f64; 3],
    /// Pixel-coordinate region bounds in the canonical camera, or `None`
    /// for the unbounded backdrop.
    bounds: Option<[f64; 4]>,
    texture_seed: u64,
    label: i32,
}

struct CamFrame {
    /// Rotation rows of world-from-camera.
    r: [[f64; 3]; 3],
    o: [f64; 3],
}

impl CamFrame {
    fn of(pose: &RigidPose) -> Self {
        let m = pose.to_matrix();
        CamFrame {
            r: [
                [m[0][0], m[0][1], m[0][2]],
                [m[1][0], m[1][1], m[1][2]],
                [m[2][0], m[2][1], m[2][2]],
            ],
            o: [m[0][3], m[1][3], m[2][3]],
        }
    }

    fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        [dot(self.r[0], v), dot(self.r[1], v), dot(self.r[2], v)]
    }

    /// World point into this camera's frame (inverse rigid transform).
    fn to_camera(&self, p: [f64; 3]) -> [f64; 3] {
        let d = [p[0] - self.o[0], p[1] - self.o[1], p[2] - self.o[2]];
        [
            self.r[0][0] * d[0] + self.r[1][0] * d[1] + self.r[2][0] * d[2],
            self.r[0][1] * d[0] + self.r[1][1] * d[1] + self.r[2][1] * d[2],
            self.r[0][2] * d[0] + self.r[1][2] * d[1] + self.r[2][2] * d[2],
        ]
    }
}

fn ray_through(k: &CameraIntrinsics, x: f64, y: f64) -> [f64; 3] {
    [(x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0]
}

/// Projects a world point into a camera; returns (u, v, depth).
fn project(k: &CameraIntrinsics, cam: &CamFrame, p: [f64; 3]) -> (f64, f64, f64) {
    let c = cam.to_camera(p);
    (k.fx * c[0] / c[2] + k.cx, k.fy * c[1] / c[2] + k.cy, c[2])
}

const NEAR: f64 = 1e-3;

struct Hit {
    depth: f64,
    point: [f64; 3],
    plane: usize,
}

fn build_geoms(scene: &SyntheticScene) -> Vec<PlaneGeom> {
    let k = &scene.intrinsics;
    let mut geoms: Vec<PlaneGeom> = scene
        .planes
        .iter()
        .map(|p| {
            let n = normalize(p.normal);
            let cxr = 0.5 * (p.region[0] + p.region[2]) * (scene.width - 1) as f64;
            let cyr = 0.5 * (p.region[1] + p.region[3]) * (scene.height - 1) as f64;
            let center = ray_through(k, cxr, cyr);
            let center = [center[0] * p.depth, center[1] * p.depth, center[2] * p.depth];
            let helper = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
            let e2 = normalize(cross(n, helper));
            let e1 = normalize(cross(e2, n));
            PlaneGeom {
                n,
                rho: dot(n, center),
                e1,
                e2,
                bounds: Some([
                    p.region[0] * (scene.width - 1) as f64,
                    p.region[1] * (scene.height - 1) as f64,
                    p.region[2] * (scene.width - 1) as f64,
                    p.region[3] * (scene.height - 1) as f64,
                ]),
                texture_seed: p.texture_seed,
                label: p.label,
            }
        })
        .collect();
    let bn = normalize(scene.background_normal);
    let helper = if bn[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let be2 = normalize(cross(bn, helper));
    let be1 = normalize(cross(be2, bn));
    geoms.push(PlaneGeom {
        n: bn,
        rho: bn[2] * scene.background_depth,
        e1: be1,
        e2: be2,
        bounds: None,
        texture_seed: scene.background_seed,
        label: 0,
    });
    geoms
}

/// Nearest surface along the ray through pixel (x, y) of `cam`.
fn cast(k: &CameraIntrinsics, geoms: &[PlaneGeom], cam: &CamFrame, x: f64, y: f64) -> Option<Hit> {
    let dir = cam.rotate(ray_through(k, x, y));
    let mut best: Option<Hit> = None;
    for (idx, ge) in geoms.iter().enumerate() {
        let denom = dot(ge.n, dir);
        if denom.abs() < 1e-12 {
            continue;
        }
        let s = (ge.rho - dot(ge.n, cam.o)) / denom;
        if s < NEAR {
            continue;
        }
        let p = [
            cam.o[0] + s * dir[0],
            cam.o[1] + s * dir[1],
            cam.o[2] + s * dir[2],
        ];
        if let Some(b) = ge.bounds {
            // the footprint is defined by where the plane point appears in
            // the canonical camera
            if p[2] <= 0.0 {
                continue;
            }
            let u = k.fx * p[0] / p[2] + k.cx;
            let v = k.fy * p[1] / p[2] + k.cy;
            if u < b[0] || u > b[2] || v < b[1] || v > b[3] {
                continue;
            }
        }
        if best.as_ref().map_or(true, |h| s < h.depth) {
            best = Some(Hit {
                depth: s,
                point: p,
                plane: idx,
            });
        }
    }
    best
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, u: f64, v: f64) -> f64 {
    let iu = u.floor();
    let iv = v.floor();
    let fu = smoothstep(u - iu);
    let fv = smoothstep(v - iv);
    let (iu, iv) = (iu as i64 as u64, iv as i64 as u64);
    let c00 = hash_unit(seed, iu, iv);
    let c01 = hash_unit(seed, iu.wrapping_add(1), iv);
    let c10 = hash_unit(seed, iu, iv.wrapping_add(1));
    let c11 = hash_unit(seed, iu.wrapping_add(1), iv.wrapping_add(1));
    (1.0 - fv) * ((1.0 - fu) * c00 + fu * c01) + fv * ((1.0 - fu) * c10 + fu * c11)
}

/// View-consistent surface color: multi-octave value noise in the plane's
/// own coordinates, tinted by a per-plane base color. Always in [0, 1).
fn texture_at(ge: &PlaneGeom, p: [f64; 3]) -> [f64; 3] {
    let u = 2.0 * dot(p, ge.e1);
    let v = 2.0 * dot(p, ge.e2);
    let mut out = [0.0; 3];
    for (ch, slot) in out.iter_mut().enumerate() {
        let seed = hash_mix(ge.texture_seed, 0xc01 + ch as u64, 0);
        let mut acc = 0.0;
        let mut wsum = 0.0;
        let mut amp = 1.0;
        for octave in 0..3u32 {
            let f = f64::from(1u32 << octave);
            acc += amp * value_noise(hash_mix(seed, u64::from(octave), 1), u * f, v * f);
            wsum += amp;
            amp *= 0.5;
        }
        let base = hash_unit(ge.texture_seed, 0xba5e, ch as u64);
        *slot = 0.3 * base + 0.7 * (acc / wsum);
    }
    out
}

fn check_camera_clearance(geoms: &[PlaneGeom], cams: &[CamFrame]) -> Result<()> {
    for (ci, cam) in cams.iter().enumerate() {
        for ge in geoms {
            if (dot(ge.n, cam.o) - ge.rho).abs() < 1e-6 {
                return Err(Error::Usage(format!(
                    "camera {ci} lies in a scene plane; cannot render"
                )));
            }
        }
    }
    Ok(())
}

struct RenderedFrame<T: Real> {
    image: Tensor<T>,
    depth: Vec<f64>,
    labels: Vec<i32>,
}

fn render_frame<T: Real>(
    scene: &SyntheticScene,
    geoms: &[PlaneGeom],
    cam: &CamFrame,
) -> Result<RenderedFrame<T>> {
    let (h, w) = (scene.height, scene.width);
    let k = &scene.intrinsics;
    let mut pix = alloc::vec![T::zero(); 3 * h * w];
    let mut depth = alloc::vec![0.0f64; h * w];
    let mut labels = alloc::vec![0i32; h * w];
    for y in 0..h {
        for x in 0..w {
            let hit = cast(k, geoms, cam, x as f64, y as f64).ok_or_else(|| {
                Error::Usage(format!("no surface along ray at pixel ({x},{y})"))
            })?;
            let color = texture_at(&geoms[hit.plane], hit.point);
            for c in 0..3 {
                pix[c * h * w + y * w + x] = T::of(color[c]);
            }
            depth[y * w + x] = hit.depth;
            labels[y * w + x] = geoms[hit.plane].label;
        }
    }
    Ok(RenderedFrame {
        image: Tensor::new(Shape::new(1, 3, h, w), pix)?,
        depth,
        labels,
    })
}

/// Renders the triplet around `frame_index`: that frame as target plus its
/// two neighbors as sources, with exact depth, relative poses, and
/// target-to-next flow. Flow validity accounts for the image border and for
/// occlusion by a nearer surface in the next frame.
pub fn render_scene<T: Real>(scene: &SyntheticScene, frame_index: usize) -> Result<FrameTriplet<T>> {
    scene.validate()?;
    if frame_index == 0 || frame_index + 1 >= scene.camera_track.len() {
        return Err(Error::Usage(format!(
            "frame index {frame_index} has no neighbors in a track of {}",
            scene.camera_track.len()
        )));
    }
    let geoms = build_geoms(scene);
    let (h, w) = (scene.height, scene.width);
    let k = scene.intrinsics;
    let track = &scene.camera_track;
    let cams: Vec<CamFrame> = [frame_index - 1, frame_index, frame_index + 1]
        .iter()
        .map(|&i| CamFrame::of(&track[i]))
        .collect();
    check_camera_clearance(&geoms, &cams)?;

    let prev = render_frame::<T>(scene, &geoms, &cams[0])?;
    let tgt = render_frame::<T>(scene, &geoms, &cams[1])?;
    let next = render_frame::<T>(scene, &geoms, &cams[2])?;

    let pose_of = |src: usize| -> RigidPose {
        track[src].inverse().compose(&track[frame_index])
    };

    let mut flow = FlowField::zero(h, w);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let z = tgt.depth[i];
            let dir = cams[1].rotate(ray_through(&k, x as f64, y as f64));
            let p = [
                cams[1].o[0] + z * dir[0],
                cams[1].o[1] + z * dir[1],
                cams[1].o[2] + z * dir[2],
            ];
            let (ut, vt, _) = project(&k, &cams[1], p);
            let (un, vn, zn) = project(&k, &cams[2], p);
            flow.dx[i] = un - ut;
            flow.dy[i] = vn - vt;
            let inside =
                zn > NEAR && un >= 0.0 && un <= (w - 1) as f64 && vn >= 0.0 && vn <= (h - 1) as f64;
            let visible = inside
                && match cast(&k, &geoms, &cams[2], un, vn) {
                    Some(hit) => hit.depth >= zn * (1.0 - 1e-3),
                    None => false,
                };
            flow.valid[i] = visible;
            if !visible {
                flow.dx[i] = 0.0;
                flow.dy[i] = 0.0;
            }
        }
    }

    Ok(FrameTriplet {
        target: tgt.image,
        sources: [prev.image, next.image],
        gt_depth: Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, y, x| {
            T::of(tgt.depth[y * w + x])
        }),
        gt_poses: [pose_of(frame_index - 1), pose_of(frame_index + 1)],
        gt_flow: flow,
        gt_labels: tgt.labels,
    })
}

/// Draws a random scene: plane count, footprints, depths (log-uniform),
/// labels, textures, and a three-frame camera track whose middle frame is
/// the canonical camera.
/// Camera shared by every generated scene: fixed field of view with the
/// principal point at the pixel-grid center. Consumers that re-project
/// generated frames must use this same camera.
pub fn scene_intrinsics(height: usize, width: usize) -> CameraIntrinsics {
    CameraIntrinsics {
        fx: 0.8 * width as f64,
        fy: 0.8 * height as f64,
        cx: (width as f64 - 1.0) / 2.0,
        cy: (height as f64 - 1.0) / 2.0,
    }
}

pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SyntheticScene> {
    cfg.validate()?;
    let mut r = SplitMix64::fork(seed, 0x5ce9e);
    let (lo, hi) = cfg.num_planes;
    let count = lo + r.below(hi - lo + 1);
    let mut planes = Vec::with_capacity(count);
    for _ in 0..count {
        let cx = r.uniform(0.15, 0.85);
        let cy = r.uniform(0.15, 0.85);
        let hx = r.uniform(0.1, 0.35);
        let hy = r.uniform(0.1, 0.35);
        let region = [
            (cx - hx).max(0.02),
            (cy - hy).max(0.02),
            (cx + hx).min(0.98),
            (cy + hy).min(0.98),
        ];
        let depth = (r.uniform(cfg.depth_range.0.ln(), cfg.depth_range.1.ln())).exp();
        let normal = if cfg.slanted && r.below(2) == 1 {
            [r.uniform(-0.25, 0.25), r.uniform(-0.25, 0.25), 1.0]
        } else {
            [0.0, 0.0, 1.0]
        };
        planes.push(PlaneSpec {
            depth,
            normal,
            texture_seed: r.next_u64(),
            label: 1 + r.below(cfg.num_classes - 1) as i32,
            region,
        });
    }
    let step = |r: &mut SplitMix64| RigidPose {
        rotation: [
            r.uniform(-cfg.max_rotation, cfg.max_rotation),
            r.uniform(-cfg.max_rotation, cfg.max_rotation),
            r.uniform(-cfg.max_rotation, cfg.max_rotation),
        ],
        translation: [
            r.uniform(-cfg.max_translation, cfg.max_translation),
            r.uniform(-cfg.max_translation, cfg.max_translation),
            r.uniform(-cfg.max_translation, cfg.max_translation),
        ],
    };
    let camera_track = alloc::vec![step(&mut r), RigidPose::identity(), step(&mut r)];
    Ok(SyntheticScene {
        planes,
        camera_track,
        intrinsics: scene_intrinsics(cfg.height, cfg.width),
        height: cfg.height,
        width: cfg.width,
        background_depth: cfg.background_depth,
        background_normal: [0.0, 0.0, 1.0],
        background_seed: r.next_u64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    /// Even scene indices.
    Train,
    /// Odd scene indices.
    Val,
    All,
}

impl Split {
    fn admits(self, index: usize) -> bool {
        match self {
            Split::Train => index % 2 == 0,
            Split::Val => index % 2 == 1,
            Split::All => true,
        }
    }
}

/// Lazily generated triplet stream; fully determined by (config, seed).
pub struct DatasetIter<T: Real> {
    cfg: SceneConfig,
    seed: u64,
    next_index: usize,
    count: usize,
    split: Split,
    _ty: PhantomData<T>,
}

impl<T: Real> Iterator for DatasetIter<T> {
    type Item = Result<FrameTriplet<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        while self.next_index < self.count {
            let i = self.next_index;
            self.next_index += 1;
            if !self.split.admits(i) {
                continue;
            }
            let scene_seed = hash_mix(self.seed, 0xda7a, i as u64);
            let item = generate_scene(&self.cfg, scene_seed)
                .and_then(|scene| render_scene::<T>(&scene, 1));
            return Some(item);
        }
        None
    }
}

/// Reproducible triplet stream over `count` scene indices, filtered by the
/// parity split.
pub fn dataset<T: Real>(cfg: &SceneConfig, count: usize, seed: u64, split: Split) -> DatasetIter<T> {
    DatasetIter {
        cfg: cfg.clone(),
        seed,
        next_index: 0,
        count,
        split,
        _ty: PhantomData,
    }
}
