//! Rigid camera motion and differentiable image warping.
//!
//! Poses are axis-angle rotation plus translation, mapping points from the
//! target camera frame into the source camera frame. The warp builds the
//! whole reprojection into the graph, so gradients reach depth, pose, and
//! the sampled source image.

use alloc::format;
use alloc::vec::Vec;

#[allow(unused_imports)] // resolves f64 transcendentals when built without std
use num_traits::Float;

use crate::engine::{Graph, TensorId};
use crate::error::Error;
use crate::real::{real, Real};
use crate::tensor::{Shape, Tensor};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let all_finite = self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx.is_finite()
            && self.cy.is_finite();
        if !all_finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Config(format!(
                "bad intrinsics: fx {} fy {} cx {} cy {}",
                self.fx, self.fy, self.cx, self.cy
            )));
        }
        Ok(())
    }
}

pub type Mat4 = [[f64; 4]; 4];

pub fn mat4_identity() -> Mat4 {
    let mut m = [[0.0; 4]; 4];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    m
}

pub fn mat4_mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            let mut acc = 0.0;
            for (k, brow) in b.iter().enumerate() {
                acc += a[i][k] * brow[j];
            }
            out[i][j] = acc;
        }
    }
    out
}

/// Axis-angle rotation (radians) and translation, both in the target frame;
/// applying the pose yields source-frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl RigidPose {
    pub fn identity() -> Self {
        RigidPose {
            rotation: [0.0; 3],
            translation: [0.0; 3],
        }
    }

    /// Rodrigues expansion R = I + A·K + B·K² with K the skew matrix of the
    /// rotation vector; Taylor forms below 1e-6 radians keep it smooth.
    pub fn to_matrix(&self) -> Mat4 {
        let [wx, wy, wz] = self.rotation;
        let th2 = wx * wx + wy * wy + wz * wz;
        let th = th2.sqrt();
        let (a, b) = if th < 1e-6 {
            (1.0 - th2 / 6.0, 0.5 - th2 / 24.0)
        } else {
            ((th.sin()) / th, (1.0 - th.cos()) / th2)
        };
        let mut m = mat4_identity();
        m[0][0] = 1.0 + b * (wx * wx - th2);
        m[0][1] = -a * wz + b * wx * wy;
        m[0][2] = a * wy + b * wx * wz;
        m[1][0] = a * wz + b * wx * wy;
        m[1][1] = 1.0 + b * (wy * wy - th2);
        m[1][2] = -a * wx + b * wy * wz;
        m[2][0] = -a * wy + b * wx * wz;
        m[2][1] = a * wx + b * wy * wz;
        m[2][2] = 1.0 + b * (wz * wz - th2);
        m[0][3] = self.translation[0];
        m[1][3] = self.translation[1];
        m[2][3] = self.translation[2];
        m
    }

    /// Log map of the rotation block plus the translation column. Defined
    /// for rotations strictly inside the pi-radius ball.
    pub fn from_matrix(m: &Mat4) -> Self {
        let tr = m[0][0] + m[1][1] + m[2][2];
        let c = ((tr - 1.0) / 2.0).max(-1.0).min(1.0);
        let th = c.acos();
        let s = if th < 1e-9 { 0.5 } else { th / (2.0 * th.sin()) };
        RigidPose {
            rotation: [
                (m[2][1] - m[1][2]) * s,
                (m[0][2] - m[2][0]) * s,
                (m[1][0] - m[0][1]) * s,
            ],
            translation: [m[0][3], m[1][3], m[2][3]],
        }
    }

    /// Transform applying `rhs` first, then `self`.
    pub fn compose(&self, rhs: &RigidPose) -> Self {
        Self::from_matrix(&mat4_mul(&self.to_matrix(), &rhs.to_matrix()))
    }

    pub fn inverse(&self) -> Self {
        let m = self.to_matrix();
        let mut inv = mat4_identity();
        for i in 0..3 {
            for j in 0..3 {
                inv[i][j] = m[j][i];
            }
            inv[i][3] = -(m[0][i] * m[0][3] + m[1][i] * m[1][3] + m[2][i] * m[2][3]);
        }
        Self::from_matrix(&inv)
    }

    /// Applies the pose to a point.
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = self.to_matrix();
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
        }
        out
    }
}

/// Packs one pose per batch entry into the (N, 6, 1, 1) channel layout the
/// graph-side pose math expects: rotation vector, then translation.
pub fn poses_to_tensor<T: Real>(poses: &[RigidPose]) -> Tensor<T> {
    let mut data = Vec::with_capacity(poses.len() * 6);
    for p in poses {
        for v in p.rotation {
            data.push(real(v));
        }
        for v in p.translation {
            data.push(real(v));
        }
    }
    Tensor::new(Shape::new(poses.len(), 6, 1, 1), data).expect("pose layout")
}

/// Inverse of [`poses_to_tensor`] over plain values.
pub fn tensor_to_poses<T: Real>(t: &Tensor<T>) -> Result<Vec<RigidPose>> {
    let s = t.shape;
    if s.c != 6 || s.h != 1 || s.w != 1 {
        return Err(Error::shape("pose tensor", format!("expected (n,6,1,1), got {s}")));
    }
    let d = t.data();
    Ok((0..s.n)
        .map(|n| RigidPose {
            rotation: [
                d[n * 6].as_f64(),
                d[n * 6 + 1].as_f64(),
                d[n * 6 + 2].as_f64(),
            ],
            translation: [
                d[n * 6 + 3].as_f64(),
                d[n * 6 + 4].as_f64(),
                d[n * 6 + 5].as_f64(),
            ],
        })
        .collect())
}

/// Graph-side rotation matrix (nine per-batch scalars, row major) and
/// translation (three), built from a (N, 6, 1, 1) pose node. The smoothing
/// term inside the square root keeps the zero-rotation point differentiable.
pub fn pose_transform_nodes<T: Real>(
    g: &mut Graph<T>,
    pose: TensorId,
) -> Result<([TensorId; 9], [TensorId; 3])> {
    let s = g.shape(pose);
    if s.c != 6 || s.h != 1 || s.w != 1 {
        return Err(Error::shape("pose nodes", format!("expected (n,6,1,1), got {s}")));
    }
    let wx = g.slice_channels(pose, 0, 1)?;
    let wy = g.slice_channels(pose, 1, 1)?;
    let wz = g.slice_channels(pose, 2, 1)?;
    let tx = g.slice_channels(pose, 3, 1)?;
    let ty = g.slice_channels(pose, 4, 1)?;
    let tz = g.slice_channels(pose, 5, 1)?;

    let wx2 = g.mul(wx, wx)?;
    let wy2 = g.mul(wy, wy)?;
    let wz2 = g.mul(wz, wz)?;
    let th2 = {
        let t = g.add(wx2, wy2)?;
        g.add(t, wz2)?
    };
    let tg2 = g.add_scalar(th2, real(1e-12));
    let tg = g.sqrt(tg2);
    let sin_tg = g.sin(tg);
    let cos_tg = g.cos(tg);
    let a = g.div(sin_tg, tg)?;
    let one_minus_cos = {
        let neg = g.scale(cos_tg, real(-1.0));
        g.add_scalar(neg, real(1.0))
    };
    let b = g.div(one_minus_cos, tg2)?;

    let wxwy = g.mul(wx, wy)?;
    let wxwz = g.mul(wx, wz)?;
    let wywz = g.mul(wy, wz)?;

    let diag = |g: &mut Graph<T>, w2: TensorId| -> Result<TensorId> {
        let d = g.sub(w2, th2)?;
        let bd = g.mul(b, d)?;
        Ok(g.add_scalar(bd, real(1.0)))
    };
    let r00 = diag(g, wx2)?;
    let r11 = diag(g, wy2)?;
    let r22 = diag(g, wz2)?;

    let off = |g: &mut Graph<T>, skew: TensorId, sign: f64, prod: TensorId| -> Result<TensorId> {
        let asym = g.mul(a, skew)?;
        let asym = g.scale(asym, real(sign));
        let sym = g.mul(b, prod)?;
        g.add(asym, sym)
    };
    let r01 = off(g, wz, -1.0, wxwy)?;
    let r02 = off(g, wy, 1.0, wxwz)?;
    let r10 = off(g, wz, 1.0, wxwy)?;
    let r12 = off(g, wx, -1.0, wywz)?;
    let r20 = off(g, wy, -1.0, wxwz)?;
    let r21 = off(g, wx, 1.0, wywz)?;

    Ok(([r00, r01, r02, r10, r11, r12, r20, r21, r22], [tx, ty, tz]))
}

/// Warp result: sampled image node plus a constant validity mask (1 where
/// the reprojection lands inside the source frame with positive depth).
#[derive(Debug, Clone, Copy)]
pub struct Warped {
    pub image: TensorId,
    pub valid: TensorId,
    /// Source-frame sample abscissa per target pixel, exposed so external
    /// geometry (synthetic flow, diagnostics) can be checked against it.
    pub sample_x: TensorId,
    pub sample_y: TensorId,
}

/// Border tolerance when classifying a projection as inside the frame;
/// absorbs round-off so an identity pose keeps every pixel valid.
const BORDER_TOL: f64 = 1e-3;
const Z_MIN: f64 = 1e-6;

/// Back-projects every target pixel with its depth, moves it by `pose`, and
/// samples `source` at the reprojection. Differentiable in source, depth,
/// and pose; the validity mask is a constant, so masking carries no
/// gradient of its own.
pub fn warp<T: Real>(
    g: &mut Graph<T>,
    source: TensorId,
    depth: TensorId,
    pose: TensorId,
    k: &CameraIntrinsics,
) -> Result<Warped> {
    k.validate()?;
    let ss = g.shape(source);
    let ds = g.shape(depth);
    if ds.n != ss.n || ds.c != 1 || ds.h != ss.h || ds.w != ss.w {
        return Err(Error::shape(
            "warp",
            format!("depth {ds} does not match source {ss}"),
        ));
    }
    if g.values(depth).iter().any(|v| !(*v > T::zero())) {
        return Err(Error::Usage("warp requires strictly positive depth".into()));
    }

    let (r, t) = pose_transform_nodes(g, pose)?;
    if g.shape(pose).n != ss.n {
        return Err(Error::shape("warp", "pose batch does not match source"));
    }

    let (n, h, w) = (ss.n, ss.h, ss.w);
    let rx = Tensor::from_fn(Shape::new(n, 1, h, w), |_, _, _, x| {
        real::<T>((x as f64 - k.cx) / k.fx)
    });
    let ry = Tensor::from_fn(Shape::new(n, 1, h, w), |_, _, y, _| {
        real::<T>((y as f64 - k.cy) / k.fy)
    });
    let rx = g.constant(rx);
    let ry = g.constant(ry);

    let px = g.mul(rx, depth)?;
    let py = g.mul(ry, depth)?;
    let pz = depth;

    let row = |g: &mut Graph<T>, r0: TensorId, r1: TensorId, r2: TensorId, tr: TensorId| -> Result<TensorId> {
        let a = g.mul_b(px, r0)?;
        let b = g.mul_b(py, r1)?;
        let c = g.mul_b(pz, r2)?;
        let ab = g.add(a, b)?;
        let abc = g.add(ab, c)?;
        g.add_b(abc, tr)
    };
    let xc = row(g, r[0], r[1], r[2], t[0])?;
    let yc = row(g, r[3], r[4], r[5], t[1])?;
    let zc = row(g, r[6], r[7], r[8], t[2])?;

    let zsafe = g.clamp(zc, real(Z_MIN), real(1e9))?;
    let u = {
        let q = g.div(xc, zsafe)?;
        let q = g.scale(q, real(k.fx));
        g.add_scalar(q, real(k.cx))
    };
    let v = {
        let q = g.div(yc, zsafe)?;
        let q = g.scale(q, real(k.fy));
        g.add_scalar(q, real(k.cy))
    };
    let image = g.grid_sample(source, u, v)?;

    let umax = (w - 1) as f64 + BORDER_TOL;
    let vmax = (h - 1) as f64 + BORDER_TOL;
    let uvals: Vec<f64> = g.values(u).iter().map(|x| x.as_f64()).collect();
    let vvals: Vec<f64> = g.values(v).iter().map(|x| x.as_f64()).collect();
    let zvals: Vec<f64> = g.values(zc).iter().map(|x| x.as_f64()).collect();
    let mask: Vec<T> = (0..uvals.len())
        .map(|i| {
            let inside = uvals[i] >= -BORDER_TOL
                && uvals[i] <= umax
                && vvals[i] >= -BORDER_TOL
                && vvals[i] <= vmax
                && zvals[i] > Z_MIN;
            if inside {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    let valid = g.constant(Tensor::new(Shape::new(n, 1, h, w), mask)?);
    Ok(Warped {
        image,
        valid,
        sample_x: u,
        sample_y: v,
    })
}
