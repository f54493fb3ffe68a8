//! Self-supervised depth objective.
//!
//! A disparity prediction is mapped to depth, every source frame is warped
//! into the target view, and the photometric error takes a per-pixel minimum
//! over sources. Static pixels are removed by comparing against the unwarped
//! error (strictly better reconstruction required), and an edge-aware
//! smoothness term regularizes each native-scale disparity.

pub mod warp;

use alloc::format;
use alloc::vec::Vec;

use crate::engine::{Graph, TensorId};
use crate::error::Error;
use crate::real::{real, Real};
use crate::tensor::Tensor;
use crate::Result;

pub use warp::{CameraIntrinsics, RigidPose, Warped};

#[derive(Debug, Clone, PartialEq)]
pub struct DepthLossConfig {
    /// Weight on the L1 term; the structural term gets `1 - alpha`.
    pub alpha: f64,
    /// Smoothness weight at the finest scale; halves per coarser scale.
    pub gamma: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    pub ssim_window: usize,
    /// Strict-inequality static-pixel mask. Off, only warp validity masks
    /// the per-pixel minimum.
    pub automask: bool,
}

impl Default for DepthLossConfig {
    fn default() -> Self {
        DepthLossConfig {
            alpha: 0.85,
            gamma: 0.001,
            min_depth: 0.1,
            max_depth: 100.0,
            ssim_window: 3,
            automask: true,
        }
    }
}

impl DepthLossConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: alloc::string::String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return fail(format!("alpha must be in [0,1], got {}", self.alpha));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return fail(format!("gamma must be finite and >= 0, got {}", self.gamma));
        }
        if !(self.min_depth > 0.0) || !(self.max_depth > self.min_depth) || !self.max_depth.is_finite() {
            return fail(format!(
                "need 0 < min_depth < max_depth, got {} and {}",
                self.min_depth, self.max_depth
            ));
        }
        if self.ssim_window % 2 == 0 {
            return fail(format!("ssim_window must be odd, got {}", self.ssim_window));
        }
        Ok(())
    }
}

/// Affine map from a unit-interval prediction to disparity, then depth.
/// Returns (disparity, depth); depth spans [min_depth, max_depth].
pub fn disparity_to_depth<T: Real>(
    g: &mut Graph<T>,
    x: TensorId,
    cfg: &DepthLossConfig,
) -> Result<(TensorId, TensorId)> {
    cfg.validate()?;
    let lo = 1.0 / cfg.max_depth;
    let span = 1.0 / cfg.min_depth - lo;
    let scaled = g.scale(x, real(span));
    let disp = g.add_scalar(scaled, real(lo));
    let depth = g.recip(disp);
    Ok((disp, depth))
}

const SSIM_C1: f64 = 1e-4; // (0.01)^2
const SSIM_C2: f64 = 9e-4; // (0.03)^2

/// Per-pixel, per-channel structural similarity with box-filter statistics,
/// clipped to [-1, 1]. Identical inputs give exactly 1.
pub fn ssim<T: Real>(g: &mut Graph<T>, a: TensorId, b: TensorId, window: usize) -> Result<TensorId> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(
            "ssim",
            format!("{} vs {}", g.shape(a), g.shape(b)),
        ));
    }
    let mu_a = g.box_filter(a, window)?;
    let mu_b = g.box_filter(b, window)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let maa = g.mul(mu_a, mu_a)?;
    let mbb = g.mul(mu_b, mu_b)?;
    let mab = g.mul(mu_a, mu_b)?;
    let var_a = {
        let e = g.box_filter(aa, window)?;
        g.sub(e, maa)?
    };
    let var_b = {
        let e = g.box_filter(bb, window)?;
        g.sub(e, mbb)?
    };
    let cov = {
        let e = g.box_filter(ab, window)?;
        g.sub(e, mab)?
    };
    let num = {
        let l = g.scale(mab, real(2.0));
        let l = g.add_scalar(l, real(SSIM_C1));
        let r = g.scale(cov, real(2.0));
        let r = g.add_scalar(r, real(SSIM_C2));
        g.mul(l, r)?
    };
    let den = {
        let l = g.add(maa, mbb)?;
        let l = g.add_scalar(l, real(SSIM_C1));
        let r = g.add(var_a, var_b)?;
        let r = g.add_scalar(r, real(SSIM_C2));
        g.mul(l, r)?
    };
    let q = g.div(num, den)?;
    g.clamp(q, real(-1.0), real(1.0))
}

/// Photometric distance: alpha-weighted L1 plus structural dissimilarity,
/// channel-averaged to a (N, 1, H, W) map.
pub fn photometric<T: Real>(
    g: &mut Graph<T>,
    target: TensorId,
    synthesized: TensorId,
    cfg: &DepthLossConfig,
) -> Result<TensorId> {
    let diff = g.sub(target, synthesized)?;
    let l1 = {
        let a = g.abs(diff);
        g.mean_channels(a)
    };
    let sim = ssim(g, target, synthesized, cfg.ssim_window)?;
    let sim = g.mean_channels(sim);
    let dissim = {
        let neg = g.scale(sim, real(-1.0));
        let one_minus = g.add_scalar(neg, real(1.0));
        g.scale(one_minus, real(0.5))
    };
    let a = g.scale(l1, real(cfg.alpha));
    let b = g.scale(dissim, real(1.0 - cfg.alpha));
    g.add(a, b)
}

/// Sentinel pushed into invalid pixels before the per-pixel minimum; far
/// above any reachable photometric value for unit-range images.
const INVALID_COST: f64 = 1e4;

pub struct ReprojectionOut {
    /// Per-pixel masked minimum photometric error, (N, 1, H, W).
    pub loss_map: TensorId,
    /// Constant 0/1 mask actually applied (automask or validity).
    pub mask: TensorId,
    /// Fraction of pixels the mask removed.
    pub masked_fraction: f64,
}

/// Minimum-over-sources photometric error with static-pixel auto-masking.
/// The mask is computed from values and enters the graph as a constant, so
/// no gradient flows through the masking decision itself.
pub fn min_reprojection_automask<T: Real>(
    g: &mut Graph<T>,
    target: TensorId,
    sources: &[TensorId],
    warped: &[Warped],
    cfg: &DepthLossConfig,
) -> Result<ReprojectionOut> {
    if sources.is_empty() || sources.len() != warped.len() {
        return Err(Error::Usage(format!(
            "need matching non-empty sources and warps, got {} and {}",
            sources.len(),
            warped.len()
        )));
    }
    let mut warped_costs = Vec::with_capacity(warped.len());
    for w in warped {
        let lp = photometric(g, target, w.image, cfg)?;
        let valid_part = g.mul(lp, w.valid)?;
        let invalid_part = {
            let s = g.scale(w.valid, real(-INVALID_COST));
            g.add_scalar(s, real(INVALID_COST))
        };
        warped_costs.push(g.add(valid_part, invalid_part)?);
    }
    let l_warp = g.min_over_list(&warped_costs)?;

    let mut unwarped_costs = Vec::with_capacity(sources.len());
    for &s in sources {
        unwarped_costs.push(photometric(g, target, s, cfg)?);
    }
    let l_unwarp = g.min_over_list(&unwarped_costs)?;

    let lw: Vec<f64> = g.values(l_warp).iter().map(|v| v.as_f64()).collect();
    let lu: Vec<f64> = g.values(l_unwarp).iter().map(|v| v.as_f64()).collect();
    let mask_vals: Vec<T> = (0..lw.len())
        .map(|i| {
            let keep = if cfg.automask {
                lw[i] < lu[i]
            } else {
                lw[i] < INVALID_COST * 0.5
            };
            if keep {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    let kept: f64 = mask_vals.iter().map(|v| v.as_f64()).sum();
    let masked_fraction = 1.0 - kept / mask_vals.len() as f64;
    let mask = g.constant(Tensor::new(g.shape(l_warp), mask_vals)?);
    let loss_map = g.mul(l_warp, mask)?;
    Ok(ReprojectionOut {
        loss_map,
        mask,
        masked_fraction,
    })
}

/// Edge-aware smoothness of mean-normalized disparity: forward differences
/// of d/mean(d), damped where the image has gradients. Invariant to scaling
/// the disparity.
pub fn smoothness<T: Real>(g: &mut Graph<T>, disparity: TensorId, image: TensorId) -> Result<TensorId> {
    let ds = g.shape(disparity);
    let is = g.shape(image);
    if ds.c != 1 || ds.n != is.n || ds.h != is.h || ds.w != is.w {
        return Err(Error::shape(
            "smoothness",
            format!("disparity {ds} vs image {is}"),
        ));
    }
    let norm = {
        let m = g.mean_spatial(disparity);
        let m = g.add_scalar(m, real(1e-7));
        g.recip(m)
    };
    let dstar = g.mul_b(disparity, norm)?;
    let term = |g: &mut Graph<T>, horizontal: bool| -> Result<TensorId> {
        let dd = if horizontal {
            g.diff_x(dstar)?
        } else {
            g.diff_y(dstar)?
        };
        let dd = g.abs(dd);
        let di = if horizontal {
            g.diff_x(image)?
        } else {
            g.diff_y(image)?
        };
        let di = g.abs(di);
        let di = g.mean_channels(di);
        let w = g.exp_neg(di);
        let prod = g.mul(dd, w)?;
        Ok(g.mean_all(prod))
    };
    let tx = term(g, true)?;
    let ty = term(g, false)?;
    g.add(tx, ty)
}

pub struct LossInputs<'a> {
    pub target: TensorId,
    pub sources: &'a [TensorId],
    /// One (N, 6, 1, 1) pose node per source: motion of that source camera
    /// expressed in the target frame.
    pub poses: &'a [TensorId],
    pub intrinsics: CameraIntrinsics,
}

pub struct LossBreakdown {
    pub total: TensorId,
    /// Mean over scales of the masked minimum-reprojection term.
    pub photometric: TensorId,
    /// Mean over scales of the weighted smoothness terms.
    pub smoothness: TensorId,
    /// Mean over scales of the masked-away pixel fraction.
    pub masked_fraction: f64,
}

/// Full objective over multi-scale disparity predictions (finest first,
/// each half the previous resolution). Photometric error is evaluated at
/// full resolution from upsampled disparity; smoothness at native scale,
/// weighted gamma/2^(scale-1). The result averages the per-scale losses.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    predictions: &[TensorId],
    inputs: &LossInputs<'_>,
    cfg: &DepthLossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    inputs.intrinsics.validate()?;
    if predictions.is_empty() {
        return Err(Error::Usage("no predictions".into()));
    }
    if inputs.sources.is_empty() || inputs.sources.len() != inputs.poses.len() {
        return Err(Error::Usage(format!(
            "need matching non-empty sources and poses, got {} and {}",
            inputs.sources.len(),
            inputs.poses.len()
        )));
    }
    let ts = g.shape(inputs.target);
    let mut photo_terms = Vec::with_capacity(predictions.len());
    let mut smooth_terms = Vec::with_capacity(predictions.len());
    let mut frac_acc = 0.0;
    let mut image_native = inputs.target;
    for (i, &pred) in predictions.iter().enumerate() {
        let ps = g.shape(pred);
        let (eh, ew) = (ts.h >> i, ts.w >> i);
        if ps.c != 1 || ps.n != ts.n || ps.h != eh || ps.w != ew {
            return Err(Error::shape(
                "total_loss",
                format!("prediction {i} is {ps}, expected ({},1,{eh},{ew})", ts.n),
            ));
        }
        let up = if i == 0 {
            pred
        } else {
            g.bilinear_resample(pred, ts.h, ts.w)?
        };
        let (_, depth) = disparity_to_depth(g, up, cfg)?;
        let mut warps = Vec::with_capacity(inputs.sources.len());
        for (&src, &pose) in inputs.sources.iter().zip(inputs.poses) {
            warps.push(warp::warp(g, src, depth, pose, &inputs.intrinsics)?);
        }
        let rp = min_reprojection_automask(g, inputs.target, inputs.sources, &warps, cfg)?;
        photo_terms.push(g.mean_all(rp.loss_map));
        frac_acc += rp.masked_fraction;

        if i > 0 {
            image_native = g.avg_pool2(image_native)?;
        }
        let (disp_native, _) = disparity_to_depth(g, pred, cfg)?;
        let sm = smoothness(g, disp_native, image_native)?;
        let weight = cfg.gamma / (1u64 << i) as f64;
        smooth_terms.push(g.scale(sm, real(weight)));
    }
    let mean_of = |g: &mut Graph<T>, terms: &[TensorId]| -> Result<TensorId> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(g.scale(acc, real(1.0 / terms.len() as f64)))
    };
    let photo = mean_of(g, &photo_terms)?;
    let smooth = mean_of(g, &smooth_terms)?;
    let total = g.add(photo, smooth)?;
    g.set_label(photo, "loss.photometric");
    g.set_label(smooth, "loss.smoothness");
    g.set_label(total, "loss.total");
    Ok(LossBreakdown {
        total,
        photometric: photo,
        smoothness: smooth,
        masked_fraction: frac_acc / predictions.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::warp::poses_to_tensor;
    use super::*;
    use crate::tensor::Shape;
    use alloc::vec;
    use alloc::vec::Vec;
    use crate::gradcheck::{fd_vector, rel_err};
    use crate::rng::SplitMix64;

    fn rand_image(r: &mut SplitMix64, n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_fn(Shape::new(n, c, h, w), |_, _, _, _| r.uniform(0.0, 1.0))
    }

    fn k_for(w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics {
            fx: w as f64,
            fy: h as f64,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
        }
    }

    #[test]
    fn disparity_endpoints_and_midpoint() {
        let cfg = DepthLossConfig::default();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(
            Tensor::new(Shape::new(1, 1, 1, 3), vec![0.0, 0.5, 1.0]).unwrap(),
            false,
        );
        let (disp, depth) = disparity_to_depth(&mut g, x, &cfg).unwrap();
        let d = g.values(depth);
        assert!((d[0] - 100.0).abs() < 1e-9);
        assert!((d[2] - 0.1).abs() < 1e-12);
        let mid = g.values(disp)[1];
        assert!((mid - 5.005).abs() < 1e-12);
        assert!((d[1] - 1.0 / 5.005).abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let mut r = SplitMix64::new(1);
        let mut g = Graph::<f64>::new();
        let a = g.leaf(rand_image(&mut r, 1, 3, 6, 6), false);
        let s = ssim(&mut g, a, a, 3).unwrap();
        assert!(g.values(s).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ssim_symmetric_and_separates_constants() {
        let mut r = SplitMix64::new(2);
        let mut g = Graph::<f64>::new();
        let a = g.leaf(rand_image(&mut r, 1, 1, 5, 5), false);
        let b = g.leaf(rand_image(&mut r, 1, 1, 5, 5), false);
        let sab = ssim(&mut g, a, b, 3).unwrap();
        let sba = ssim(&mut g, b, a, 3).unwrap();
        for (x, y) in g.values(sab).iter().zip(g.values(sba)) {
            assert!((x - y).abs() < 1e-12);
        }

        let z = g.leaf(Tensor::full(Shape::new(1, 1, 5, 5), 0.0), false);
        let o = g.leaf(Tensor::full(Shape::new(1, 1, 5, 5), 1.0), false);
        let s = ssim(&mut g, z, o, 3).unwrap();
        // means 0 and 1, zero variances: value is C1/(1+C1)
        let want = SSIM_C1 / (1.0 + SSIM_C1);
        for &v in g.values(s) {
            assert!((v - want).abs() < 1e-12);
            assert!(v < 0.01);
        }
    }

    #[test]
    fn photometric_zero_law_and_l1_limit() {
        let mut r = SplitMix64::new(3);
        let mut g = Graph::<f64>::new();
        let a = g.leaf(rand_image(&mut r, 1, 3, 6, 6), false);
        let cfg = DepthLossConfig::default();
        let lp = photometric(&mut g, a, a, &cfg).unwrap();
        assert!(g.values(lp).iter().all(|&v| v == 0.0));

        let b = g.leaf(rand_image(&mut r, 1, 3, 6, 6), false);
        let pure_l1 = DepthLossConfig {
            alpha: 1.0,
            ..DepthLossConfig::default()
        };
        let lp = photometric(&mut g, a, b, &pure_l1).unwrap();
        let av = g.values(a).to_vec();
        let bv = g.values(b).to_vec();
        let lpv = g.values(lp);
        for y in 0..6 {
            for x in 0..6 {
                let mut want = 0.0;
                for c in 0..3 {
                    want += (av[c * 36 + y * 6 + x] - bv[c * 36 + y * 6 + x]).abs();
                }
                want /= 3.0;
                assert!((lpv[y * 6 + x] - want).abs() < 1e-12);
            }
        }

        // default mix on constant frames: L1 term 1, structural term known
        let z = g.leaf(Tensor::full(Shape::new(1, 1, 5, 5), 0.0), false);
        let o = g.leaf(Tensor::full(Shape::new(1, 1, 5, 5), 1.0), false);
        let lp = photometric(&mut g, z, o, &cfg).unwrap();
        let s = SSIM_C1 / (1.0 + SSIM_C1);
        let want = 0.85 + 0.15 * (1.0 - s) / 2.0;
        for &v in g.values(lp) {
            assert!((v - want).abs() < 1e-12);
            assert!(v >= 0.0);
        }
    }

    #[test]
    fn static_frames_are_fully_masked() {
        let mut r = SplitMix64::new(4);
        let img = rand_image(&mut r, 1, 3, 8, 8);
        let mut g = Graph::<f64>::new();
        let target = g.leaf(img.clone(), false);
        let source = g.leaf(img, false);
        let depth = g.leaf(Tensor::full(Shape::new(1, 1, 8, 8), 3.0), false);
        let pose = g.leaf(poses_to_tensor::<f64>(&[RigidPose::identity()]), false);
        let k = k_for(8, 8);
        let w = warp::warp(&mut g, source, depth, pose, &k).unwrap();
        let cfg = DepthLossConfig::default();
        let rp = min_reprojection_automask(&mut g, target, &[source], &[w], &cfg).unwrap();
        let m = g.mean_all(rp.loss_map);
        assert_eq!(g.scalar(m), 0.0);
        assert!((rp.masked_fraction - 1.0).abs() < 1e-12);

        // with masking off the same setup keeps every pixel (all valid) and
        // the loss is the tiny interpolation residue of the identity warp
        let no_mask = DepthLossConfig {
            automask: false,
            ..DepthLossConfig::default()
        };
        let rp = min_reprojection_automask(&mut g, target, &[source], &[w], &no_mask).unwrap();
        assert_eq!(rp.masked_fraction, 0.0);
        let m = g.mean_all(rp.loss_map);
        let v = g.scalar(m);
        assert!(v >= 0.0 && v < 1e-4, "{v}");
    }

    #[test]
    fn self_source_is_suppressed() {
        let mut r = SplitMix64::new(5);
        let img = rand_image(&mut r, 1, 3, 8, 8);
        let other = rand_image(&mut r, 1, 3, 8, 8);
        let mut g = Graph::<f64>::new();
        let target = g.leaf(img.clone(), false);
        let self_source = g.leaf(img, false);
        let moving = g.leaf(other, false);
        let depth = g.leaf(Tensor::full(Shape::new(1, 1, 8, 8), 3.0), false);
        let id_pose = g.leaf(poses_to_tensor::<f64>(&[RigidPose::identity()]), false);
        let k = k_for(8, 8);
        let w1 = warp::warp(&mut g, self_source, depth, id_pose, &k).unwrap();
        let w2 = warp::warp(&mut g, moving, depth, id_pose, &k).unwrap();
        let cfg = DepthLossConfig::default();
        let rp = min_reprojection_automask(
            &mut g,
            target,
            &[self_source, moving],
            &[w1, w2],
            &cfg,
        )
        .unwrap();
        let m = g.mean_all(rp.loss_map);
        assert_eq!(g.scalar(m), 0.0);
    }

    #[test]
    fn smoothness_constant_zero_and_scale_invariant() {
        let mut r = SplitMix64::new(6);
        let mut g = Graph::<f64>::new();
        let img = g.leaf(rand_image(&mut r, 1, 3, 8, 8), false);
        let flat = g.leaf(Tensor::full(Shape::new(1, 1, 8, 8), 0.7), false);
        let s = smoothness(&mut g, flat, img).unwrap();
        assert_eq!(g.scalar(s), 0.0);

        let base = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, y, x| {
            0.2 + 0.05 * (x as f64) + 0.03 * (y as f64)
        });
        let mut vals = Vec::new();
        for c in [0.1, 1.0, 10.0] {
            let d = g.leaf(
                Tensor::from_fn(Shape::new(1, 1, 8, 8), |n, ch, y, x| c * base.at(n, ch, y, x)),
                false,
            );
            let s = smoothness(&mut g, d, img).unwrap();
            vals.push(g.scalar(s));
        }
        for v in &vals[1..] {
            assert!((v - vals[0]).abs() < 1e-6, "{vals:?}");
        }
    }

    #[test]
    fn image_edges_forgive_disparity_edges() {
        let step_disp = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, _, x| {
            if x < 4 {
                0.3
            } else {
                0.8
            }
        });
        let aligned_img = Tensor::from_fn(Shape::new(1, 3, 8, 8), |_, _, _, x| {
            if x < 4 {
                0.1
            } else {
                0.9
            }
        });
        let flat_img = Tensor::full(Shape::new(1, 3, 8, 8), 0.5);
        let mut g = Graph::<f64>::new();
        let d = g.leaf(step_disp, false);
        let ia = g.leaf(aligned_img, false);
        let ifl = g.leaf(flat_img, false);
        let s_edge = smoothness(&mut g, d, ia).unwrap();
        let s_flat = smoothness(&mut g, d, ifl).unwrap();
        assert!(g.scalar(s_edge) < g.scalar(s_flat));
    }

    #[test]
    fn zero_smoothness_weight_reduces_to_photometric() {
        let mut r = SplitMix64::new(7);
        let mut g = Graph::<f64>::new();
        let target = g.leaf(rand_image(&mut r, 1, 3, 8, 8), false);
        let source = g.leaf(rand_image(&mut r, 1, 3, 8, 8), false);
        let pose = g.leaf(
            poses_to_tensor::<f64>(&[RigidPose {
                rotation: [0.01, -0.02, 0.005],
                translation: [0.05, 0.0, 0.02],
            }]),
            false,
        );
        let p0 = g.leaf(
            Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, _, _| r.uniform(0.3, 0.7)),
            false,
        );
        let p1 = g.leaf(
            Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, _, _| r.uniform(0.3, 0.7)),
            false,
        );
        let cfg = DepthLossConfig {
            gamma: 0.0,
            ..DepthLossConfig::default()
        };
        let out = total_loss(
            &mut g,
            &[p0, p1],
            &LossInputs {
                target,
                sources: &[source],
                poses: &[pose],
                intrinsics: k_for(8, 8),
            },
            &cfg,
        )
        .unwrap();
        assert_eq!(g.scalar(out.total), g.scalar(out.photometric));
        assert_eq!(g.scalar(out.smoothness), 0.0);
    }

    #[test]
    fn static_scene_total_photometric_is_zero() {
        let mut r = SplitMix64::new(8);
        let img = rand_image(&mut r, 1, 3, 8, 8);
        let mut g = Graph::<f64>::new();
        let target = g.leaf(img.clone(), false);
        let source = g.leaf(img, false);
        let pose = g.leaf(poses_to_tensor::<f64>(&[RigidPose::identity()]), false);
        let p0 = g.leaf(
            Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, _, x| 0.3 + 0.01 * x as f64),
            false,
        );
        let out = total_loss(
            &mut g,
            &[p0],
            &LossInputs {
                target,
                sources: &[source],
                poses: &[pose],
                intrinsics: k_for(8, 8),
            },
            &DepthLossConfig::default(),
        )
        .unwrap();
        assert_eq!(g.scalar(out.photometric), 0.0);
        // smoothness survives, so the total is exactly the weighted term
        assert_eq!(g.scalar(out.total), g.scalar(out.smoothness));
    }

    #[test]
    fn pose_gradient_passes_finite_differences() {
        let mut r = SplitMix64::new(9);
        let target_t = rand_image(&mut r, 1, 3, 8, 8);
        let source_t = rand_image(&mut r, 1, 3, 8, 8);
        let pred_t = Tensor::from_fn(Shape::new(1, 1, 8, 8), |_, _, _, _| r.uniform(0.35, 0.65));
        let pose0 = [0.02, -0.01, 0.015, 0.04, -0.03, 0.02];
        let cfg = DepthLossConfig::default();
        let k = k_for(8, 8);

        let build = |pose_vals: &[f64]| -> (Graph<f64>, TensorId, TensorId) {
            let mut g = Graph::<f64>::new();
            let target = g.leaf(target_t.clone(), false);
            let source = g.leaf(source_t.clone(), false);
            let pred = g.leaf(pred_t.clone(), false);
            let pose = g.leaf(
                Tensor::new(Shape::new(1, 6, 1, 1), pose_vals.to_vec()).unwrap(),
                true,
            );
            let out = total_loss(
                &mut g,
                &[pred],
                &LossInputs {
                    target,
                    sources: &[source],
                    poses: &[pose],
                    intrinsics: k,
                },
                &cfg,
            )
            .unwrap();
            (g, out.total, pose)
        };

        let (g, total, pose) = build(&pose0);
        let grads = g.backward(total).unwrap();
        let analytic = grads.get(pose).unwrap().to_vec();

        let mut x = pose0;
        let (fd, nonsmooth) = fd_vector(&mut x, 1e-6, &mut |vals| {
            let (g, total, _) = build(vals);
            g.scalar(total)
        });
        let mut checked = 0;
        for i in 0..6 {
            if nonsmooth[i] {
                continue;
            }
            checked += 1;
            let e = rel_err(analytic[i], fd[i], 1e-8);
            assert!(e < 1e-3, "component {i}: analytic {} fd {} err {e}", analytic[i], fd[i]);
        }
        assert!(checked >= 3, "only {checked} smooth components");
    }
}
