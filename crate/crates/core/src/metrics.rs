//! Evaluation-side metrics: standard depth-error statistics, temporal
//! consistency of depth under known optical flow, and segmentation mIoU.
//! Everything here works on plain values; nothing is differentiated.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::Error;
use crate::real::Real;
use crate::tensor::{bilinear_at, Tensor};
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct DepthEvalReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixel_count: usize,
}

impl DepthEvalReport {
    pub const CSV_HEADER: &'static str =
        "abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,pixel_count";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
            self.pixel_count
        )
    }

    pub fn table(&self) -> String {
        format!(
            "abs_rel  {:>9.4}\nsq_rel   {:>9.4}\nrmse     {:>9.4}\nrmse_log {:>9.4}\ndelta<1.25   {:>7.4}\ndelta<1.25^2 {:>7.4}\ndelta<1.25^3 {:>7.4}\npixels   {:>9}",
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.delta1,
            self.delta2,
            self.delta3,
            self.pixel_count
        )
    }
}

fn median(sorted: &mut [f64]) -> f64 {
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Standard seven-number depth evaluation over the valid pixels. With
/// `median_scaling` the prediction is first multiplied by
/// `median(gt)/median(pred)` (monocular scale ambiguity); predictions are
/// then clamped to `[1e-3, cap]`. Ground truth must be strictly positive
/// wherever valid.
pub fn depth_metrics<T: Real>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    valid: Option<&[bool]>,
    median_scaling: bool,
    cap: f64,
) -> Result<DepthEvalReport> {
    if pred.shape != gt.shape {
        return Err(Error::shape(
            "depth_metrics",
            format!("{} vs {}", pred.shape, gt.shape),
        ));
    }
    if let Some(v) = valid {
        if v.len() != pred.shape.count() {
            return Err(Error::Usage(format!(
                "valid mask has {} entries for {} pixels",
                v.len(),
                pred.shape.count()
            )));
        }
    }
    if !(cap > 0.0) || !cap.is_finite() {
        return Err(Error::Config(format!("cap must be positive, got {cap}")));
    }
    let keep = |i: usize| valid.map_or(true, |v| v[i]);
    let mut p = Vec::new();
    let mut g = Vec::new();
    for (i, (pv, gv)) in pred.iter().zip(gt.iter()).enumerate() {
        if !keep(i) {
            continue;
        }
        let gv = gv.as_f64();
        if !(gv > 0.0) || !gv.is_finite() {
            return Err(Error::Usage(format!(
                "ground-truth depth must be positive where valid, got {gv}"
            )));
        }
        p.push(pv.as_f64());
        g.push(gv);
    }
    if p.is_empty() {
        return Err(Error::Usage("no valid pixels to evaluate".into()));
    }
    if median_scaling {
        let mg = median(&mut g.clone());
        let mp = median(&mut p.clone());
        if !(mp > 0.0) {
            return Err(Error::Usage(format!(
                "median scaling needs positive prediction median, got {mp}"
            )));
        }
        let s = mg / mp;
        for v in &mut p {
            *v *= s;
        }
    }
    let n = p.len() as f64;
    let mut abs_rel = 0.0;
    let mut sq_rel = 0.0;
    let mut se = 0.0;
    let mut se_log = 0.0;
    let mut d1 = 0.0;
    let mut d2 = 0.0;
    let mut d3 = 0.0;
    for (pv, gv) in p.iter().zip(&g) {
        let pv = pv.clamp(1e-3, cap);
        let gv = *gv;
        let diff = pv - gv;
        abs_rel += diff.abs() / gv;
        sq_rel += diff * diff / gv;
        se += diff * diff;
        let dl = libm_ln(pv) - libm_ln(gv);
        se_log += dl * dl;
        let ratio = (pv / gv).max(gv / pv);
        if ratio < 1.25 {
            d1 += 1.0;
        }
        if ratio < 1.25 * 1.25 {
            d2 += 1.0;
        }
        if ratio < 1.25 * 1.25 * 1.25 {
            d3 += 1.0;
        }
    }
    Ok(DepthEvalReport {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: libm_sqrt(se / n),
        rmse_log: libm_sqrt(se_log / n),
        delta1: d1 / n,
        delta2: d2 / n,
        delta3: d3 / n,
        pixel_count: p.len(),
    })
}

fn libm_ln(x: f64) -> f64 {
    num_traits::Float::ln(x)
}

fn libm_sqrt(x: f64) -> f64 {
    num_traits::Float::sqrt(x)
}

/// Dense per-pixel displacement with a validity mask; `dx`/`dy` are in
/// pixels, row-major over (h, w).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub h: usize,
    pub w: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn zero(h: usize, w: usize) -> Self {
        FlowField {
            h,
            w,
            dx: alloc::vec![0.0; h * w],
            dy: alloc::vec![0.0; h * w],
            valid: alloc::vec![true; h * w],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.h * self.w;
        if self.dx.len() != n || self.dy.len() != n || self.valid.len() != n {
            return Err(Error::Usage(format!(
                "flow field arrays must all have {n} entries"
            )));
        }
        for i in 0..n {
            if self.valid[i] && (!self.dx[i].is_finite() || !self.dy[i].is_finite()) {
                return Err(Error::Usage(format!(
                    "non-finite flow at valid pixel {i}"
                )));
            }
        }
        Ok(())
    }
}

/// Temporal consistency of two consecutive depth predictions. The second
/// prediction is pulled into the first frame by bilinear sampling at
/// `(x+dx, y+dy)`; pixels whose sample point leaves the image, or whose
/// flow is invalid, are skipped. Returns means over the surviving pixels of
/// the absolute difference and of the difference relative to the per-pixel
/// maximum of the two depths.
pub fn tac_trc<T: Real>(
    pred_t: &Tensor<T>,
    pred_t1: &Tensor<T>,
    flow: &FlowField,
) -> Result<(f64, f64)> {
    flow.validate()?;
    let s = pred_t.shape;
    if pred_t1.shape != s {
        return Err(Error::shape(
            "tac_trc",
            format!("{} vs {}", s, pred_t1.shape),
        ));
    }
    if s.n != 1 || s.c != 1 || s.h != flow.h || s.w != flow.w {
        return Err(Error::shape(
            "tac_trc",
            format!("need (1,1,{},{}) predictions, got {}", flow.h, flow.w, s),
        ));
    }
    let plane_t: Vec<f64> = pred_t.iter().map(|v| v.as_f64()).collect();
    let plane_t1: Vec<f64> = pred_t1.iter().map(|v| v.as_f64()).collect();
    for (i, &v) in plane_t.iter().enumerate() {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Usage(format!("non-positive depth at pixel {i}")));
        }
    }
    for (i, &v) in plane_t1.iter().enumerate() {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::Usage(format!("non-positive depth at pixel {i}")));
        }
    }
    let (h, w) = (flow.h, flow.w);
    let mut abs_acc = 0.0;
    let mut rel_acc = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !flow.valid[i] {
                continue;
            }
            let sx = x as f64 + flow.dx[i];
            let sy = y as f64 + flow.dy[i];
            if sx < 0.0 || sx > (w - 1) as f64 || sy < 0.0 || sy > (h - 1) as f64 {
                continue;
            }
            let warped = bilinear_at(&plane_t1, h, w, sx, sy);
            let d = plane_t[i];
            let diff = (d - warped).abs();
            abs_acc += diff;
            rel_acc += diff / d.max(warped);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Usage("no valid pixels for temporal consistency".into()));
    }
    Ok((abs_acc / count as f64, rel_acc / count as f64))
}

/// Intersection-over-union per class plus the mean. Pixels whose ground
/// truth carries `ignore_label` are skipped; a prediction of `ignore_label`
/// on a kept pixel counts as a miss for the true class. Classes absent from
/// both prediction and ground truth return `None` and are excluded from the
/// mean.
pub fn miou(
    pred: &[i32],
    gt: &[i32],
    num_classes: usize,
    ignore_label: i32,
) -> Result<(Vec<Option<f64>>, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::Usage(format!(
            "label arrays differ in length: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if num_classes == 0 {
        return Err(Error::Config("num_classes must be positive".into()));
    }
    let nc = num_classes;
    let in_range = |l: i32| l >= 0 && (l as usize) < nc;
    let mut confusion = alloc::vec![0u64; nc * nc];
    let mut missed = alloc::vec![0u64; nc]; // gt kept but pred == ignore
    let mut kept = 0u64;
    for (i, (&pl, &gl)) in pred.iter().zip(gt).enumerate() {
        if gl == ignore_label {
            continue;
        }
        if !in_range(gl) {
            return Err(Error::Usage(format!("ground-truth label {gl} at pixel {i}")));
        }
        kept += 1;
        if pl == ignore_label {
            missed[gl as usize] += 1;
            continue;
        }
        if !in_range(pl) {
            return Err(Error::Usage(format!("predicted label {pl} at pixel {i}")));
        }
        confusion[gl as usize * nc + pl as usize] += 1;
    }
    if kept == 0 {
        return Err(Error::Usage("every pixel is ignored".into()));
    }
    let mut per_class = Vec::with_capacity(nc);
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..nc {
        let tp = confusion[c * nc + c];
        let fp: u64 = (0..nc).filter(|&g| g != c).map(|g| confusion[g * nc + c]).sum();
        let fnc: u64 =
            (0..nc).filter(|&p| p != c).map(|p| confusion[c * nc + p]).sum::<u64>() + missed[c];
        let denom = tp + fp + fnc;
        if denom == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / denom as f64;
            per_class.push(Some(iou));
            sum += iou;
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Usage("no class present in prediction or ground truth".into()));
    }
    Ok((per_class, sum / counted as f64))
}
