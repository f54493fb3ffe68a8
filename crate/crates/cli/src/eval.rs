//! Checkpoint evaluation: depth error metrics with optional per-image
//! median scaling, temporal consistency from the generator's flow, and
//! segmentation mIoU. Predictions are upsampled to the label resolution
//! before scoring.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

use pfn_core::loss::disparity_to_depth;
use pfn_core::metrics::{depth_metrics, miou, tac_trc, DepthEvalReport};
use pfn_core::synth::{dataset, FrameTriplet, Split};
use pfn_core::{Graph, Tensor};

use crate::checkpoint::TrainState;
use crate::config::{Task, TrainConfig};
use crate::train::IGNORE_LABEL;

pub struct DepthEvalOut {
    pub mean: DepthEvalReport,
    pub tac: f64,
    pub trc: f64,
    pub samples: usize,
}

pub struct SegEvalOut {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub samples: usize,
}

pub enum EvalOut {
    Depth(DepthEvalOut),
    Seg(SegEvalOut),
}

/// Runs the model on one image and returns the full-resolution depth map.
pub fn predict_depth(
    state: &TrainState,
    cfg: &TrainConfig,
    image: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let (h, w) = (image.shape.h, image.shape.w);
    let mut g = Graph::<f32>::new();
    let leaf = g.constant(image.clone());
    let built = state
        .model
        .forward(&mut g, leaf)
        .map_err(|e| anyhow::anyhow!("forward: {e}"))?;
    let mut pred = built.predictions[0];
    let ps = g.shape(pred);
    if (ps.h, ps.w) != (h, w) {
        pred = g
            .bilinear_resample(pred, h, w)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    let (_, depth) =
        disparity_to_depth(&mut g, pred, &cfg.loss.to_core()).map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok(g.tensor(depth))
}

/// Class id per pixel from the finest logits.
pub fn predict_labels(state: &TrainState, image: &Tensor<f32>) -> Result<Vec<i32>> {
    let mut g = Graph::<f32>::new();
    let leaf = g.constant(image.clone());
    let built = state
        .model
        .forward(&mut g, leaf)
        .map_err(|e| anyhow::anyhow!("forward: {e}"))?;
    let logits = g.tensor(built.predictions[0]);
    let s = logits.shape;
    let data = logits.data();
    let mut out = Vec::with_capacity(s.n * s.h * s.w);
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let mut best = 0usize;
                let mut best_v = f32::NEG_INFINITY;
                for c in 0..s.c {
                    let v = data[s.idx(n, c, y, x)];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                out.push(best as i32);
            }
        }
    }
    Ok(out)
}

fn mean_reports(reports: &[DepthEvalReport]) -> DepthEvalReport {
    let n = reports.len() as f64;
    let avg = |f: &dyn Fn(&DepthEvalReport) -> f64| reports.iter().map(|r| f(r)).sum::<f64>() / n;
    DepthEvalReport {
        abs_rel: avg(&|r| r.abs_rel),
        sq_rel: avg(&|r| r.sq_rel),
        rmse: avg(&|r| r.rmse),
        rmse_log: avg(&|r| r.rmse_log),
        delta1: avg(&|r| r.delta1),
        delta2: avg(&|r| r.delta2),
        delta3: avg(&|r| r.delta3),
        pixel_count: reports.iter().map(|r| r.pixel_count).sum(),
    }
}

/// Evaluates a restored checkpoint on freshly generated scenes from its own
/// data settings. Depth runs report per-image-averaged error metrics plus
/// temporal consistency against the generator flow; segmentation runs
/// report mIoU over a pooled confusion matrix.
pub fn evaluate(
    cfg: &TrainConfig,
    state: &TrainState,
    split: Split,
    median_scaling: bool,
    cap: f64,
    out_csv: Option<&Path>,
) -> Result<EvalOut> {
    let scene = cfg.data.to_scene();
    let data: Vec<FrameTriplet<f32>> = dataset(&scene, cfg.data.scenes, cfg.seed, split)
        .collect::<pfn_core::Result<_>>()
        .map_err(|e| anyhow::anyhow!("scene generation: {e}"))?;
    if data.is_empty() {
        bail!("no evaluation scenes for this split");
    }
    match cfg.task {
        Task::Depth => {
            let mut rows = Vec::new();
            let mut reports = Vec::with_capacity(data.len());
            let mut tac_acc = 0.0;
            let mut trc_acc = 0.0;
            for (i, t) in data.iter().enumerate() {
                let pred_t = predict_depth(state, cfg, &t.target)?;
                let report = depth_metrics(&pred_t, &t.gt_depth, None, median_scaling, cap)
                    .map_err(|e| anyhow::anyhow!("sample {i}: {e}"))?;
                // sources[1] is the next frame, matching the stored flow
                let pred_next = predict_depth(state, cfg, &t.sources[1])?;
                let (tac, trc) = tac_trc(&pred_t, &pred_next, &t.gt_flow)
                    .map_err(|e| anyhow::anyhow!("sample {i}: {e}"))?;
                rows.push(format!("{i},{},{tac},{trc}", report.csv_row()));
                reports.push(report);
                tac_acc += tac;
                trc_acc += trc;
            }
            let mean = mean_reports(&reports);
            let n = reports.len() as f64;
            let (tac, trc) = (tac_acc / n, trc_acc / n);
            if let Some(path) = out_csv {
                let mut text = format!("sample,{},tac,trc\n", DepthEvalReport::CSV_HEADER);
                for row in &rows {
                    text.push_str(row);
                    text.push('\n');
                }
                text.push_str(&format!("mean,{},{tac},{trc}\n", mean.csv_row()));
                fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(EvalOut::Depth(DepthEvalOut {
                mean,
                tac,
                trc,
                samples: reports.len(),
            }))
        }
        Task::Segmentation => {
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            for t in &data {
                preds.extend(predict_labels(state, &t.target)?);
                gts.extend_from_slice(&t.gt_labels);
            }
            let (per_class, mean) = miou(&preds, &gts, cfg.data.num_classes, IGNORE_LABEL)
                .map_err(|e| anyhow::anyhow!("{e}"))?;
            if let Some(path) = out_csv {
                let mut text = String::from("class,iou\n");
                for (c, iou) in per_class.iter().enumerate() {
                    match iou {
                        Some(v) => text.push_str(&format!("{c},{v}\n")),
                        None => text.push_str(&format!("{c},absent\n")),
                    }
                }
                text.push_str(&format!("mean,{mean}\n"));
                fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(EvalOut::Seg(SegEvalOut {
                per_class,
                miou: mean,
                samples: data.len(),
            }))
        }
    }
}
