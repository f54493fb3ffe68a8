//! The training loop: deterministic epoch shuffling, joint gradient
//! clipping across the model and pose head, Adam updates, CSV logging and
//! periodic checkpoints. Loss values are logged to metrics.csv and wall
//! times to timing.csv so the metrics file is bit-reproducible across runs
//! of the same seed.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};

use pfn_core::loss::warp::poses_to_tensor;
use pfn_core::loss::{total_loss, LossInputs};
use pfn_core::optim::{
    adam_step, joint_grad_norm, scale_grads, ParamSet, ADAM_BETA1, ADAM_BETA2, ADAM_EPS,
};
use pfn_core::real::Real;
use pfn_core::rng::{hash_mix, hash_unit, SplitMix64};
use pfn_core::synth::{dataset, scene_intrinsics, FrameTriplet, Split};
use pfn_core::{Graph, Shape, Tensor, TensorId};

use crate::checkpoint::{self, TrainState};
use crate::config::{PoseSource, Schedule, Task, TrainConfig};

/// Label value treated as "no annotation" by the segmentation objective.
pub const IGNORE_LABEL: i32 = 255;

/// base * (1 - iter/max_iter)^power, clamped to 0 once iter passes
/// max_iter.
pub fn poly_lr(base: f64, iter: u64, max_iter: u64, power: f64) -> f64 {
    if max_iter == 0 {
        return base;
    }
    let frac = (iter as f64 / max_iter as f64).min(1.0);
    base * (1.0 - frac).powf(power)
}

fn current_lr(cfg: &TrainConfig, iter: u64) -> f64 {
    match cfg.lr_schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Poly => poly_lr(cfg.lr, iter, cfg.max_iter, cfg.lr_power),
    }
}

/// Pixel cross entropy averaged over the prediction scales. Labels are
/// given at full resolution; each coarser scale reads the top-left
/// representative of its cell (nearest-neighbor downsampling). Pixels
/// labeled `ignore_label` drop out of the mean; a batch with nothing but
/// ignored pixels is an error.
pub fn segmentation_loss<T: Real>(
    g: &mut Graph<T>,
    logits: &[TensorId],
    labels: &[i32],
    ignore_label: i32,
) -> Result<TensorId> {
    if logits.is_empty() {
        bail!("no prediction scales");
    }
    let full = g.shape(logits[0]);
    if labels.len() != full.n * full.h * full.w {
        bail!(
            "{} labels for {} pixels",
            labels.len(),
            full.n * full.h * full.w
        );
    }
    let classes = full.c as i32;
    let mut kept = 0usize;
    for &l in labels {
        if l == ignore_label {
            continue;
        }
        if l < 0 || l >= classes {
            bail!("label {l} outside 0..{classes}");
        }
        kept += 1;
    }
    if kept == 0 {
        bail!("every pixel is ignored; nothing to train on");
    }
    let mut terms = Vec::with_capacity(logits.len());
    for (i, &lg) in logits.iter().enumerate() {
        let s = g.shape(lg);
        if s.h == 0 || full.h % s.h != 0 || s.n != full.n || s.c != full.c {
            bail!("scale {i} shape {s} does not divide the full {full}");
        }
        let r = full.h / s.h;
        let mut down = Vec::with_capacity(s.n * s.h * s.w);
        for n in 0..s.n {
            for oy in 0..s.h {
                for ox in 0..s.w {
                    let l = labels[(n * full.h + oy * r) * full.w + ox * r];
                    down.push(if l == ignore_label { -1 } else { l });
                }
            }
        }
        // a coarse grid may sample only ignored pixels; the engine then
        // yields 0 for that scale, which we leave out of the average
        if down.iter().all(|&l| l < 0) {
            continue;
        }
        let ce = g
            .softmax_cross_entropy(lg, &down)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        terms.push(ce);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t).map_err(|e| anyhow::anyhow!("{e}"))?;
    }
    Ok(g.scale(acc, T::of(1.0 / terms.len() as f64)))
}

// ---- batch assembly ----

fn stack_images(samples: &[&FrameTriplet<f32>], pick: impl Fn(&FrameTriplet<f32>) -> &Tensor<f32>) -> Tensor<f32> {
    let first = pick(samples[0]).shape;
    Tensor::from_fn(
        Shape::new(samples.len(), first.c, first.h, first.w),
        |n, c, y, x| pick(samples[n]).at(0, c, y, x),
    )
}

fn hflip(image: &Tensor<f32>) -> Tensor<f32> {
    let s = image.shape;
    Tensor::from_fn(s, |n, c, y, x| image.at(n, c, y, s.w - 1 - x))
}

fn hflip_labels(labels: &[i32], h: usize, w: usize) -> Vec<i32> {
    let mut out = Vec::with_capacity(labels.len());
    for y in 0..h {
        for x in 0..w {
            out.push(labels[y * w + w - 1 - x]);
        }
    }
    out
}

/// Shuffled sample indices for one step: a fixed permutation per epoch
/// derived from the seed, consumed batch by batch. Trailing samples that do
/// not fill a batch are skipped that epoch.
fn batch_indices(
    n: usize,
    batch: usize,
    seed: u64,
    iter: u64,
    steps_per_epoch: usize,
) -> Vec<usize> {
    let epoch = iter / steps_per_epoch as u64;
    let pos = (iter % steps_per_epoch as u64) as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    SplitMix64::new(hash_mix(seed, 0xeb0c, epoch)).shuffle(&mut perm);
    perm[pos * batch..(pos + 1) * batch].to_vec()
}

// ---- one optimizer step ----

fn clip_joint(state: &mut TrainState, max: f64) -> f64 {
    let norm = {
        let mut sets: Vec<&ParamSet<f32>> = vec![state.model.params()];
        if let Some(p) = &state.pose {
            sets.push(p.params());
        }
        joint_grad_norm(&sets)
    };
    if norm > max && norm > 0.0 {
        let k = (max / norm) as f32;
        scale_grads(state.model.params_mut(), k);
        if let Some(p) = &mut state.pose {
            scale_grads(p.params_mut(), k);
        }
    }
    norm
}

fn adam_all(state: &mut TrainState, lr: f64) {
    let (b1, b2, eps) = (ADAM_BETA1 as f32, ADAM_BETA2 as f32, ADAM_EPS as f32);
    adam_step(state.model.params_mut(), lr as f32, b1, b2, eps);
    if let Some(p) = &mut state.pose {
        adam_step(p.params_mut(), lr as f32, b1, b2, eps);
    }
}

fn nonfinite_abort(g: &Graph<f32>, run_dir: &Path, what: &str) -> anyhow::Error {
    let bad = g.nonfinite_nodes();
    let mut dump = String::new();
    for (id, op, label) in &bad {
        dump.push_str(&format!(
            "node {} op {} label {}\n",
            id.index(),
            op,
            label.unwrap_or("-")
        ));
    }
    let dump_path = run_dir.join("nonfinite.txt");
    fs::write(&dump_path, &dump).ok();
    let first = bad
        .iter()
        .map(|(_, op, label)| format!("{}({})", op, label.unwrap_or("-")))
        .take(4)
        .collect::<Vec<_>>()
        .join(", ");
    anyhow::anyhow!(
        "{what} became non-finite; {} offending nodes (first: {first}); \
         details in {}",
        bad.len(),
        dump_path.display()
    )
}

fn backward_and_step(
    g: &Graph<f32>,
    loss: TensorId,
    state: &mut TrainState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    let grads = g.backward(loss).map_err(|e| anyhow::anyhow!("{e}"))?;
    state.model.params_mut().zero_grad();
    g.accumulate_param_grads(&grads, state.model.params_mut());
    if let Some(p) = &mut state.pose {
        p.params_mut().zero_grad();
        g.accumulate_param_grads(&grads, p.params_mut());
    }
    let norm = clip_joint(state, cfg.grad_clip_max_norm);
    if !norm.is_finite() {
        bail!("gradient norm became non-finite");
    }
    adam_all(state, lr);
    Ok(norm)
}

fn depth_step(
    cfg: &TrainConfig,
    state: &mut TrainState,
    batch: &[&FrameTriplet<f32>],
    lr: f64,
    run_dir: &Path,
) -> Result<BTreeMap<String, f64>> {
    let mut g = Graph::<f32>::new();
    let target = g.leaf(stack_images(batch, |t| &t.target), false);
    let sources = [
        g.leaf(stack_images(batch, |t| &t.sources[0]), false),
        g.leaf(stack_images(batch, |t| &t.sources[1]), false),
    ];
    let built = state
        .model
        .forward(&mut g, target)
        .map_err(|e| anyhow::anyhow!("forward: {e}"))?;
    let poses: Vec<TensorId> = match cfg.pose_source {
        PoseSource::GroundTruth => (0..2)
            .map(|k| {
                let per: Vec<_> = batch.iter().map(|t| t.gt_poses[k]).collect();
                g.constant(poses_to_tensor(&per))
            })
            .collect(),
        PoseSource::Learned => {
            let pose_net = state.pose.as_ref().expect("learned pose head");
            sources
                .iter()
                .map(|&s| pose_net.forward(&mut g, target, s))
                .collect::<pfn_core::Result<_>>()
                .map_err(|e| anyhow::anyhow!("pose forward: {e}"))?
        }
    };
    let lb = total_loss(
        &mut g,
        &built.predictions,
        &LossInputs {
            target,
            sources: &sources,
            poses: &poses,
            intrinsics: scene_intrinsics(cfg.data.height, cfg.data.width),
        },
        &cfg.loss.to_core(),
    )
    .map_err(|e| anyhow::anyhow!("loss: {e}"))?;
    let total = g.scalar(lb.total) as f64;
    if !total.is_finite() {
        return Err(nonfinite_abort(&g, run_dir, "loss"));
    }
    let norm = backward_and_step(&g, lb.total, state, cfg, lr)?;
    Ok(BTreeMap::from([
        ("total".to_string(), total),
        ("photometric".to_string(), g.scalar(lb.photometric) as f64),
        ("smoothness".to_string(), g.scalar(lb.smoothness) as f64),
        ("masked_fraction".to_string(), lb.masked_fraction),
        ("grad_norm".to_string(), norm),
    ]))
}

fn seg_step(
    cfg: &TrainConfig,
    state: &mut TrainState,
    batch: &[&FrameTriplet<f32>],
    iter: u64,
    lr: f64,
    run_dir: &Path,
) -> Result<BTreeMap<String, f64>> {
    let (h, w) = (cfg.data.height, cfg.data.width);
    let mut images = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len() * h * w);
    for (slot, t) in batch.iter().enumerate() {
        let flip =
            cfg.data.flip_augment && hash_unit(cfg.seed ^ 0xf11b, iter, slot as u64) < 0.5;
        if flip {
            images.push(hflip(&t.target));
            labels.extend(hflip_labels(&t.gt_labels, h, w));
        } else {
            images.push(t.target.clone());
            labels.extend_from_slice(&t.gt_labels);
        }
    }
    let stacked = Tensor::from_fn(Shape::new(batch.len(), 3, h, w), |n, c, y, x| {
        images[n].at(0, c, y, x)
    });
    let mut g = Graph::<f32>::new();
    let image = g.leaf(stacked, false);
    let built = state
        .model
        .forward(&mut g, image)
        .map_err(|e| anyhow::anyhow!("forward: {e}"))?;
    let loss = segmentation_loss(&mut g, &built.predictions, &labels, IGNORE_LABEL)?;
    let total = g.scalar(loss) as f64;
    if !total.is_finite() {
        return Err(nonfinite_abort(&g, run_dir, "loss"));
    }
    let norm = backward_and_step(&g, loss, state, cfg, lr)?;
    Ok(BTreeMap::from([
        ("total".to_string(), total),
        ("grad_norm".to_string(), norm),
    ]))
}

// ---- the loop ----

pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub final_checkpoint: PathBuf,
    pub last_metrics: BTreeMap<String, f64>,
}

fn csv_columns(task: Task) -> &'static [&'static str] {
    match task {
        Task::Depth => &[
            "total",
            "photometric",
            "smoothness",
            "masked_fraction",
            "grad_norm",
        ],
        Task::Segmentation => &["total", "grad_norm"],
    }
}

fn open_log(path: &Path, header: &str, append: bool) -> Result<fs::File> {
    let mut opts = fs::OpenOptions::new();
    if append && path.exists() {
        opts.append(true);
        opts.open(path).map_err(Into::into)
    } else {
        let mut f = opts.write(true).create(true).truncate(true).open(path)?;
        writeln!(f, "{header}")?;
        Ok(f)
    }
}

/// Runs `cfg` inside `run_dir`, optionally resuming from a checkpoint
/// directory. The run directory receives config.toml, metrics.csv,
/// timing.csv and checkpoint subdirectories; the final checkpoint is
/// always written, so a zero-iteration run checkpoints the initialization.
pub fn train(cfg: &TrainConfig, run_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    fs::write(run_dir.join("config.toml"), cfg.to_toml_string())?;

    let scene = cfg.data.to_scene();
    let data: Vec<FrameTriplet<f32>> = dataset(&scene, cfg.data.scenes, cfg.seed, Split::Train)
        .collect::<pfn_core::Result<_>>()
        .map_err(|e| anyhow::anyhow!("scene generation: {e}"))?;
    if data.is_empty() {
        bail!("no training scenes (data.scenes = {})", cfg.data.scenes);
    }
    let steps_per_epoch = data.len() / cfg.batch_size;
    if steps_per_epoch == 0 {
        bail!(
            "batch_size {} exceeds the {}-sample training split",
            cfg.batch_size,
            data.len()
        );
    }

    let (mut state, start_iter) = match resume {
        Some(dir) => {
            let (manifest, st) = checkpoint::load(dir, Some(cfg))?;
            (st, manifest.iteration)
        }
        None => (TrainState::fresh(cfg)?, 0),
    };
    if start_iter > cfg.max_iter {
        bail!(
            "checkpoint is at iteration {start_iter}, beyond max_iter {}",
            cfg.max_iter
        );
    }

    let columns = csv_columns(cfg.task);
    let mut metrics_log = open_log(
        &run_dir.join("metrics.csv"),
        &format!("iter,lr,{}", columns.join(",")),
        start_iter > 0,
    )?;
    let mut timing_log = open_log(&run_dir.join("timing.csv"), "iter,millis", start_iter > 0)?;

    let mut last = BTreeMap::new();
    for iter in start_iter..cfg.max_iter {
        let begun = Instant::now();
        let lr = current_lr(cfg, iter);
        let picked = batch_indices(data.len(), cfg.batch_size, cfg.seed, iter, steps_per_epoch);
        let batch: Vec<&FrameTriplet<f32>> = picked.iter().map(|&i| &data[i]).collect();
        let values = match cfg.task {
            Task::Depth => depth_step(cfg, &mut state, &batch, lr, run_dir)?,
            Task::Segmentation => seg_step(cfg, &mut state, &batch, iter, lr, run_dir)?,
        };
        let row: Vec<String> = columns.iter().map(|c| format!("{}", values[*c])).collect();
        writeln!(metrics_log, "{iter},{lr},{}", row.join(","))?;
        writeln!(timing_log, "{iter},{}", begun.elapsed().as_millis())?;
        if cfg.checkpoint_every > 0 && (iter + 1) % cfg.checkpoint_every == 0 {
            checkpoint::save(
                &run_dir.join(format!("ckpt-{:06}", iter + 1)),
                cfg,
                &state,
                iter + 1,
                &values,
            )?;
        }
        last = values;
    }

    let final_dir = run_dir.join("ckpt-final");
    checkpoint::save(&final_dir, cfg, &state, cfg.max_iter, &last)?;
    Ok(TrainOutcome {
        run_dir: run_dir.to_path_buf(),
        final_checkpoint: final_dir,
        last_metrics: last,
    })
}
