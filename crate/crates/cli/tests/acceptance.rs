//! Acceptance gates for the whole workspace, one criterion per numbered
//! check. Every criterion prints exactly one PASS/FAIL line; the test
//! fails at the end if any criterion failed. The heavyweight training
//! criteria (7, 8) run real optimization and dominate the runtime.
//!
//! For local iteration `PFN_ACCEPTANCE_ONLY=1,4,5` restricts which
//! criteria execute, but a filtered run always fails at the end so a
//! subset can never stand in for the full suite.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use pfn_cli::checkpoint;
use pfn_cli::config::{DataSection, Fusion, PoseSource, Task, TrainConfig};
use pfn_cli::eval::{evaluate, EvalOut};
use pfn_cli::gradfull::full_model_fd;
use pfn_cli::train::{poly_lr, train};
use pfn_core::arch::{FusionKind, PfnConfig, PfnModel};
use pfn_core::engine::Graph;
use pfn_core::gradcheck::ops::op_suite;
use pfn_core::loss::warp::{poses_to_tensor, warp, RigidPose};
use pfn_core::loss::{min_reprojection_automask, photometric, smoothness, ssim, DepthLossConfig};
use pfn_core::rng::SplitMix64;
use pfn_core::synth::{dataset, scene_intrinsics, Split};
use pfn_core::tensor::{Shape, Tensor};

// ---------------------------------------------------------------------------
// harness

struct Verdict {
    number: usize,
    what: &'static str,
    outcome: Result<String, String>,
}

fn scratch_root() -> PathBuf {
    std::env::temp_dir().join(format!("pfn-acceptance-{}", std::process::id()))
}

fn selected() -> Option<BTreeSet<usize>> {
    let raw = std::env::var("PFN_ACCEPTANCE_ONLY").ok()?;
    Some(
        raw.split(',')
            .filter_map(|s| s.trim().parse().ok())
            .collect(),
    )
}

fn finite(v: f64) -> bool {
    v.is_finite()
}

/// Reads one named column out of a training metrics CSV.
fn csv_column(path: &Path, column: &str) -> Result<Vec<f64>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty csv")?;
    let idx = header
        .split(',')
        .position(|h| h == column)
        .ok_or_else(|| format!("no column {column:?} in {header:?}"))?;
    let mut out = Vec::new();
    for line in lines {
        let cell = line
            .split(',')
            .nth(idx)
            .ok_or_else(|| format!("short row {line:?}"))?;
        out.push(
            cell.parse::<f64>()
                .map_err(|e| format!("bad cell {cell:?}: {e}"))?,
        );
    }
    Ok(out)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------------------
// criterion 1: finite-difference oracle over ops and the composed model

fn c1_gradients() -> Result<String, String> {
    let t0 = Instant::now();
    let mut worst_op = ("", 0.0f64);
    for rep in op_suite() {
        if rep.checked == 0 {
            return Err(format!(
                "op {} input {} checked nothing ({} skipped)",
                rep.op, rep.input, rep.skipped_nonsmooth
            ));
        }
        if rep.max_rel_err >= 1e-4 {
            return Err(format!(
                "op {} input {} rel err {:.3e} >= 1e-4",
                rep.op, rep.input, rep.max_rel_err
            ));
        }
        if rep.max_rel_err > worst_op.1 {
            worst_op = (rep.op, rep.max_rel_err);
        }
    }
    let full = full_model_fd(6, 48).map_err(|e| format!("composed check: {e:#}"))?;
    if full.param_entries_checked < 50 || full.input_entries_checked < 20 {
        return Err(format!(
            "composed check too thin: {} param / {} input entries",
            full.param_entries_checked, full.input_entries_checked
        ));
    }
    if full.max_param_err >= 1e-3 || full.max_input_err >= 1e-3 {
        return Err(format!(
            "composed rel err {:.3e} (params) / {:.3e} (input) >= 1e-3",
            full.max_param_err, full.max_input_err
        ));
    }
    let secs = t0.elapsed().as_secs_f64();
    if secs >= 300.0 {
        return Err(format!("gradient oracle took {secs:.0}s (budget 300s)"));
    }
    Ok(format!(
        "worst op {} {:.1e}; composed {:.1e} over {} entries; {secs:.1}s",
        worst_op.0, worst_op.1,
        full.max_param_err.max(full.max_input_err),
        full.param_entries_checked + full.input_entries_checked,
    ))
}

// ---------------------------------------------------------------------------
// criterion 2: module-count oracle from the recursive definition
//
// Literal interpreter of the recursion, kept independent of the builder:
// level 1 aggregates once; level s composes level s-1 n_{s-1} times, then
// aggregates its own scale and fuses scales 1..=s; the network applies the
// top level n_S times. Each fusion block's arity equals its level.

fn compose_counts(s: usize, n: &dyn Fn(usize) -> usize, sa: &mut [usize], fus: &mut Vec<usize>) {
    if s == 1 {
        sa[0] += 1;
        return;
    }
    for _ in 0..n(s - 1) {
        compose_counts(s - 1, n, sa, fus);
    }
    sa[s - 1] += 1;
    fus.push(s);
}

fn network_counts(scales: usize, n: &dyn Fn(usize) -> usize) -> (Vec<usize>, Vec<usize>) {
    let mut sa = vec![0; scales];
    let mut fus = Vec::new();
    for _ in 0..n(scales) {
        compose_counts(scales, n, &mut sa, &mut fus);
    }
    (sa, fus)
}

fn c2_counts() -> Result<String, String> {
    for scales in 1..=6usize {
        for n in 1..=3usize {
            let cfg = PfnConfig {
                scales,
                expansion: n,
                shared_channels: 1,
                private_channels: 1,
                output_scales: 1,
                ..PfnConfig::base()
            };
            let model =
                PfnModel::<f32>::new(cfg, 7).map_err(|e| format!("S={scales} n={n}: {e}"))?;
            let (sa, fus) = network_counts(scales, &|_| n);
            let stats = model.stats();
            if stats.sa_count_per_scale != sa {
                return Err(format!(
                    "S={scales} n={n}: builder SA counts {:?} vs recursion {:?}",
                    stats.sa_count_per_scale, sa
                ));
            }
            if stats.fusion_count != fus.len() {
                return Err(format!(
                    "S={scales} n={n}: builder fusions {} vs recursion {}",
                    stats.fusion_count,
                    fus.len()
                ));
            }
        }
    }
    let (sa, fus) = network_counts(3, &|_| 2);
    if sa != vec![8, 4, 2] || fus.len() != 6 {
        return Err(format!(
            "S=3 n=2 pinned counts violated: {sa:?} / {}",
            fus.len()
        ));
    }
    Ok("builder matches the recursion for S in 1..=6, n in 1..=3; S=3 n=2 gives (8,4,2)/6".into())
}

// ---------------------------------------------------------------------------
// criterion 3: parameter inventory, closed form vs registry vs size band

/// Closed-form parameter count from the module inventory alone.
fn analytic_param_count(cfg: &PfnConfig) -> usize {
    let k2 = cfg.kernel * cfg.kernel;
    let sc = cfg.shared_channels;
    let pc = cfg.private_channels;
    let conv = |cin: usize, cout: usize| cout * cin * k2 + cout;
    let (sa, fus) = network_counts(cfg.scales, &|s| cfg.expansion_at(s));

    let stem = conv(cfg.input_channels, sc) + if pc > 0 { conv(cfg.input_channels, pc) } else { 0 };

    let cat = sc + pc;
    let per_sa = conv(cat, sc) + if pc > 0 { conv(cat, pc) } else { 0 };
    let sa_total: usize = sa.iter().sum::<usize>() * per_sa;

    let fusion_params = |arity: usize, width: usize, targets: usize, kind: FusionKind| match kind {
        FusionKind::Cws => {
            if cfg.cws_weighted {
                targets * arity * width
            } else {
                0
            }
        }
        FusionKind::Ctc => targets * conv(arity * width, width),
    };
    let inner: usize = fus
        .iter()
        .map(|&m| fusion_params(m, sc, m, cfg.fusion_inner))
        .sum();

    let width = sc + pc;
    let head = fusion_params(cfg.scales, width, cfg.output_scales, cfg.fusion_output)
        + cfg.output_scales * conv(width, cfg.output_channels);

    stem + sa_total + inner + head
}

fn c3_params() -> Result<String, String> {
    let cfg = PfnConfig::base();
    let model = PfnModel::<f32>::new(cfg.clone(), 7).map_err(|e| format!("{e}"))?;
    let registry = model.stats().param_count;
    let formula = analytic_param_count(&cfg);
    if registry != formula {
        return Err(format!(
            "registry {registry} vs closed form {formula} parameters"
        ));
    }
    let reference = 4_824_000.0;
    let rel = (registry as f64 - reference) / reference;
    if rel.abs() > 0.25 {
        return Err(format!(
            "{registry} parameters is {:.1}% from {reference}, outside the 25% band",
            rel * 100.0
        ));
    }
    Ok(format!(
        "{registry} parameters, closed form agrees, {:+.1}% vs the reference scale",
        rel * 100.0
    ))
}

// ---------------------------------------------------------------------------
// criterion 4: activation bounds on adversarial input; escape-depth growth

fn c4_bounds_depth() -> Result<String, String> {
    // Extreme alternating inputs push the pre-activations far past the cap.
    let cfg = PfnConfig {
        scales: 3,
        shared_channels: 4,
        private_channels: 8,
        output_scales: 3,
        ..PfnConfig::base()
    };
    let model = PfnModel::<f32>::new(cfg.clone(), 11).map_err(|e| format!("{e}"))?;
    let mut saturated = false;
    for pattern in 0..2u64 {
        let image = Tensor::from_fn(Shape::new(1, 3, 32, 32), |_, c, y, x| {
            let sign = if (x + y * (pattern as usize + 1) + c) % 2 == 0 {
                1.0
            } else {
                -1.0
            };
            (1e6 * sign) as f32
        });
        let mut g = Graph::<f32>::new();
        let leaf = g.constant(image);
        model.forward(&mut g, leaf).map_err(|e| format!("{e}"))?;
        for i in 0..g.node_count() {
            let id = pfn_core::engine::TensorId::from_index(i);
            if g.op_name(id) != "clamp" {
                continue;
            }
            for &v in g.values(id) {
                if !(0.0..=1e4 + 1e-3).contains(&(v as f64)) {
                    return Err(format!("clamped activation out of range: {v}"));
                }
                if v as f64 >= 1e4 {
                    saturated = true;
                }
            }
        }
    }
    if !saturated {
        return Err("adversarial input never reached the activation cap — bound untested".into());
    }

    let mut depths = Vec::new();
    for scales in 2..=5usize {
        let cfg = PfnConfig {
            scales,
            shared_channels: 2,
            private_channels: 2,
            output_scales: 1,
            ..PfnConfig::base()
        };
        let model = PfnModel::<f32>::new(cfg, 3).map_err(|e| format!("{e}"))?;
        depths.push(model.stats().max_conv_depth);
    }
    if depths != vec![5, 6, 7, 8] {
        return Err(format!(
            "escape depths for S=2..=5 are {depths:?}, expected [5, 6, 7, 8]"
        ));
    }
    Ok(format!(
        "all clamped activations in [0, 1e4] with saturation observed; escape depth {depths:?}"
    ))
}

// ---------------------------------------------------------------------------
// criterion 5: loss identities

fn c5_loss_identities() -> Result<String, String> {
    let cfg = DepthLossConfig::default();
    let mut r = SplitMix64::new(0xae51);
    let img = Tensor::from_fn(Shape::new(1, 3, 12, 12), |_, _, _, _| r.uniform(0.05, 0.95));

    // identical images: structural similarity is exactly one, the
    // photometric pair error exactly zero
    {
        let mut g = Graph::<f64>::new();
        let a = g.constant(img.clone());
        let s = ssim(&mut g, a, a, cfg.ssim_window).map_err(|e| format!("{e}"))?;
        if g.values(s).iter().any(|&v| v != 1.0) {
            return Err("ssim of an image with itself is not exactly 1".into());
        }
        let lp = photometric(&mut g, a, a, &cfg).map_err(|e| format!("{e}"))?;
        if g.values(lp).iter().any(|&v| v != 0.0) {
            return Err("photometric error of an image with itself is not exactly 0".into());
        }
    }

    // smoothness is invariant to disparity scale (mean normalization)
    {
        let mut g = Graph::<f64>::new();
        let mut r = SplitMix64::new(0x5107);
        let disp = Tensor::from_fn(Shape::new(1, 1, 16, 16), |_, _, _, _| r.uniform(0.2, 0.8));
        let image = Tensor::from_fn(Shape::new(1, 3, 16, 16), |_, _, _, _| r.uniform(0.0, 1.0));
        let d = g.constant(disp.clone());
        let i = g.constant(image);
        let s1 = smoothness(&mut g, d, i).map_err(|e| format!("{e}"))?;
        let scaled = g.scale(d, 2.5);
        let s2 = smoothness(&mut g, scaled, i).map_err(|e| format!("{e}"))?;
        let (v1, v2) = (g.scalar(s1), g.scalar(s2));
        if (v1 - v2).abs() >= 1e-6 {
            return Err(format!(
                "smoothness changed under disparity scaling: {v1} vs {v2}"
            ));
        }
    }

    // static scene: sources identical to the target make the identity
    // reprojection unbeatable, so the auto-mask removes every pixel
    {
        let mut g = Graph::<f64>::new();
        let target = g.constant(img.clone());
        let source = g.constant(img.clone());
        let depth = g.constant(Tensor::full(Shape::new(1, 1, 12, 12), 2.0));
        let pose = g.constant(poses_to_tensor(&[RigidPose {
            rotation: [0.0, 0.02, 0.0],
            translation: [0.15, 0.0, 0.0],
        }]));
        let k = scene_intrinsics(12, 12);
        let w = warp(&mut g, source, depth, pose, &k).map_err(|e| format!("{e}"))?;
        let out = min_reprojection_automask(&mut g, target, &[source], &[w], &cfg)
            .map_err(|e| format!("{e}"))?;
        if out.masked_fraction != 1.0 {
            return Err(format!(
                "static scene masked fraction {} != 1",
                out.masked_fraction
            ));
        }
        if g.values(out.loss_map).iter().any(|&v| v != 0.0) {
            return Err("static scene appearance loss is not exactly 0".into());
        }
    }

    Ok("ssim(a,a)=1 and photometric(a,a)=0 exactly; smoothness scale-invariant; static scene fully masked".into())
}

// ---------------------------------------------------------------------------
// criterion 6: geometry against the closed form and the generator's flow

fn c6_geometry() -> Result<String, String> {
    // lateral translation at constant depth displaces by fx * t / d
    {
        let (h, w) = (24usize, 24usize);
        let k = scene_intrinsics(h, w);
        let (tx, d) = (0.12f64, 2.5f64);
        let mut g = Graph::<f64>::new();
        let mut r = SplitMix64::new(0x6e0);
        let source = g.constant(Tensor::from_fn(Shape::new(1, 3, h, w), |_, _, _, _| {
            r.uniform(0.0, 1.0)
        }));
        let depth = g.constant(Tensor::full(Shape::new(1, 1, h, w), d));
        let pose = g.constant(poses_to_tensor(&[RigidPose {
            rotation: [0.0; 3],
            translation: [tx, 0.0, 0.0],
        }]));
        let warped = warp(&mut g, source, depth, pose, &k).map_err(|e| format!("{e}"))?;
        let expected = k.fx * tx / d;
        let xs = g.values(warped.sample_x);
        let ys = g.values(warped.sample_y);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let dx = xs[i] - x as f64;
                let dy = ys[i] - y as f64;
                if (dx - expected).abs() >= 1e-3 || dy.abs() >= 1e-3 {
                    return Err(format!(
                        "displacement at ({x},{y}) is ({dx:.5},{dy:.5}), expected ({expected:.5},0)"
                    ));
                }
            }
        }
    }

    // the generator's flow field and the warp grid are independent
    // constructions of the same geometry
    let scene = DataSection::default().to_scene();
    let triplet = dataset::<f64>(&scene, 2, 9, Split::All)
        .next()
        .ok_or("no synthetic frame")?
        .map_err(|e| format!("{e}"))?;
    let mut g = Graph::<f64>::new();
    let source = g.constant(triplet.sources[1].clone());
    let depth = g.constant(triplet.gt_depth.clone());
    let pose = g.constant(poses_to_tensor(&[triplet.gt_poses[1]]));
    let k = scene_intrinsics(scene.height, scene.width);
    let warped = warp(&mut g, source, depth, pose, &k).map_err(|e| format!("{e}"))?;
    let xs = g.values(warped.sample_x);
    let ys = g.values(warped.sample_y);
    let flow = &triplet.gt_flow;
    let mut worst = 0.0f64;
    let mut compared = 0usize;
    for y in 0..flow.h {
        for x in 0..flow.w {
            let i = y * flow.w + x;
            if !flow.valid[i] {
                continue;
            }
            compared += 1;
            let ex = (xs[i] - x as f64 - flow.dx[i]).abs();
            let ey = (ys[i] - y as f64 - flow.dy[i]).abs();
            worst = worst.max(ex).max(ey);
        }
    }
    if compared < flow.h * flow.w / 2 {
        return Err(format!("flow comparison too thin: {compared} pixels"));
    }
    if worst >= 1e-3 {
        return Err(format!(
            "flow and warp grid disagree by {worst:.2e} px over {compared} pixels"
        ));
    }
    Ok(format!(
        "lateral displacement matches fx*t/d; generator flow agrees with the warp grid to {worst:.1e} px"
    ))
}

// ---------------------------------------------------------------------------
// criterion 7: depth training convergence, both pose sources

fn depth_cfg(pose: PoseSource, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default_for(Task::Depth);
    cfg.pose_source = pose;
    cfg.seed = seed;
    cfg.data.scenes = 12;
    cfg
}

/// Depth recipe for the convergence runs. The disparity range is matched
/// to the generator's depth scale (everything sits between 1 and 14), and
/// the static-pixel auto-mask is off: these scenes are fully rigid with
/// real motion in every frame, so the mask has nothing legitimate to
/// remove — it only couples the logged photometric mean to a shifting
/// pixel support, which hides the convergence this criterion asserts.
fn convergence_cfg(pose: PoseSource) -> TrainConfig {
    let mut cfg = depth_cfg(pose, 1);
    cfg.loss.min_depth = 1.0;
    cfg.loss.max_depth = 20.0;
    cfg.loss.automask = false;
    cfg
}

fn converged(metrics: &Path) -> Result<(f64, f64), String> {
    let photo = csv_column(metrics, "photometric")?;
    if photo.len() < 60 {
        return Err(format!("only {} training rows", photo.len()));
    }
    if photo.iter().any(|v| !finite(*v)) {
        return Err("non-finite photometric loss".into());
    }
    let early = mean(&photo[10..30]);
    let late = mean(&photo[photo.len() - 20..]);
    Ok((early, late))
}

fn c7_depth() -> Result<String, String> {
    let root = scratch_root();

    let t0 = Instant::now();
    let cfg = convergence_cfg(PoseSource::GroundTruth);
    let run = root.join("depth-gt");
    let outcome = train(&cfg, &run, None).map_err(|e| format!("ground-truth run: {e:#}"))?;
    let gt_secs = t0.elapsed().as_secs_f64();
    if gt_secs > 1800.0 {
        return Err(format!("ground-truth run took {gt_secs:.0}s (budget 1800s)"));
    }
    let (early, late) = converged(&run.join("metrics.csv"))?;
    if !(late <= 0.5 * early) {
        return Err(format!(
            "photometric did not halve: around step 20 {early:.3e}, final window {late:.3e}"
        ));
    }
    let (_, state) = checkpoint::load(&outcome.final_checkpoint, Some(&cfg))
        .map_err(|e| format!("reload: {e:#}"))?;
    let gt_abs_rel = match evaluate(&cfg, &state, Split::Val, false, 80.0, None)
        .map_err(|e| format!("eval: {e:#}"))?
    {
        EvalOut::Depth(d) => d.mean.abs_rel,
        EvalOut::Seg(_) => return Err("depth eval returned segmentation output".into()),
    };
    if !(gt_abs_rel < 0.25) {
        return Err(format!(
            "held-out abs_rel {gt_abs_rel:.3} with ground-truth poses (need < 0.25, no rescaling)"
        ));
    }

    let t1 = Instant::now();
    let cfg2 = convergence_cfg(PoseSource::Learned);
    let run2 = root.join("depth-learned");
    let outcome2 = train(&cfg2, &run2, None).map_err(|e| format!("learned-pose run: {e:#}"))?;
    let lp_secs = t1.elapsed().as_secs_f64();
    if lp_secs > 1800.0 {
        return Err(format!("learned-pose run took {lp_secs:.0}s (budget 1800s)"));
    }
    let (_, state2) = checkpoint::load(&outcome2.final_checkpoint, Some(&cfg2))
        .map_err(|e| format!("reload: {e:#}"))?;
    // learned pose leaves the reconstruction scale free, so the metric is
    // read after median alignment
    let lp_abs_rel = match evaluate(&cfg2, &state2, Split::Val, true, 80.0, None)
        .map_err(|e| format!("eval: {e:#}"))?
    {
        EvalOut::Depth(d) => d.mean.abs_rel,
        EvalOut::Seg(_) => return Err("depth eval returned segmentation output".into()),
    };
    if !(lp_abs_rel < 0.35) {
        return Err(format!(
            "held-out abs_rel {lp_abs_rel:.3} with learned poses (need < 0.35, median-aligned)"
        ));
    }

    Ok(format!(
        "photometric {early:.2e} -> {late:.2e}; abs_rel {gt_abs_rel:.3} (gt pose) / {lp_abs_rel:.3} (learned); {gt_secs:.0}s + {lp_secs:.0}s"
    ))
}

// ---------------------------------------------------------------------------
// criterion 8: segmentation overfit under the poly schedule

fn c8_segmentation() -> Result<String, String> {
    let base: f64 = 0.007;
    let mid = poly_lr(base, 1000, 2000, 0.9);
    if (mid - base * 0.5f64.powf(0.9)).abs() >= 1e-9 {
        return Err(format!("poly midpoint {mid} off the closed form"));
    }

    let mut cfg = TrainConfig::default_for(Task::Segmentation);
    cfg.seed = 1;
    cfg.data.scenes = 4;
    cfg.data.height = 32;
    cfg.data.width = 32;
    let run = scratch_root().join("seg");
    let t0 = Instant::now();
    let outcome = train(&cfg, &run, None).map_err(|e| format!("run: {e:#}"))?;
    let secs = t0.elapsed().as_secs_f64();
    let losses = csv_column(&run.join("metrics.csv"), "total")?;
    if losses.iter().any(|v| !finite(*v)) {
        return Err("non-finite training loss".into());
    }
    let (_, state) = checkpoint::load(&outcome.final_checkpoint, Some(&cfg))
        .map_err(|e| format!("reload: {e:#}"))?;
    let miou = match evaluate(&cfg, &state, Split::Train, false, 80.0, None)
        .map_err(|e| format!("eval: {e:#}"))?
    {
        EvalOut::Seg(s) => s.miou,
        EvalOut::Depth(_) => return Err("segmentation eval returned depth output".into()),
    };
    if !(miou > 0.9) {
        return Err(format!("training mIoU {miou:.3} (need > 0.9)"));
    }
    Ok(format!(
        "poly midpoint exact; training mIoU {miou:.3} after 2000 steps; {secs:.0}s"
    ))
}

// ---------------------------------------------------------------------------
// criterion 9: fusion and channel-split ablations

fn c9_ablations() -> Result<String, String> {
    let root = scratch_root();
    let mut param_counts = Vec::new();

    let combos = [
        (Fusion::Cws, Fusion::Cws),
        (Fusion::Cws, Fusion::Ctc),
        (Fusion::Ctc, Fusion::Cws),
        (Fusion::Ctc, Fusion::Ctc),
    ];
    for (i, (inner, output)) in combos.iter().enumerate() {
        let mut cfg = depth_cfg(PoseSource::GroundTruth, 3);
        cfg.max_iter = 50;
        cfg.data.scenes = 4;
        cfg.data.height = 32;
        cfg.data.width = 32;
        cfg.model.fusion_inner = *inner;
        cfg.model.fusion_output = *output;
        let run = root.join(format!("fusion-{i}"));
        train(&cfg, &run, None).map_err(|e| format!("fusion combo {i}: {e:#}"))?;
        for col in ["total", "photometric", "grad_norm"] {
            let vals = csv_column(&run.join("metrics.csv"), col)?;
            if vals.len() != 50 || vals.iter().any(|v| !finite(*v)) {
                return Err(format!("fusion combo {i}: bad {col} column"));
            }
        }
        let model = PfnModel::<f32>::new(cfg.model.to_core(), 3).map_err(|e| format!("{e}"))?;
        param_counts.push(model.stats().param_count);
    }
    let distinct: BTreeSet<_> = param_counts.iter().collect();
    if distinct.len() != combos.len() {
        return Err(format!(
            "fusion combos share parameter counts: {param_counts:?}"
        ));
    }

    let mut split_counts = Vec::new();
    for (i, pc) in [0usize, 6, 12, 18, 24].into_iter().enumerate() {
        let mut cfg = depth_cfg(PoseSource::GroundTruth, 4);
        cfg.max_iter = 50;
        cfg.data.scenes = 4;
        cfg.data.height = 32;
        cfg.data.width = 32;
        cfg.model.shared_channels = 6;
        cfg.model.private_channels = pc;
        let run = root.join(format!("split-{i}"));
        train(&cfg, &run, None).map_err(|e| format!("split 1:{}: {e:#}", pc / 6))?;
        let vals = csv_column(&run.join("metrics.csv"), "total")?;
        if vals.len() != 50 || vals.iter().any(|v| !finite(*v)) {
            return Err(format!("split 1:{}: bad loss column", pc / 6));
        }
        let model = PfnModel::<f32>::new(cfg.model.to_core(), 4).map_err(|e| format!("{e}"))?;
        split_counts.push(model.stats().param_count);
    }
    if !split_counts.windows(2).all(|w| w[0] < w[1]) {
        return Err(format!(
            "private-channel growth should grow the model: {split_counts:?}"
        ));
    }

    Ok(format!(
        "4 fusion combos and 5 channel splits trained 50 finite steps; parameters {param_counts:?} / {split_counts:?}"
    ))
}

// ---------------------------------------------------------------------------
// criterion 10: determinism of runs and checkpoints

fn run_binary(root: &Path, name: &str) -> Result<PathBuf, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pfn"))
        .env("PFN_RUN_ROOT", root)
        .args([
            "train",
            "--task",
            "depth",
            "--pose-source",
            "ground-truth",
            "--scenes",
            "6",
            "--height",
            "32",
            "--width",
            "32",
            "--max-iter",
            "30",
            "--seed",
            "5",
            "--run-name",
            name,
        ])
        .output()
        .map_err(|e| format!("spawning trainer: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "trainer failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(root.join(name))
}

fn file_bytes(path: &Path) -> Result<Vec<u8>, String> {
    fs::read(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn c10_determinism() -> Result<String, String> {
    let root = scratch_root().join("determinism");
    let a = run_binary(&root, "det-a")?;
    let b = run_binary(&root, "det-b")?;
    if file_bytes(&a.join("metrics.csv"))? != file_bytes(&b.join("metrics.csv"))? {
        return Err("metrics.csv differs between identical seeded runs".into());
    }
    for f in ["manifest.toml", "params.bin", "optim.bin"] {
        if file_bytes(&a.join("ckpt-final").join(f))? != file_bytes(&b.join("ckpt-final").join(f))?
        {
            return Err(format!("{f} differs between identical seeded runs"));
        }
    }

    // round trip: load the checkpoint and save it again, bit for bit
    let ckpt = a.join("ckpt-final");
    let (manifest, state) = checkpoint::load(&ckpt, None).map_err(|e| format!("load: {e:#}"))?;
    let resaved = root.join("resaved");
    checkpoint::save(
        &resaved,
        &manifest.config,
        &state,
        manifest.iteration,
        &manifest.metrics,
    )
    .map_err(|e| format!("save: {e:#}"))?;
    for f in ["manifest.toml", "params.bin", "optim.bin"] {
        if file_bytes(&ckpt.join(f))? != file_bytes(&resaved.join(f))? {
            return Err(format!("{f} changed across a load/save round trip"));
        }
    }
    Ok("seeded reruns and checkpoint round trips are byte-identical".into())
}

// ---------------------------------------------------------------------------

#[test]
fn acceptance() {
    let filter = selected();
    let runs: Vec<(usize, &'static str, fn() -> Result<String, String>)> = vec![
        (1, "gradient oracle", c1_gradients),
        (2, "module-count oracle", c2_counts),
        (3, "parameter inventory", c3_params),
        (4, "activation bounds and escape depth", c4_bounds_depth),
        (5, "loss identities", c5_loss_identities),
        (6, "geometry oracle", c6_geometry),
        (7, "depth convergence", c7_depth),
        (8, "segmentation overfit", c8_segmentation),
        (9, "ablation grid", c9_ablations),
        (10, "determinism", c10_determinism),
    ];

    let scratch = scratch_root();
    let mut verdicts = Vec::new();
    for (number, what, f) in &runs {
        if let Some(only) = &filter {
            if !only.contains(number) {
                continue;
            }
        }
        verdicts.push(Verdict {
            number: *number,
            what,
            outcome: f(),
        });
    }
    let _ = fs::remove_dir_all(&scratch);

    let mut failed = Vec::new();
    for v in &verdicts {
        match &v.outcome {
            Ok(detail) => println!("ACCEPTANCE {:02} PASS — {}: {detail}", v.number, v.what),
            Err(reason) => {
                println!("ACCEPTANCE {:02} FAIL — {}: {reason}", v.number, v.what);
                failed.push(v.number);
            }
        }
    }
    assert!(
        failed.is_empty(),
        "acceptance criteria failed: {failed:?}"
    );
    if filter.is_some() {
        panic!("partial acceptance run (PFN_ACCEPTANCE_ONLY is set); unset it for a real verdict");
    }
}
