//! Cross-module consistency: the differentiable warp, the scalar scene
//! geometry, the temporal-consistency metric, and the full objective must
//! all agree with each other on scenes whose ground truth is exact.

use pfn_core::engine::Graph;
use pfn_core::loss::warp::{poses_to_tensor, warp, RigidPose};
use pfn_core::loss::{total_loss, DepthLossConfig, LossInputs};
use pfn_core::metrics::tac_trc;
use pfn_core::synth::{dataset, render_scene, SceneConfig, Split, SyntheticScene};
use pfn_core::tensor::{Shape, Tensor};

fn default_triplet(seed: u64) -> pfn_core::synth::FrameTriplet<f64> {
    let cfg = SceneConfig::default();
    dataset::<f64>(&cfg, 1, seed, Split::All)
        .next()
        .unwrap()
        .unwrap()
}

fn scene_k(scene: &SyntheticScene) -> pfn_core::loss::CameraIntrinsics {
    scene.intrinsics
}

/// The graph warp's sample coordinates must match the independently
/// computed scalar flow to sub-millipixel accuracy wherever the flow is
/// valid.
#[test]
fn warp_grid_matches_synthetic_flow() {
    let cfg = SceneConfig::default();
    let scene = pfn_core::synth::generate_scene(&cfg, 4242).unwrap();
    let t = render_scene::<f64>(&scene, 1).unwrap();
    let (h, w) = (scene.height, scene.width);

    let mut g = Graph::<f64>::new();
    let source = g.leaf(t.sources[1].clone(), false);
    let depth = g.leaf(t.gt_depth.clone(), false);
    let pose = g.leaf(poses_to_tensor::<f64>(&[t.gt_poses[1]]), false);
    let warped = warp(&mut g, source, depth, pose, &scene_k(&scene)).unwrap();
    let sx = g.values(warped.sample_x).to_vec();
    let sy = g.values(warped.sample_y).to_vec();

    let mut checked = 0usize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !t.gt_flow.valid[i] {
                continue;
            }
            let ex = x as f64 + t.gt_flow.dx[i];
            let ey = y as f64 + t.gt_flow.dy[i];
            assert!(
                (sx[i] - ex).abs() < 1e-3 && (sy[i] - ey).abs() < 1e-3,
                "pixel ({x},{y}): warp ({}, {}) vs flow ({ex}, {ey})",
                sx[i],
                sy[i]
            );
            checked += 1;
        }
    }
    assert!(checked > h * w / 2, "only {checked} comparable pixels");
}

/// Exact depths of two consecutive frames, connected by exact flow, are
/// temporally consistent: warping the second depth map back to the first
/// frame reproduces it.
#[test]
fn exact_depths_are_temporally_consistent() {
    // the construction must keep per-point depth constant across frames and
    // keep depth edges out of the sampled field: sideways motion over a
    // single slanted backdrop. (Forward motion shifts every depth by the
    // step itself; floating planes park their footprint boundary — a depth
    // edge — inside the next frame.)
    let step = |x: f64| RigidPose {
        rotation: [0.0; 3],
        translation: [x, 0.0, 0.0],
    };
    let tr = 0.15;
    let scene = SyntheticScene {
        planes: vec![],
        camera_track: vec![step(-tr), RigidPose::identity(), step(tr), step(2.0 * tr)],
        intrinsics: pfn_core::loss::CameraIntrinsics {
            fx: 51.2,
            fy: 51.2,
            cx: 31.5,
            cy: 31.5,
        },
        height: 64,
        width: 64,
        background_depth: 6.0,
        background_normal: [0.25, 0.1, 1.0],
        background_seed: 5,
    };
    let t1 = render_scene::<f64>(&scene, 1).unwrap();
    let t2 = render_scene::<f64>(&scene, 2).unwrap();
    let (tac, trc) = tac_trc(&t1.gt_depth, &t2.gt_depth, &t1.gt_flow).unwrap();
    assert!(tac < 1e-3, "tac {tac}");
    assert!(trc < 1e-3, "trc {trc}");
}

fn disparity_from_depth(depth: &Tensor<f64>, cfg: &DepthLossConfig) -> Tensor<f64> {
    let lo = 1.0 / cfg.max_depth;
    let span = 1.0 / cfg.min_depth - lo;
    Tensor::from_fn(depth.shape, |n, c, y, x| {
        (1.0 / depth.at(n, c, y, x) - lo) / span
    })
}

/// Ground-truth depth and pose must score better than corrupted versions
/// of themselves — the objective points at the right answer. The ordering
/// is asserted with auto-masking off: the mask deliberately zeroes pixels
/// whose warp is worse than no warp at all, so a badly wrong pose can
/// lower the masked mean by getting itself censored. The raw photometric
/// alignment is what ground truth must win.
#[test]
fn objective_prefers_ground_truth() {
    let t = default_triplet(77);
    let cfg = SceneConfig::default();
    let scene = pfn_core::synth::generate_scene(&cfg, pfn_core::rng::hash_mix(77, 0xda7a, 0)).unwrap();
    let loss_cfg = DepthLossConfig {
        automask: false,
        ..DepthLossConfig::default()
    };

    let eval = |depth_scale: f64, pose_shift: f64| -> f64 {
        let mut g = Graph::<f64>::new();
        let target = g.leaf(t.target.clone(), false);
        let sources = [
            g.leaf(t.sources[0].clone(), false),
            g.leaf(t.sources[1].clone(), false),
        ];
        let scaled = Tensor::from_fn(t.gt_depth.shape, |n, c, y, x| {
            t.gt_depth.at(n, c, y, x) * depth_scale
        });
        let pred = g.leaf(disparity_from_depth(&scaled, &loss_cfg), false);
        let poses: Vec<_> = t
            .gt_poses
            .iter()
            .map(|p| {
                let mut p = *p;
                p.translation[0] += pose_shift;
                g.leaf(poses_to_tensor::<f64>(&[p]), false)
            })
            .collect();
        let out = total_loss(
            &mut g,
            &[pred],
            &LossInputs {
                target,
                sources: &sources,
                poses: &poses,
                intrinsics: scene_k(&scene),
            },
            &loss_cfg,
        )
        .unwrap();
        g.scalar(out.total)
    };

    let exact = eval(1.0, 0.0);
    let wrong_depth = eval(2.0, 0.0);
    let wrong_pose = eval(1.0, 0.3);
    assert!(exact < 0.1, "ground truth scores {exact}");
    assert!(
        exact < wrong_depth,
        "exact {exact} vs doubled depth {wrong_depth}"
    );
    assert!(exact < wrong_pose, "exact {exact} vs shifted pose {wrong_pose}");

    // with auto-masking on, ground truth on a moving camera keeps most
    // pixels and still scores low
    let masked_cfg = DepthLossConfig::default();
    let mut g = Graph::<f64>::new();
    let target = g.leaf(t.target.clone(), false);
    let sources = [
        g.leaf(t.sources[0].clone(), false),
        g.leaf(t.sources[1].clone(), false),
    ];
    let pred = g.leaf(disparity_from_depth(&t.gt_depth, &masked_cfg), false);
    let poses: Vec<_> = t
        .gt_poses
        .iter()
        .map(|p| g.leaf(poses_to_tensor::<f64>(&[*p]), false))
        .collect();
    let out = total_loss(
        &mut g,
        &[pred],
        &LossInputs {
            target,
            sources: &sources,
            poses: &poses,
            intrinsics: scene_k(&scene),
        },
        &masked_cfg,
    )
    .unwrap();
    assert!(g.scalar(out.total) < 0.1);
    assert!(out.masked_fraction < 0.5, "mask ate {}", out.masked_fraction);
}

/// A fully static triplet masks the photometric term completely: the pose
/// receives an exactly zero gradient while the disparity still learns from
/// the smoothness term.
#[test]
fn static_scene_blocks_pose_gradients_only() {
    let cfg = SceneConfig {
        max_rotation: 0.0,
        max_translation: 0.0,
        ..SceneConfig::default()
    };
    let t = dataset::<f64>(&cfg, 1, 5, Split::All).next().unwrap().unwrap();
    let scene = pfn_core::synth::generate_scene(&cfg, pfn_core::rng::hash_mix(5, 0xda7a, 0)).unwrap();

    let mut g = Graph::<f64>::new();
    let target = g.leaf(t.target.clone(), false);
    let sources = [
        g.leaf(t.sources[0].clone(), false),
        g.leaf(t.sources[1].clone(), false),
    ];
    let mut r = pfn_core::rng::SplitMix64::new(3);
    let pred = g.leaf(
        Tensor::from_fn(Shape::new(1, 1, 64, 64), |_, _, _, _| r.uniform(0.3, 0.7)),
        true,
    );
    let poses: Vec<_> = t
        .gt_poses
        .iter()
        .map(|p| g.leaf(poses_to_tensor::<f64>(&[*p]), true))
        .collect();
    let out = total_loss(
        &mut g,
        &[pred],
        &LossInputs {
            target,
            sources: &sources,
            poses: &poses,
            intrinsics: scene_k(&scene),
        },
        &DepthLossConfig::default(),
    )
    .unwrap();
    assert_eq!(out.masked_fraction, 1.0);

    let grads = g.backward(out.total).unwrap();
    for &pose in &poses {
        let pg = grads.get(pose).unwrap();
        assert!(pg.iter().all(|&v| v == 0.0), "pose gradient leaked: {pg:?}");
    }
    let dg = grads.get(pred).unwrap();
    assert!(dg.iter().any(|&v| v != 0.0), "disparity gradient vanished");
}
