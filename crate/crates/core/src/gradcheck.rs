//! Central finite-difference oracle.
//!
//! This module deliberately knows nothing about how backward passes are
//! implemented: it only perturbs scalars and re-evaluates a closure. Tests
//! and the CLI `gradcheck` subcommand compare analytic gradients against it.
//!
//! Non-smooth points (relu kinks, clamp edges, min ties) make one-sided
//! difference quotients disagree; such elements are skipped and counted
//! instead of producing false alarms.

use alloc::string::String;
use alloc::vec::Vec;

use crate::optim::{ParamId, ParamSet};
use crate::real::Real;

/// Result of comparing one analytic gradient block against finite
/// differences.
#[derive(Debug, Clone)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub skipped_nonsmooth: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst element, if any was checked.
    pub worst_index: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub blocks: Vec<BlockReport>,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().fold(0.0, |m, b| m.max(b.max_rel_err))
    }

    pub fn checked(&self) -> usize {
        self.blocks.iter().map(|b| b.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.blocks.iter().map(|b| b.skipped_nonsmooth).sum()
    }
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / denom
}

/// Central-difference derivative of `eval` with respect to one element,
/// together with a non-smoothness verdict. `eval` must be a pure function of
/// the current parameter values.
fn central_diff<T: Real>(
    set: &mut ParamSet<T>,
    id: ParamId,
    index: usize,
    h: f64,
    f0: f64,
    eval: &mut dyn FnMut(&ParamSet<T>) -> f64,
) -> (f64, bool) {
    let ht = T::of(h);
    set.nudge(id, index, ht);
    let fp = eval(set);
    set.nudge(id, index, -(ht + ht));
    let fm = eval(set);
    set.nudge(id, index, ht);

    let central = (fp - fm) / (2.0 * h);
    let fwd = (fp - f0) / h;
    let bwd = (f0 - fm) / h;
    // A kink between x-h and x+h makes the one-sided quotients split.
    let spread = (fwd - bwd).abs();
    let scale = fwd.abs().max(bwd.abs()).max(1e-8);
    let nonsmooth = spread > 0.2 * scale;
    (central, nonsmooth)
}

/// Checks one parameter's analytic gradient (`analytic`, same layout as the
/// parameter values) against central differences of `eval`.
pub fn check_param_block<T: Real>(
    set: &mut ParamSet<T>,
    id: ParamId,
    analytic: &[T],
    h: f64,
    floor: f64,
    eval: &mut dyn FnMut(&ParamSet<T>) -> f64,
) -> BlockReport {
    let name = set.get(id).name.clone();
    let f0 = eval(set);
    let mut rep = BlockReport {
        name,
        checked: 0,
        skipped_nonsmooth: 0,
        max_rel_err: 0.0,
        worst_index: None,
    };
    for i in 0..analytic.len() {
        let (fd, nonsmooth) = central_diff(set, id, i, h, f0, eval);
        if nonsmooth {
            rep.skipped_nonsmooth += 1;
            continue;
        }
        let e = rel_err(analytic[i].as_f64(), fd, floor);
        rep.checked += 1;
        if e > rep.max_rel_err {
            rep.max_rel_err = e;
            rep.worst_index = Some(i);
        }
    }
    rep
}

/// Checks every parameter in the registry. `analytic_for` supplies the
/// analytic gradient for each parameter (typically read from a backward
/// pass done by the caller beforehand).
pub fn check_all_params<T: Real>(
    set: &mut ParamSet<T>,
    analytic_for: &dyn Fn(ParamId) -> Vec<T>,
    h: f64,
    floor: f64,
    eval: &mut dyn FnMut(&ParamSet<T>) -> f64,
) -> FdReport {
    let ids: Vec<ParamId> = set.iter().map(|(id, _)| id).collect();
    let mut report = FdReport::default();
    for id in ids {
        let analytic = analytic_for(id);
        report
            .blocks
            .push(check_param_block(set, id, &analytic, h, floor, eval));
    }
    report
}

/// Finite-difference gradient of `eval` with respect to a free vector (not a
/// registry parameter): used for per-op checks on inputs like grids, depth
/// maps or poses. Returns (gradient, nonsmooth mask).
pub fn fd_vector(
    x: &mut [f64],
    h: f64,
    eval: &mut dyn FnMut(&[f64]) -> f64,
) -> (Vec<f64>, Vec<bool>) {
    let f0 = eval(x);
    let mut grad = Vec::with_capacity(x.len());
    let mut mask = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let keep = x[i];
        x[i] = keep + h;
        let fp = eval(x);
        x[i] = keep - h;
        let fm = eval(x);
        x[i] = keep;
        grad.push((fp - fm) / (2.0 * h));
        let fwd = (fp - f0) / h;
        let bwd = (f0 - fm) / h;
        let spread = (fwd - bwd).abs();
        let scale = fwd.abs().max(bwd.abs()).max(1e-8);
        mask.push(spread > 0.2 * scale);
    }
    (grad, mask)
}

/// Per-op finite-difference sweep. Each differentiable op is exercised on
/// small random tensors chosen away from its non-smooth points, comparing
/// the backward pass against central differences of a randomly weighted
/// scalarization of the output.
pub mod ops {
    use alloc::boxed::Box;
    use alloc::vec::Vec;

    use super::{fd_vector, rel_err};
    use crate::engine::{Graph, TensorId};
    use crate::rng::{hash_unit, SplitMix64};
    use crate::tensor::{Shape, Tensor};

    #[derive(Debug, Clone)]
    pub struct OpReport {
        pub op: &'static str,
        pub input: usize,
        pub checked: usize,
        pub skipped_nonsmooth: usize,
        pub max_rel_err: f64,
    }

    fn rand_tensor(shape: Shape, lo: f64, hi: f64, salt: u64) -> Tensor<f64> {
        let mut r = SplitMix64::fork(0x0b5e55ed, salt);
        Tensor::from_fn(shape, |_, _, _, _| r.uniform(lo, hi))
    }

    /// Weighted mean with fixed pseudorandom positive weights: symmetric
    /// cancellation in a wrong adjoint cannot hide from it.
    fn scalarize(g: &mut Graph<f64>, y: TensorId) -> TensorId {
        let s = g.shape(y);
        let w = Tensor::from_fn(s, |n, c, yy, xx| {
            let i = s.idx(n, c, yy, xx) as u64;
            0.25 + hash_unit(i, 77, 13)
        });
        let wl = g.constant(w);
        let prod = g.mul(y, wl).expect("scalarize mul");
        g.sum_all(prod)
    }

    type Build = Box<dyn Fn(&mut Graph<f64>, &[TensorId]) -> TensorId>;

    fn run_case(op: &'static str, inputs: &[Tensor<f64>], build: &Build, out: &mut Vec<OpReport>) {
        // analytic gradients for every input at once
        let mut g = Graph::new();
        let ids: Vec<TensorId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let y = build(&mut g, &ids);
        let loss = scalarize(&mut g, y);
        let grads = g.backward(loss).expect("backward");

        for (k, input) in inputs.iter().enumerate() {
            let analytic: Vec<f64> = grads
                .get(ids[k])
                .map(|s| s.to_vec())
                .unwrap_or_else(|| alloc::vec![0.0; input.shape.count()]);
            let mut flat: Vec<f64> = input.data().to_vec();
            let shape = input.shape;
            let others: Vec<Tensor<f64>> = inputs.to_vec();
            let mut eval = |vals: &[f64]| {
                let mut g = Graph::new();
                let mut ids = Vec::with_capacity(others.len());
                for (j, t) in others.iter().enumerate() {
                    if j == k {
                        let t = Tensor::new(shape, vals.to_vec()).expect("shape");
                        ids.push(g.leaf(t, false));
                    } else {
                        ids.push(g.leaf(t.clone(), false));
                    }
                }
                let y = build(&mut g, &ids);
                let loss = scalarize(&mut g, y);
                g.scalar(loss)
            };
            let (fd, nonsmooth) = fd_vector(&mut flat, 1e-6, &mut eval);
            let mut rep = OpReport {
                op,
                input: k,
                checked: 0,
                skipped_nonsmooth: 0,
                max_rel_err: 0.0,
            };
            for i in 0..fd.len() {
                if nonsmooth[i] {
                    rep.skipped_nonsmooth += 1;
                    continue;
                }
                rep.checked += 1;
                let e = rel_err(analytic[i], fd[i], 1e-6);
                if e > rep.max_rel_err {
                    rep.max_rel_err = e;
                }
            }
            out.push(rep);
        }
    }

    /// Runs the whole sweep. Covers every differentiable op the graph
    /// exposes; each entry is one (op, input) pair.
    pub fn op_suite() -> Vec<OpReport> {
        let mut out = Vec::new();
        let mut case = |op: &'static str, inputs: Vec<Tensor<f64>>, build: Build| {
            run_case(op, &inputs, &build, &mut out);
        };

        let x44 = || rand_tensor(Shape::new(2, 3, 4, 4), -1.0, 1.0, 1);
        let pos44 = || rand_tensor(Shape::new(2, 3, 4, 4), 0.5, 2.0, 2);

        case(
            "conv2d_same",
            alloc::vec![
                rand_tensor(Shape::new(2, 3, 4, 4), -1.0, 1.0, 3),
                rand_tensor(Shape::new(2, 3, 3, 3), -0.5, 0.5, 4),
                rand_tensor(Shape::new(2, 1, 1, 1), -0.2, 0.2, 5),
            ],
            Box::new(|g, ids| g.conv2d_same(ids[0], ids[1], Some(ids[2])).unwrap()),
        );
        case(
            "conv2d_stride2",
            alloc::vec![
                rand_tensor(Shape::new(1, 2, 6, 6), -1.0, 1.0, 6),
                rand_tensor(Shape::new(3, 2, 3, 3), -0.5, 0.5, 7),
                rand_tensor(Shape::new(3, 1, 1, 1), -0.2, 0.2, 8),
            ],
            Box::new(|g, ids| g.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1).unwrap()),
        );
        case(
            "avg_pool2",
            alloc::vec![x44()],
            Box::new(|g, ids| g.avg_pool2(ids[0]).unwrap()),
        );
        case(
            "bilinear_resample_up",
            alloc::vec![rand_tensor(Shape::new(1, 2, 3, 4), -1.0, 1.0, 9)],
            Box::new(|g, ids| g.bilinear_resample(ids[0], 6, 8).unwrap()),
        );
        case(
            "bilinear_resample_down",
            alloc::vec![rand_tensor(Shape::new(1, 2, 5, 7), -1.0, 1.0, 10)],
            Box::new(|g, ids| g.bilinear_resample(ids[0], 3, 4).unwrap()),
        );
        case(
            "box_filter3",
            alloc::vec![x44()],
            Box::new(|g, ids| g.box_filter(ids[0], 3).unwrap()),
        );
        case(
            "concat_channels",
            alloc::vec![
                rand_tensor(Shape::new(1, 2, 3, 3), -1.0, 1.0, 11),
                rand_tensor(Shape::new(1, 3, 3, 3), -1.0, 1.0, 12),
            ],
            Box::new(|g, ids| g.concat_channels(ids).unwrap()),
        );
        case(
            "slice_channels",
            alloc::vec![x44()],
            Box::new(|g, ids| g.slice_channels(ids[0], 1, 2).unwrap()),
        );
        case(
            "channel_weighted_sum",
            alloc::vec![
                rand_tensor(Shape::new(2, 3, 3, 3), -1.0, 1.0, 13),
                rand_tensor(Shape::new(2, 3, 3, 3), -1.0, 1.0, 14),
                rand_tensor(Shape::new(2, 3, 1, 1), -1.0, 1.0, 15),
            ],
            Box::new(|g, ids| g.channel_weighted_sum(&[ids[0], ids[1]], ids[2]).unwrap()),
        );
        // grid coordinates strictly inside interpolation cells and the frame
        let grid_u = {
            let mut r = SplitMix64::fork(0x0b5e55ed, 16);
            Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, _, _| {
                let cell = 1.0 + r.below(3) as f64;
                cell + r.uniform(0.2, 0.8)
            })
        };
        let grid_v = {
            let mut r = SplitMix64::fork(0x0b5e55ed, 17);
            Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, _, _| {
                let cell = 1.0 + r.below(2) as f64;
                cell + r.uniform(0.2, 0.8)
            })
        };
        case(
            "grid_sample",
            alloc::vec![rand_tensor(Shape::new(1, 2, 5, 6), -1.0, 1.0, 18), grid_u, grid_v],
            Box::new(|g, ids| g.grid_sample(ids[0], ids[1], ids[2]).unwrap()),
        );
        case(
            "diff_x",
            alloc::vec![x44()],
            Box::new(|g, ids| g.diff_x(ids[0]).unwrap()),
        );
        case(
            "diff_y",
            alloc::vec![x44()],
            Box::new(|g, ids| g.diff_y(ids[0]).unwrap()),
        );
        case(
            "add",
            alloc::vec![x44(), rand_tensor(Shape::new(2, 3, 4, 4), -1.0, 1.0, 19)],
            Box::new(|g, ids| g.add(ids[0], ids[1]).unwrap()),
        );
        case(
            "sub",
            alloc::vec![x44(), rand_tensor(Shape::new(2, 3, 4, 4), -1.0, 1.0, 20)],
            Box::new(|g, ids| g.sub(ids[0], ids[1]).unwrap()),
        );
        case(
            "mul",
            alloc::vec![x44(), rand_tensor(Shape::new(2, 3, 4, 4), -1.0, 1.0, 21)],
            Box::new(|g, ids| g.mul(ids[0], ids[1]).unwrap()),
        );
        case(
            "div",
            alloc::vec![x44(), rand_tensor(Shape::new(2, 3, 4, 4), 0.5, 2.0, 22)],
            Box::new(|g, ids| g.div(ids[0], ids[1]).unwrap()),
        );
        case(
            "add_broadcast",
            alloc::vec![x44(), rand_tensor(Shape::new(2, 1, 1, 1), -1.0, 1.0, 23)],
            Box::new(|g, ids| g.add_b(ids[0], ids[1]).unwrap()),
        );
        case(
            "mul_broadcast",
            alloc::vec![x44(), rand_tensor(Shape::new(2, 1, 1, 1), 0.5, 1.5, 24)],
            Box::new(|g, ids| g.mul_b(ids[0], ids[1]).unwrap()),
        );
        // |x| >= 0.2 keeps abs and relu away from their kinks
        let away = || {
            let mut r = SplitMix64::fork(0x0b5e55ed, 25);
            Tensor::from_fn(Shape::new(2, 2, 3, 3), |_, _, _, _| {
                let mag = r.uniform(0.2, 1.0);
                if r.next_f64() < 0.5 {
                    mag
                } else {
                    -mag
                }
            })
        };
        case("abs", alloc::vec![away()], Box::new(|g, ids| g.abs(ids[0])));
        case("relu", alloc::vec![away()], Box::new(|g, ids| g.relu(ids[0])));
        case(
            "sigmoid",
            alloc::vec![x44()],
            Box::new(|g, ids| g.sigmoid(ids[0])),
        );
        // clamp interior plus saturated values, all 0.05 away from the edges
        let clamp_in = {
            let mut r = SplitMix64::fork(0x0b5e55ed, 26);
            Tensor::from_fn(Shape::new(1, 2, 4, 4), |_, _, _, _| match r.below(3) {
                0 => r.uniform(0.05, 0.95),
                1 => r.uniform(-1.0, -0.05),
                _ => r.uniform(1.05, 2.0),
            })
        };
        case(
            "clamp",
            alloc::vec![clamp_in],
            Box::new(|g, ids| g.clamp(ids[0], 0.0, 1.0).unwrap()),
        );
        case(
            "exp_neg",
            alloc::vec![x44()],
            Box::new(|g, ids| g.exp_neg(ids[0])),
        );
        case("sqrt", alloc::vec![pos44()], Box::new(|g, ids| g.sqrt(ids[0])));
        case("sin", alloc::vec![x44()], Box::new(|g, ids| g.sin(ids[0])));
        case("cos", alloc::vec![x44()], Box::new(|g, ids| g.cos(ids[0])));
        case(
            "recip",
            alloc::vec![pos44()],
            Box::new(|g, ids| g.recip(ids[0])),
        );
        case(
            "scale",
            alloc::vec![x44()],
            Box::new(|g, ids| g.scale(ids[0], -1.7)),
        );
        case(
            "add_scalar",
            alloc::vec![x44()],
            Box::new(|g, ids| g.add_scalar(ids[0], 0.3)),
        );
        case(
            "mean_all",
            alloc::vec![x44()],
            Box::new(|g, ids| g.mean_all(ids[0])),
        );
        case(
            "sum_all",
            alloc::vec![x44()],
            Box::new(|g, ids| g.sum_all(ids[0])),
        );
        case(
            "mean_spatial",
            alloc::vec![x44()],
            Box::new(|g, ids| g.mean_spatial(ids[0])),
        );
        case(
            "sum_channels",
            alloc::vec![x44()],
            Box::new(|g, ids| g.sum_channels(ids[0])),
        );
        case(
            "mean_channels",
            alloc::vec![x44()],
            Box::new(|g, ids| g.mean_channels(ids[0])),
        );
        // per-pixel gaps >= 0.2 keep the minimum away from ties
        let min_a = {
            let mut r = SplitMix64::fork(0x0b5e55ed, 27);
            Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, y, x| {
                let base = r.uniform(0.0, 0.4);
                if (y + x) % 2 == 0 {
                    base
                } else {
                    base + 0.5
                }
            })
        };
        let min_b = {
            let mut r = SplitMix64::fork(0x0b5e55ed, 28);
            Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, y, x| {
                let base = r.uniform(0.0, 0.4);
                if (y + x) % 2 == 0 {
                    base + 0.5
                } else {
                    base
                }
            })
        };
        case(
            "min_over_list",
            alloc::vec![min_a, min_b],
            Box::new(|g, ids| g.min_over_list(ids).unwrap()),
        );
        case(
            "softmax_cross_entropy",
            alloc::vec![rand_tensor(Shape::new(1, 4, 3, 3), -1.0, 1.0, 29)],
            Box::new(|g, ids| {
                let targets: Vec<i32> = (0..9).map(|i| if i == 4 { -1 } else { i % 4 }).collect();
                g.softmax_cross_entropy(ids[0], &targets).unwrap()
            }),
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    #[test]
    fn quadratic_fd_matches_derivative() {
        let mut set = ParamSet::<f64>::new();
        let id = set
            .create("x", Tensor::full(Shape::new(1, 1, 1, 1), 3.0))
            .unwrap();
        // f = x^2, f' = 2x = 6
        let rep = check_param_block(&mut set, id, &[6.0], 1e-6, 1e-6, &mut |s| {
            let v = s.get(id).value.data()[0];
            v * v
        });
        assert_eq!(rep.checked, 1);
        assert!(rep.max_rel_err < 1e-9, "{}", rep.max_rel_err);
    }

    #[test]
    fn kink_is_flagged_not_checked() {
        let mut set = ParamSet::<f64>::new();
        let id = set
            .create("x", Tensor::full(Shape::new(1, 1, 1, 1), 0.0))
            .unwrap();
        // |x| has a kink exactly at the evaluation point
        let rep = check_param_block(&mut set, id, &[0.0], 1e-6, 1e-6, &mut |s| {
            s.get(id).value.data()[0].abs()
        });
        assert_eq!(rep.skipped_nonsmooth, 1);
        assert_eq!(rep.checked, 0);
    }

    #[test]
    fn fd_vector_gradients() {
        let mut x = [1.0f64, 2.0];
        // f = x0 * x1^2 -> grad (4, 4)
        let (g, mask) = fd_vector(&mut x, 1e-6, &mut |v| v[0] * v[1] * v[1]);
        assert!(!mask[0] && !mask[1]);
        assert!(rel_err(g[0], 4.0, 1e-9) < 1e-8);
        assert!(rel_err(g[1], 4.0, 1e-9) < 1e-8);
    }

    #[test]
    fn op_suite_is_tight_at_f64() {
        let reports = super::ops::op_suite();
        assert!(reports.len() > 40, "expected full coverage, got {}", reports.len());
        for r in &reports {
            assert!(r.checked > 0, "{} input {} checked nothing", r.op, r.input);
            assert!(
                r.max_rel_err < 1e-4,
                "{} input {}: rel err {} at f64",
                r.op,
                r.input,
                r.max_rel_err
            );
            // skips must stay rare on inputs chosen away from the kinks
            let total = r.checked + r.skipped_nonsmooth;
            assert!(
                r.skipped_nonsmooth * 5 <= total,
                "{} input {}: {} of {} skipped",
                r.op,
                r.input,
                r.skipped_nonsmooth,
                total
            );
        }
    }
}
