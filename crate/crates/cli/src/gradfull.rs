//! End-to-end finite-difference check: a complete three-level pyramid
//! network evaluated at 64-bit precision, with analytic gradients compared
//! against central differences for sampled parameter entries and input
//! pixels. Complements the per-op sweep by exercising the composed graph.

use anyhow::{bail, Result};

use pfn_core::arch::{OutputActivation, PfnConfig, PfnModel};
use pfn_core::gradcheck::rel_err;
use pfn_core::rng::{hash_unit, SplitMix64};
use pfn_core::{Graph, Shape, Tensor};

pub struct FullModelReport {
    pub param_entries_checked: usize,
    pub param_entries_skipped: usize,
    pub max_param_err: f64,
    pub input_entries_checked: usize,
    pub input_entries_skipped: usize,
    pub max_input_err: f64,
}

const FD_H: f64 = 1e-5;
const ERR_FLOOR: f64 = 1e-6;

fn check_config() -> PfnConfig {
    PfnConfig {
        scales: 3,
        shared_channels: 2,
        private_channels: 4,
        output_scales: 3,
        output_activation: OutputActivation::Sigmoid,
        ..PfnConfig::base()
    }
}

/// Weighted mean of every prediction scale with fixed pseudorandom weights,
/// so a wrong adjoint cannot cancel symmetrically.
fn forward_loss(model: &PfnModel<f64>, image: &Tensor<f64>) -> f64 {
    let mut g = Graph::<f64>::new();
    let leaf = g.constant(image.clone());
    let built = model.forward(&mut g, leaf).expect("forward");
    let mut acc = None;
    for (si, &p) in built.predictions.iter().enumerate() {
        let s = g.shape(p);
        let w = Tensor::from_fn(s, |n, c, y, x| {
            0.25 + hash_unit(s.idx(n, c, y, x) as u64, si as u64, 31)
        });
        let wk = g.constant(w);
        let prod = g.mul(p, wk).expect("weight");
        let m = g.mean_all(prod);
        acc = Some(match acc {
            None => m,
            Some(a) => g.add(a, m).expect("sum"),
        });
    }
    g.scalar(acc.expect("at least one prediction"))
}

/// Central differences at step h and h/2 with two screens. The slope
/// spread catches kinks sitting right at the point; the step-halving
/// comparison catches kinks anywhere inside the probed interval, where the
/// estimate silently blends two smooth pieces (for a smooth function the
/// two estimates agree to O(h^2), so disagreement marks contamination).
/// A genuinely wrong analytic gradient is not masked: both estimates then
/// agree with each other and jointly contradict it.
fn fd_at(f0: f64, fp: f64, fm: f64, fp2: f64, fm2: f64, h: f64) -> (f64, bool) {
    let fd1 = (fp - fm) / (2.0 * h);
    let fd2 = (fp2 - fm2) / h;
    let fwd = (fp - f0) / h;
    let bwd = (f0 - fm) / h;
    let spread = (fwd - bwd).abs();
    let scale = fwd.abs().max(bwd.abs()).max(1e-8);
    let mut kinked = spread > 0.2 * scale;
    let agree_scale = fd1.abs().max(fd2.abs()).max(1e-8);
    kinked |= (fd1 - fd2).abs() > 0.05 * agree_scale;
    (fd2, kinked)
}

/// Builds the reference model, runs one analytic backward pass, then
/// spot-checks `param_samples` entries of every parameter tensor and
/// `input_samples` input pixels against central differences.
pub fn full_model_fd(param_samples: usize, input_samples: usize) -> Result<FullModelReport> {
    let mut model = PfnModel::<f64>::new(check_config(), 0x6e57).expect("model builds");
    let mut r = SplitMix64::new(0x1ead);
    let image = Tensor::from_fn(Shape::new(1, 3, 16, 16), |_, _, _, _| r.uniform(0.05, 0.95));

    // Move every parameter off the structured init before differencing.
    // Freshly built models put biases at exactly zero, which parks them on
    // the relu kink wherever an upstream feature is dead; the objective is
    // not differentiable there and finite differences half-count the kink
    // (both step sizes agree, so no screen can catch it). A small jig makes
    // the evaluation point generic.
    let mut jig = SplitMix64::new(0x7a3d);
    let entry_counts: Vec<_> = model
        .params()
        .iter()
        .map(|(pid, p)| (pid, p.value.shape.count()))
        .collect();
    for (pid, count) in entry_counts {
        for idx in 0..count {
            model.params_mut().nudge(pid, idx, jig.uniform(-0.05, 0.05));
        }
    }

    // analytic gradients for every parameter and the input image
    let (analytic, input_grad, f0) = {
        let mut g = Graph::<f64>::new();
        let leaf = g.leaf(image.clone(), true);
        let built = model.forward(&mut g, leaf).expect("forward");
        let mut acc = None;
        for (si, &p) in built.predictions.iter().enumerate() {
            let s = g.shape(p);
            let w = Tensor::from_fn(s, |n, c, y, x| {
                0.25 + hash_unit(s.idx(n, c, y, x) as u64, si as u64, 31)
            });
            let wk = g.constant(w);
            let prod = g.mul(p, wk).expect("weight");
            let m = g.mean_all(prod);
            acc = Some(match acc {
                None => m,
                Some(a) => g.add(a, m).expect("sum"),
            });
        }
        let loss = acc.unwrap();
        let f0 = g.scalar(loss);
        let grads = g.backward(loss).map_err(|e| anyhow::anyhow!("{e}"))?;
        let mut per_param = Vec::new();
        for (pid, p) in model.params().iter() {
            let tid = g
                .bound_leaf(model.params(), pid)
                .expect("parameter bound in forward graph");
            let grad = grads
                .get(tid)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; p.value.shape.count()]);
            per_param.push((pid, grad));
        }
        let ig = grads
            .get(leaf)
            .map(|s| s.to_vec())
            .expect("input gradient");
        (per_param, ig, f0)
    };

    let mut report = FullModelReport {
        param_entries_checked: 0,
        param_entries_skipped: 0,
        max_param_err: 0.0,
        input_entries_checked: 0,
        input_entries_skipped: 0,
        max_input_err: 0.0,
    };

    let mut pick = SplitMix64::new(0x91c4);
    for (pid, grad) in &analytic {
        let count = grad.len();
        let take = param_samples.min(count);
        for _ in 0..take {
            let idx = pick.below(count);
            model.params_mut().nudge(*pid, idx, FD_H);
            let fp = forward_loss(&model, &image);
            model.params_mut().nudge(*pid, idx, -2.0 * FD_H);
            let fm = forward_loss(&model, &image);
            model.params_mut().nudge(*pid, idx, 1.5 * FD_H);
            let fp2 = forward_loss(&model, &image);
            model.params_mut().nudge(*pid, idx, -FD_H);
            let fm2 = forward_loss(&model, &image);
            model.params_mut().nudge(*pid, idx, 0.5 * FD_H);
            let (fd, kinked) = fd_at(f0, fp, fm, fp2, fm2, FD_H);
            if kinked {
                report.param_entries_skipped += 1;
                continue;
            }
            let e = rel_err(grad[idx], fd, ERR_FLOOR);
            report.param_entries_checked += 1;
            if e > report.max_param_err {
                report.max_param_err = e;
            }
        }
    }

    let pixel_count = image.shape.count();
    let mut varied = image.data().to_vec();
    for _ in 0..input_samples {
        let idx = pick.below(pixel_count);
        let keep = varied[idx];
        varied[idx] = keep + FD_H;
        let fp = forward_loss(&model, &rebuild(&image, &varied));
        varied[idx] = keep - FD_H;
        let fm = forward_loss(&model, &rebuild(&image, &varied));
        varied[idx] = keep + 0.5 * FD_H;
        let fp2 = forward_loss(&model, &rebuild(&image, &varied));
        varied[idx] = keep - 0.5 * FD_H;
        let fm2 = forward_loss(&model, &rebuild(&image, &varied));
        varied[idx] = keep;
        let (fd, kinked) = fd_at(f0, fp, fm, fp2, fm2, FD_H);
        if kinked {
            report.input_entries_skipped += 1;
            continue;
        }
        let e = rel_err(input_grad[idx], fd, ERR_FLOOR);
        report.input_entries_checked += 1;
        if e > report.max_input_err {
            report.max_input_err = e;
        }
    }

    if report.param_entries_checked == 0 || report.input_entries_checked == 0 {
        bail!("the smoothness screen rejected every sample; check the setup");
    }
    Ok(report)
}

fn rebuild(reference: &Tensor<f64>, values: &[f64]) -> Tensor<f64> {
    Tensor::new(reference.shape, values.to_vec()).expect("same element count")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composed_network_gradients_match_finite_differences() {
        let report = full_model_fd(2, 12).unwrap();
        assert!(
            report.max_param_err < 1e-3,
            "parameter gradient error {}",
            report.max_param_err
        );
        assert!(
            report.max_input_err < 1e-3,
            "input gradient error {}",
            report.max_input_err
        );
        assert!(report.param_entries_checked > 50);
    }
}
