//! Trainable parameter registry and optimizer steps.
//!
//! Parameters live outside any graph; each training step binds them into a
//! fresh [`crate::Graph`] as leaves, accumulates gradients back here, then
//! applies clipping and Adam in registry order (which is creation order, so
//! updates are reproducible).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // resolves f64 transcendentals when built without std
use num_traits::Float;

use crate::error::Error;
use crate::real::Real;
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(u32);

impl ParamId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
pub struct Parameter<T: Real> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
    pub step_count: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet<T: Real> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, ParamId>,
    uid: u64,
}

/// Distinguishes parameter sets when several bind into one graph (e.g. a
/// model and a pose head trained jointly); a bare ParamId is only unique
/// within its set.
static NEXT_SET_UID: core::sync::atomic::AtomicU64 = core::sync::atomic::AtomicU64::new(1);

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            by_name: BTreeMap::new(),
            uid: NEXT_SET_UID.fetch_add(1, core::sync::atomic::Ordering::Relaxed),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn create(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name {name:?}")));
        }
        let count = value.shape.count();
        let id = ParamId(self.params.len() as u32);
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad: None,
            adam_m: vec![T::zero(); count],
            adam_v: vec![T::zero(); count],
            step_count: 0,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.index()]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Iterates in creation order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i as u32), p))
    }

    /// Total scalar count across all parameters.
    pub fn value_count(&self) -> usize {
        self.params.iter().map(|p| p.value.shape.count()).sum()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &[T]) {
        let p = &mut self.params[id.index()];
        debug_assert_eq!(g.len(), p.value.shape.count());
        match &mut p.grad {
            Some(buf) => {
                for (b, &x) in buf.iter_mut().zip(g.iter()) {
                    *b = *b + x;
                }
            }
            None => p.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Replaces a parameter's values, e.g. when loading a checkpoint.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.index()];
        if value.shape != p.value.shape {
            return Err(Error::shape(
                "set_value",
                format!(
                    "parameter {:?} has shape {}, got {}",
                    p.name, p.value.shape, value.shape
                ),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn set_adam_state(
        &mut self,
        id: ParamId,
        m: Vec<T>,
        v: Vec<T>,
        step_count: u64,
    ) -> Result<()> {
        let p = &mut self.params[id.index()];
        let count = p.value.shape.count();
        if m.len() != count || v.len() != count {
            return Err(Error::shape(
                "set_adam_state",
                format!("moment buffers must hold {count} values"),
            ));
        }
        p.adam_m = m;
        p.adam_v = v;
        p.step_count = step_count;
        Ok(())
    }

    /// Perturbs one scalar in place; used by finite-difference checking.
    pub fn nudge(&mut self, id: ParamId, index: usize, delta: T) {
        let p = &mut self.params[id.index()];
        let data = p.value.data_mut();
        data[index] = data[index] + delta;
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm. The norm is accumulated in f64 so the result
/// does not depend on parameter ordering subtleties at low precision.
pub fn clip_global_grad_norm<T: Real>(set: &mut ParamSet<T>, max_norm: T) -> T {
    let mut acc = 0.0f64;
    for p in &set.params {
        if let Some(g) = &p.grad {
            for &v in g {
                let x = v.as_f64();
                acc += x * x;
            }
        }
    }
    let norm = acc.sqrt();
    let norm_t = T::of(norm);
    if norm > max_norm.as_f64() && norm > 0.0 {
        let scale = max_norm / norm_t;
        for p in &mut set.params {
            if let Some(g) = &mut p.grad {
                for v in g.iter_mut() {
                    *v = *v * scale;
                }
            }
        }
    }
    norm_t
}

/// L2 norm over the gradients of several parameter sets taken together,
/// accumulated in f64. Sets trained jointly (e.g. a model plus a pose head)
/// must be clipped against this combined norm, not per set.
pub fn joint_grad_norm<T: Real>(sets: &[&ParamSet<T>]) -> f64 {
    let mut acc = 0.0f64;
    for set in sets {
        for (_, p) in set.iter() {
            if let Some(g) = &p.grad {
                for &v in g {
                    let x = v.as_f64();
                    acc += x * x;
                }
            }
        }
    }
    acc.sqrt()
}

/// Multiplies every gradient in the set by `factor`. Combined with
/// [`joint_grad_norm`] this implements global clipping across sets.
pub fn scale_grads<T: Real>(set: &mut ParamSet<T>, factor: T) {
    for p in &mut set.params {
        if let Some(g) = &mut p.grad {
            for v in g.iter_mut() {
                *v = *v * factor;
            }
        }
    }
}

/// One Adam update with bias correction for every parameter that has a
/// gradient. Parameters without gradients are untouched and their step
/// counters do not advance.
pub fn adam_step<T: Real>(set: &mut ParamSet<T>, lr: T, beta1: T, beta2: T, eps: T) {
    let one = T::one();
    for p in &mut set.params {
        let Some(g) = &p.grad else { continue };
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = one - beta1.powi(t);
        let bc2 = one - beta2.powi(t);
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let gi = g[i];
            p.adam_m[i] = beta1 * p.adam_m[i] + (one - beta1) * gi;
            p.adam_v[i] = beta2 * p.adam_v[i] + (one - beta2) * gi * gi;
            let m_hat = p.adam_m[i] / bc1;
            let v_hat = p.adam_v[i] / bc2;
            values[i] = values[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn scalar_param(set: &mut ParamSet<f64>, name: &str, v: f64) -> ParamId {
        set.create(name, Tensor::full(Shape::new(1, 1, 1, 1), v))
            .unwrap()
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut set = ParamSet::<f64>::new();
        scalar_param(&mut set, "w", 0.0);
        assert!(set
            .create("w", Tensor::zeros(Shape::new(1, 1, 1, 1)))
            .is_err());
    }

    #[test]
    fn adam_two_steps_match_recurrence() {
        // Hand-evaluated closed form: constant gradient 0.5, lr 0.1.
        let (b1, b2, eps, lr, g) = (0.9f64, 0.999, 1e-8, 0.1, 0.5);
        let mut set = ParamSet::<f64>::new();
        let id = scalar_param(&mut set, "w", 1.0);

        let mut m = 0.0;
        let mut v = 0.0;
        let mut x = 1.0;
        for t in 1..=2u32 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            x -= lr * mh / (vh.sqrt() + eps);
        }

        for _ in 0..2 {
            set.zero_grad();
            set.accumulate_grad(id, &[g]);
            adam_step(&mut set, lr, b1, b2, eps);
        }
        let got = set.get(id).value.data()[0];
        assert!((got - x).abs() < 1e-15, "{got} vs {x}");
        assert_eq!(set.get(id).step_count, 2);
    }

    #[test]
    fn first_adam_step_is_lr_sized() {
        // With bias correction the first update is close to lr * sign(g).
        let mut set = ParamSet::<f64>::new();
        let id = scalar_param(&mut set, "w", 0.0);
        set.accumulate_grad(id, &[0.5]);
        adam_step(&mut set, 0.01, 0.9, 0.999, 1e-8);
        let got = set.get(id).value.data()[0];
        assert!((got + 0.01).abs() < 1e-9, "{got}");
    }

    #[test]
    fn clip_rescales_jointly() {
        let mut set = ParamSet::<f64>::new();
        let a = scalar_param(&mut set, "a", 0.0);
        let b = scalar_param(&mut set, "b", 0.0);
        set.accumulate_grad(a, &[3.0]);
        set.accumulate_grad(b, &[4.0]);
        let norm = clip_global_grad_norm(&mut set, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert!((set.get(a).grad.as_ref().unwrap()[0] - 0.6).abs() < 1e-12);
        assert!((set.get(b).grad.as_ref().unwrap()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clip_below_threshold_is_identity() {
        let mut set = ParamSet::<f64>::new();
        let a = scalar_param(&mut set, "a", 0.0);
        set.accumulate_grad(a, &[0.3]);
        let norm = clip_global_grad_norm(&mut set, 1.0);
        assert!((norm - 0.3).abs() < 1e-12);
        assert_eq!(set.get(a).grad.as_ref().unwrap()[0], 0.3);
    }

    #[test]
    fn grad_accumulates_until_zeroed() {
        let mut set = ParamSet::<f64>::new();
        let a = scalar_param(&mut set, "a", 0.0);
        set.accumulate_grad(a, &[1.0]);
        set.accumulate_grad(a, &[2.0]);
        assert_eq!(set.get(a).grad.as_ref().unwrap()[0], 3.0);
        set.zero_grad();
        assert!(set.get(a).grad.is_none());
    }
}
