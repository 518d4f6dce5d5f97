use std::collections::BTreeMap;
use std::f64::consts::PI;

use super::store::Moments;
use super::{ParameterStore, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Cosine decay from `base_lr` to `min_lr` over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let frac = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (PI * frac).cos())
    }
}

/// One decoupled-weight-decay Adam step over every parameter that has a
/// gradient in `grads`. Parameters without a gradient are left untouched.
pub fn optimizer_step(
    store: &mut ParameterStore,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    weight_decay: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    store.step += 1;
    let t = store.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, grad) in grads {
        let value = store
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
        if value.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer_step",
                left: value.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        let shape = value.shape();
        let mom = store.moments.entry(name.clone()).or_insert_with(|| Moments {
            m: Tensor::zeros(shape[0], shape[1]),
            v: Tensor::zeros(shape[0], shape[1]),
        });
        let mut update = Vec::with_capacity(grad.len());
        for ((m, v), gv) in mom
            .m
            .data_mut()
            .iter_mut()
            .zip(mom.v.data_mut().iter_mut())
            .zip(grad.data())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gv;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gv * gv;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            update.push(mhat / (vhat.sqrt() + cfg.eps));
        }
        let value = store.get_mut(name).expect("checked above");
        for (w, u) in value.data_mut().iter_mut().zip(update) {
            *w -= lr * (u + weight_decay * *w);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    fn quadratic_store(w: &[f64]) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::from_vec(1, w.len(), w.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut s = quadratic_store(&[1.0, -2.0, 3.5]);
        let before = s.get("w").unwrap().clone();
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(1, 3));
        for _ in 0..5 {
            optimizer_step(&mut s, &grads, 1e-3, 0.0, &AdamConfig::default()).unwrap();
        }
        assert_eq!(s.get("w").unwrap(), &before);
    }

    #[test]
    fn one_step_descends_on_square() {
        let mut s = quadratic_store(&[1.0]);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(2.0));
        optimizer_step(&mut s, &grads, 1e-3, 1e-4, &AdamConfig::default()).unwrap();
        assert!(s.get("w").unwrap().item() < 1.0);
    }

    #[test]
    fn convex_quadratic_converges() {
        // f(w) = Σ a_i (w_i - c_i)^2, a in [1, 10].
        let a = [1.0, 4.0, 10.0, 2.5];
        let c = [0.5, -1.0, 2.0, 0.0];
        let mut s = quadratic_store(&[3.0, 3.0, -3.0, 1.0]);
        let loss = |s: &ParameterStore| -> (f64, BTreeMap<String, Tensor>) {
            let mut g = Graph::new();
            let w = g.param(s, "w").unwrap();
            let cv = g.constant(Tensor::from_vec(1, 4, c.to_vec()).unwrap());
            let av = g.constant(Tensor::from_vec(1, 4, a.to_vec()).unwrap());
            let d = g.sub(w, cv).unwrap();
            let d2 = g.mul(d, d).unwrap();
            let wd = g.mul(d2, av).unwrap();
            let l = g.sum(wd);
            g.backward(l);
            (g.value(l).item(), g.param_grads())
        };
        let initial = loss(&s).0;
        let sched = CosineSchedule {
            base_lr: 0.1,
            min_lr: 0.0,
            total_steps: 200,
        };
        for step in 0..200 {
            let (_, grads) = loss(&s);
            optimizer_step(&mut s, &grads, sched.lr(step), 0.0, &AdamConfig::default()).unwrap();
        }
        let fin = loss(&s).0;
        assert!(fin < 1e-3 * initial, "{fin} vs {initial}");
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let s = CosineSchedule {
            base_lr: 1e-3,
            min_lr: 0.0,
            total_steps: 100,
        };
        assert_eq!(s.lr(0), 1e-3);
        assert!((s.lr(50) - 5e-4).abs() < 1e-15);
        assert!(s.lr(100).abs() < 1e-18);
    }
}
