//! AdamW with linear warmup and cosine decay.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::autograd::ParamGrads;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    /// Learning rate for the update numbered `step` (0-based).
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = ((step - self.warmup_steps) as f64 / decay as f64).min(1.0);
        0.5 * self.peak_lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<Option<(Array2<f64>, Array2<f64>)>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Adam direction for one tensor, advancing its moment estimates. Call
    /// [`AdamW::begin_step`] once before the tensors of an update.
    pub fn direction(&mut self, slot: usize, grad: &Array2<f64>) -> Array2<f64> {
        if self.moments.len() <= slot {
            self.moments.resize(slot + 1, None);
        }
        let (m, v) = self.moments[slot].get_or_insert_with(|| (Array2::zeros(grad.dim()), Array2::zeros(grad.dim())));
        let (b1, b2) = (self.beta1, self.beta2);
        Zip::from(&mut *m).and(&mut *v).and(grad).for_each(|m, v, &g| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
        });
        let (c1, c2) = {
            let t = self.step as i32;
            (1.0 - b1.powi(t), 1.0 - b2.powi(t))
        };
        let eps = self.eps;
        let mut out = Array2::zeros(grad.dim());
        Zip::from(&mut out)
            .and(&*m)
            .and(&*v)
            .for_each(|o, &m, &v| *o = (m / c1) / ((v / c2).sqrt() + eps));
        out
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// One update of every parameter with a gradient. Slots are parameter indices.
    pub fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) -> Result<()> {
        self.begin_step();
        for (id, g) in &grads.grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    step: self.step,
                    detail: format!("gradient of `{}`", store.entry(*id).name),
                });
            }
            let dir = self.direction(id.index(), g);
            let decay = store.entry(*id).decay;
            let wd = self.weight_decay;
            apply(store, *id, &dir, lr, if decay { wd } else { 0.0 });
        }
        Ok(())
    }
}

fn apply(store: &mut ParamStore, id: ParamId, dir: &Array2<f64>, lr: f64, wd: f64) {
    let p = store.value_mut(id);
    Zip::from(p).and(dir).for_each(|p, &d| {
        *p -= lr * (d + wd * *p);
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn schedule_shape() {
        let s = Schedule {
            peak_lr: 1.0,
            warmup_steps: 10,
            total_steps: 110,
        };
        assert!((s.lr(0) - 0.1).abs() < 1e-12);
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        assert!((s.lr(60) - 0.5).abs() < 1e-12);
        assert!(s.lr(110).abs() < 1e-12);
        assert!(s.lr(500).abs() < 1e-12);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Array2::from_elem((1, 3), 3.0), false);
        let target = Array2::from_elem((1, 3), -1.0);
        let mut opt = AdamW::new(0.0);
        for _ in 0..500 {
            let mut g = Graph::new();
            let xv = g.param(&store, x);
            let loss = g.mse(xv, target.clone());
            let grads = g.backward(loss);
            opt.update(&mut store, &grads, 0.05).unwrap();
        }
        assert!(store.value(x).iter().all(|v| (v + 1.0).abs() < 1e-2));
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut store = ParamStore::new();
        let x = store.add("x", Array2::zeros((1, 1)), false);
        let grads = ParamGrads {
            grads: vec![(x, Array2::from_elem((1, 1), f64::NAN))],
        };
        let err = AdamW::new(0.0).update(&mut store, &grads, 0.1).unwrap_err();
        assert_eq!(err.kind(), crate::ErrorKind::Numerical);
    }
}
