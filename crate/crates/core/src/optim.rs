//! Adam with an optional warmup schedule and global-norm gradient clipping.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Learning-rate schedule applied on top of the base rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Linear warmup to the base rate over `warmup` steps, then decay by
    /// `sqrt(warmup / step)`.
    InverseSqrt { warmup: u64 },
}

impl Schedule {
    /// Multiplier of the base rate at 1-based `step`.
    pub fn factor(self, step: u64) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::InverseSqrt { warmup } => {
                let (s, w) = (step.max(1) as f64, warmup.max(1) as f64);
                (s / w).min((w / s).sqrt())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub schedule: Schedule,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 0.00625,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            batch_size: 8,
            schedule: Schedule::InverseSqrt { warmup: 400 },
            clip_norm: Some(1.0),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("optim.lr = {} must be positive", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("optim.{name} = {b} outside [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("optim.eps = {} must be positive", self.eps));
        }
        if self.batch_size == 0 {
            return bad("optim.batch_size must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("optim.clip_norm = {c} must be positive"));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr * self.schedule.factor(step)
    }
}

/// Adam moments for every trainable parameter.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: OptimConfig,
    /// Completed updates.
    pub step: u64,
    pub m: Vec<Array2<T>>,
    pub v: Vec<Array2<T>>,
}

/// What one update did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: OptimConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Array2::zeros(p.value.dim())).collect::<Vec<_>>();
        Adam { config, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update with the (already batch-averaged) gradients.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<StepInfo> {
        let grad_norm = grads.global_norm().as_f64();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm at step {}", self.step + 1)));
        }
        let clip = match self.config.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        self.step += 1;
        let lr = self.config.lr_at(self.step);
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (b1t, b2t, eps, clip_t) = (T::lit(b1), T::lit(b2), T::lit(self.config.eps), T::lit(clip));
        let (one, step_size, root_c2) = (T::one(), T::lit(lr / c1), T::lit(c2.sqrt()));
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            ndarray::Zip::from(m).and(v).and(store.get_mut(id)).and(g).for_each(|m, v, w, &g| {
                let g = g * clip_t;
                *m = b1t * *m + (one - b1t) * g;
                *v = b2t * *v + (one - b2t) * g * g;
                *w = *w - step_size * *m / ((*v).sqrt() / root_c2 + eps);
            });
        }
        Ok(StepInfo { lr, grad_norm })
    }

    pub fn moments(&self, id: ParamId) -> (&Array2<T>, &Array2<T>) {
        (&self.m[id.index()], &self.v[id.index()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;
    use ndarray::array;

    #[test]
    fn schedule_peaks_at_warmup() {
        let s = Schedule::InverseSqrt { warmup: 100 };
        assert!((s.factor(1) - 0.01).abs() < 1e-15);
        assert_eq!(s.factor(100), 1.0);
        assert!((s.factor(400) - 0.5).abs() < 1e-15);
        assert_eq!(Schedule::Constant.factor(7), 1.0);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // with bias correction the first step moves each weight by lr * g / (|g| + eps')
        let mut store = ParamStore::<f64>::new(0);
        let w = store.add("w", array![[1.0, -2.0]], true);
        let cfg = OptimConfig { lr: 0.1, schedule: Schedule::Constant, clip_norm: None, ..OptimConfig::default() };
        let mut adam = Adam::new(cfg, &store);
        let mut grads = Gradients::empty(1);
        grads.accumulate(w, &array![[0.5, -4.0]]);
        adam.update(&mut store, &grads).unwrap();
        let got = store.get(w);
        for (x, (x0, g)) in got.iter().zip([(1.0, 0.5f64), (-2.0, -4.0)]) {
            let expect = x0 - 0.1 * g / (g.abs() + 1e-9);
            assert!((x - expect).abs() < 1e-12, "{x} vs {expect}");
        }
    }

    #[test]
    fn clipping_bounds_the_update_norm() {
        let mut store = ParamStore::<f64>::new(0);
        let w = store.add("w", array![[0.0, 0.0]], true);
        let cfg = OptimConfig { clip_norm: Some(1.0), ..OptimConfig::default() };
        let mut adam = Adam::new(cfg, &store);
        let mut grads = Gradients::empty(1);
        grads.accumulate(w, &array![[30.0, 40.0]]);
        let info = adam.update(&mut store, &grads).unwrap();
        assert_eq!(info.grad_norm, 50.0);
        let m = adam.moments(w).0;
        assert!((m[[0, 0]] - 0.1 * 0.6).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new(0);
        let w = store.add("w", array![[3.0, -1.5]], true);
        let cfg = OptimConfig { lr: 0.05, schedule: Schedule::Constant, clip_norm: None, ..OptimConfig::default() };
        let mut adam = Adam::new(cfg, &store);
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&store);
                let x = g.param(w);
                let sq = g.mul(x, x).unwrap();
                let loss = g.sum(sq);
                g.backward(loss).unwrap().into_params()
            };
            adam.update(&mut store, &grads).unwrap();
        }
        assert!(store.get(w).iter().all(|v| v.abs() < 1e-2), "{:?}", store.get(w));
    }

    #[test]
    fn non_finite_gradients_are_refused() {
        let mut store = ParamStore::<f64>::new(0);
        let w = store.add("w", array![[0.0]], true);
        let mut adam = Adam::new(OptimConfig::default(), &store);
        let mut grads = Gradients::empty(1);
        grads.accumulate(w, &array![[f64::NAN]]);
        assert!(matches!(adam.update(&mut store, &grads), Err(Error::NonFinite(_))));
        assert_eq!(store.get(w)[[0, 0]], 0.0);
    }
}
