use std::f64::consts::PI;

use crate::error::{NnError, Result};
use crate::float::Float;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Cosine annealing from the base rate to zero over `total` steps.
    Cosine { total: u64 },
}

impl LrSchedule {
    pub fn factor(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine { total } => {
                let p = (step as f64 / total.max(1) as f64).min(1.0);
                0.5 * (1.0 + (PI * p).cos())
            }
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub schedule: LrSchedule,
    step: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Float> AdamW<F> {
    pub fn new(store: &ParamStore<F>, config: AdamWConfig, schedule: LrSchedule) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            schedule,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.lr * self.schedule.factor(self.step)
    }

    /// Applies one update. `grads` is aligned with the store; `None`
    /// entries are skipped (their moments do not advance).
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Option<Tensor<F>>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(NnError::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        let lr = self.current_lr();
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let decay = F::of(1.0 - lr * c.weight_decay);
        let step_size = F::of(lr / bc1);
        let bc2_sqrt = F::of(bc2.sqrt());
        let eps = F::of(c.eps);
        for (i, (p, g)) in store.tensors_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if !g.is_finite() {
                return Err(NnError::NonFinite(format!("gradient of parameter #{i}")));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (F::one() - b1) * gv;
                *vv = b2 * *vv + (F::one() - b2) * gv * gv;
                *w = *w * decay - step_size * *mv / ((*vv).sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }

    /// Optimizer moments, for checkpointing.
    pub fn state(&self) -> (u64, &[Tensor<F>], &[Tensor<F>]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Tensor<F>>, v: Vec<Tensor<F>>) -> Result<()> {
        let same = |a: &[Tensor<F>], b: &[Tensor<F>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.shape() == y.shape())
        };
        if !same(&m, &self.m) || !same(&v, &self.v) {
            return Err(NnError::Shape("optimizer state does not match parameters".into()));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Float>(grads: &mut [Option<Tensor<F>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = F::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine { total: 100 };
        assert_eq!(s.factor(0), 1.0);
        assert!((s.factor(50) - 0.5).abs() < 1e-12);
        assert!(s.factor(100).abs() < 1e-12);
        assert!(s.factor(1000).abs() < 1e-12);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::new([2], vec![3.0, -2.0]).unwrap());
        let cfg = AdamWConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&store, cfg, LrSchedule::Constant);
        for _ in 0..2000 {
            let g = store.get(id).map(|v| 2.0 * (v - 1.0));
            opt.step(&mut store, &[Some(g)]).unwrap();
        }
        for &v in store.get(id).data() {
            assert!((v - 1.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn first_adamw_step_moves_by_lr() {
        // With bias correction the first step is lr * sign(g) (eps aside).
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::new([1], vec![0.0]).unwrap());
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&store, cfg, LrSchedule::Constant);
        opt.step(&mut store, &[Some(Tensor::new([1], vec![4.0]).unwrap())]).unwrap();
        let (_, t) = store.iter().next().unwrap();
        assert!((t.data()[0] + 0.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(Tensor::<f64>::new([2], vec![3.0, 4.0]).unwrap())];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let d = g[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
    }
}
