//! AdamW with linear warmup and cosine decay.

use ndarray::ArrayD;

use super::Params;
use crate::scalar::Scalar;

/// Learning-rate schedule: linear warmup to `base_lr`, then cosine decay
/// to `base_lr * min_frac` at `total_steps`.
#[derive(Clone, Copy, Debug)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub min_frac: f64,
}

impl LrSchedule {
    pub fn constant(base_lr: f64) -> Self {
        LrSchedule {
            base_lr,
            warmup_steps: 0,
            total_steps: usize::MAX,
            min_frac: 1.0,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.total_steps == usize::MAX || self.total_steps <= self.warmup_steps {
            return self.base_lr;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let done = ((step - self.warmup_steps) as f64).min(span);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * done / span).cos());
        self.base_lr * (self.min_frac + (1.0 - self.min_frac) * cos)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(schedule: LrSchedule) -> Self {
        AdamWConfig {
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Decoupled-weight-decay Adam. Moment buffers align with the parameter
/// store by index; parameters that received no gradient this step keep
/// their moments and values untouched.
pub struct AdamW<E: Scalar> {
    pub cfg: AdamWConfig,
    m: Vec<ArrayD<E>>,
    v: Vec<ArrayD<E>>,
    t: usize,
}

impl<E: Scalar> AdamW<E> {
    pub fn new(params: &Params<E>, cfg: AdamWConfig) -> Self {
        let m = params
            .iter()
            .map(|(_, p)| ArrayD::zeros(p.raw_dim()))
            .collect();
        let v = params
            .iter()
            .map(|(_, p)| ArrayD::zeros(p.raw_dim()))
            .collect();
        AdamW { cfg, m, v, t: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    /// Apply one update. `grads[i]` must correspond to parameter `i` of
    /// the same store this optimiser was constructed from.
    pub fn step(&mut self, params: &mut Params<E>, grads: &[Option<ArrayD<E>>]) {
        assert_eq!(grads.len(), params.len(), "gradient list misaligned");
        let lr = self.cfg.schedule.at(self.t);
        self.t += 1;
        let b1 = E::from_f64(self.cfg.beta1);
        let b2 = E::from_f64(self.cfg.beta2);
        let one_m_b1 = E::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = E::from_f64(1.0 - self.cfg.beta2);
        let bc1 = E::from_f64(1.0 / (1.0 - self.cfg.beta1.powi(self.t as i32)));
        let bc2 = E::from_f64(1.0 / (1.0 - self.cfg.beta2.powi(self.t as i32)));
        let lr_e = E::from_f64(lr);
        let eps = E::from_f64(self.cfg.eps);
        let wd = E::from_f64(lr * self.cfg.weight_decay);

        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let id = super::ParamId(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(grad).for_each(|m, &g| {
                *m = *m * b1 + g * one_m_b1;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|v, &g| {
                *v = *v * b2 + g * g * one_m_b2;
            });
            let value = params.value_mut(id);
            ndarray::Zip::from(value).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mh = m * bc1;
                let vh = v * bc2;
                *p = *p - lr_e * (mh / (vh.sqrt() + eps)) - wd * *p;
            });
        }
    }
}
