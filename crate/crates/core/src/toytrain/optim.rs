//! SGD with momentum and weight decay, and a warmup plus plateau-decay
//! learning-rate schedule.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub warmup_start: f64,
    pub peak: f64,
    pub warmup_steps: usize,
    pub decay_factor: f64,
    pub min_lr: f64,
    /// Steps without improvement of the windowed mean loss before decaying.
    pub patience: usize,
    /// Window length for the mean loss the plateau test looks at.
    pub window: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            warmup_start: 1e-4,
            peak: 2e-3,
            warmup_steps: 200,
            decay_factor: 0.1,
            min_lr: 1e-4,
            patience: 400,
            window: 100,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.warmup_start > 0.0
            && self.min_lr > 0.0
            && self.min_lr <= self.peak
            && self.warmup_start <= self.peak
            && self.decay_factor > 0.0
            && self.decay_factor < 1.0
            && self.window > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid learning-rate schedule {self:?}")))
        }
    }
}

/// Linear warmup to the peak, then multiplicative decay on loss plateaus.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub cfg: ScheduleConfig,
    step: usize,
    post_warmup_lr: f64,
    recent: Vec<f64>,
    best_mean: f64,
    since_best: usize,
}

impl LrSchedule {
    pub fn new(cfg: ScheduleConfig) -> Self {
        Self {
            cfg,
            step: 0,
            post_warmup_lr: cfg.peak,
            recent: Vec::new(),
            best_mean: f64::INFINITY,
            since_best: 0,
        }
    }

    /// Learning rate for the current step.
    pub fn lr(&self) -> f64 {
        self.lr_at(self.step)
    }

    fn lr_at(&self, step: usize) -> f64 {
        let c = &self.cfg;
        if step < c.warmup_steps {
            c.warmup_start + (c.peak - c.warmup_start) * step as f64 / c.warmup_steps as f64
        } else {
            self.post_warmup_lr
        }
    }

    /// Warmup-only learning rate at `step`, ignoring plateau decay.
    pub fn warmup_lr(cfg: &ScheduleConfig, step: usize) -> f64 {
        Self::new(*cfg).lr_at(step)
    }

    /// Record the loss of the step just taken and advance.
    pub fn observe(&mut self, loss: f64) {
        self.step += 1;
        if self.step <= self.cfg.warmup_steps {
            return;
        }
        self.recent.push(loss);
        if self.recent.len() > self.cfg.window {
            self.recent.remove(0);
        }
        if self.recent.len() < self.cfg.window {
            return;
        }
        let mean = self.recent.iter().sum::<f64>() / self.recent.len() as f64;
        if mean < self.best_mean {
            self.best_mean = mean;
            self.since_best = 0;
        } else {
            self.since_best += 1;
            if self.since_best >= self.cfg.patience && self.post_warmup_lr > self.cfg.min_lr {
                self.post_warmup_lr = (self.post_warmup_lr * self.cfg.decay_factor).max(self.cfg.min_lr);
                self.since_best = 0;
                self.best_mean = mean;
            }
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { momentum: 0.9, weight_decay: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub cfg: SgdConfig,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig, num_params: usize) -> Self {
        Self { cfg, velocity: vec![None; num_params] }
    }

    /// `v <- mu v + (g + wd w)`, `w <- w - lr v` for every parameter with a
    /// gradient. A non-finite gradient aborts the whole step untouched.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<&Tensor>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len(), self.velocity.len()],
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::ShapeMismatch { op: "sgd_step", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
                }
                if !g.is_finite() {
                    return Err(Error::NonFiniteGradient(format!("#{i}")));
                }
            }
        }
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            let v = v.get_or_insert_with(|| vec![0.0; p.len()]);
            for ((w, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vv = mu * *vv + (gv + wd * *w);
                *w -= lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_keeps_params() {
        let mut sgd = Sgd::new(SgdConfig { momentum: 0.9, weight_decay: 0.0 }, 1);
        let mut p = vec![Tensor::full(&[3], 0.7)];
        let g = Tensor::zeros(&[3]);
        sgd.step(&mut p, &[Some(&g)], 0.1).unwrap();
        assert_eq!(p[0].data(), &[0.7, 0.7, 0.7]);
    }

    #[test]
    fn single_scalar_update() {
        let mut sgd = Sgd::new(SgdConfig { momentum: 0.9, weight_decay: 0.0 }, 1);
        let mut p = vec![Tensor::full(&[1], 1.0)];
        let g = Tensor::full(&[1], 1.0);
        sgd.step(&mut p, &[Some(&g)], 0.1).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut sgd = Sgd::new(SgdConfig::default(), 2);
        let mut p = vec![Tensor::full(&[1], 1.0), Tensor::full(&[1], 2.0)];
        let (g0, g1) = (Tensor::full(&[1], 1.0), Tensor::full(&[1], f64::NAN));
        assert!(matches!(sgd.step(&mut p, &[Some(&g0), Some(&g1)], 0.1), Err(Error::NonFiniteGradient(_))));
        assert_eq!(p[0].data(), &[1.0]);
    }

    #[test]
    fn warmup_is_linear() {
        let cfg = ScheduleConfig::default();
        assert_eq!(LrSchedule::warmup_lr(&cfg, 0), 1e-4);
        assert!((LrSchedule::warmup_lr(&cfg, cfg.warmup_steps) - cfg.peak).abs() < 1e-15);
        let mid = LrSchedule::warmup_lr(&cfg, cfg.warmup_steps / 2);
        assert!((mid - 0.5 * (1e-4 + cfg.peak)).abs() < 1e-15);
    }

    #[test]
    fn plateau_decays_and_respects_floor() {
        let cfg = ScheduleConfig { warmup_steps: 0, patience: 5, window: 1, peak: 1e-2, ..Default::default() };
        let mut s = LrSchedule::new(cfg);
        for _ in 0..200 {
            s.observe(1.0);
            assert!(s.lr() >= cfg.min_lr && s.lr() <= cfg.peak);
        }
        assert_eq!(s.lr(), cfg.min_lr);
    }
}
