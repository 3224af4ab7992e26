//! LARS with momentum, weight decay and a warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::Param;
use crate::scalar::{self, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LarsConfig {
    pub base_lr: f64,
    /// Peak rate is `base_lr * batch / reference_batch`.
    pub reference_batch: usize,
    pub weight_decay: f64,
    pub trust_coefficient: f64,
    pub momentum: f64,
    pub warmup_epochs: usize,
}

impl Default for LarsConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.3,
            reference_batch: 256,
            weight_decay: 1e-6,
            trust_coefficient: 1e-3,
            momentum: 0.9,
            warmup_epochs: 5,
        }
    }
}

impl LarsConfig {
    pub fn validate(&self, total_epochs: usize) -> Result<()> {
        for (name, v) in [
            ("base_lr", self.base_lr),
            ("weight_decay", self.weight_decay),
            ("trust_coefficient", self.trust_coefficient),
            ("momentum", self.momentum),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Spec(format!(
                    "{name} must be a non-negative number, got {v}"
                )));
            }
        }
        if self.reference_batch == 0 {
            return Err(Error::Spec("reference_batch must be positive".into()));
        }
        if self.warmup_epochs > total_epochs {
            return Err(Error::Spec(format!(
                "warmup_epochs {} exceeds total epochs {total_epochs}",
                self.warmup_epochs
            )));
        }
        Ok(())
    }

    pub fn peak_lr(&self, batch: usize) -> f64 {
        self.base_lr * batch as f64 / self.reference_batch as f64
    }
}

/// Linear warmup to `peak`, then cosine decay reaching zero at the last
/// step `total_steps - 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(
        config: &LarsConfig,
        batch: usize,
        steps_per_epoch: u64,
        total_epochs: usize,
    ) -> Self {
        Self {
            peak: config.peak_lr(batch),
            warmup_steps: config.warmup_epochs as u64 * steps_per_epoch,
            total_steps: total_epochs as u64 * steps_per_epoch,
        }
    }

    pub fn at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let last = self.total_steps.saturating_sub(1);
        if step >= last {
            return 0.0;
        }
        let span = (last - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Rate at `step` for a run of `total_epochs` at batch size `batch`.
pub fn lr_at(
    step: u64,
    steps_per_epoch: u64,
    batch: usize,
    total_epochs: usize,
    config: &LarsConfig,
) -> f64 {
    LrSchedule::new(config, batch, steps_per_epoch, total_epochs).at(step)
}

/// Layer-wise trust ratio `eta * |w| / (|g| + 1e-9)`, or 1 when either
/// norm vanishes.
pub fn trust_ratio(w_norm: f64, g_norm: f64, eta: f64) -> f64 {
    if w_norm > 0.0 && g_norm > 0.0 {
        eta * w_norm / (g_norm + 1e-9)
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lars<S> {
    config: LarsConfig,
    buffers: Vec<Vec<S>>,
}

impl<S: Scalar> Lars<S> {
    /// One zeroed momentum buffer per parameter, in order.
    pub fn new<'a>(config: LarsConfig, params: impl IntoIterator<Item = &'a Param<S>>) -> Self {
        let buffers = params
            .into_iter()
            .map(|p| vec![S::zero(); p.value.len()])
            .collect();
        Self { config, buffers }
    }

    pub fn config(&self) -> &LarsConfig {
        &self.config
    }

    pub fn buffers(&self) -> &[Vec<S>] {
        &self.buffers
    }

    pub fn restore_buffers(&mut self, buffers: Vec<Vec<S>>) -> Result<()> {
        if buffers.len() != self.buffers.len()
            || buffers
                .iter()
                .zip(&self.buffers)
                .any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Optimizer(
                "momentum buffers do not match the parameter layout".into(),
            ));
        }
        self.buffers = buffers;
        Ok(())
    }

    /// One update of every parameter with its gradient.
    pub fn step(&mut self, params: &mut [&mut Param<S>], grads: &[&[S]], lr: f64) -> Result<()> {
        if params.len() != self.buffers.len() || grads.len() != params.len() {
            return Err(Error::Optimizer(format!(
                "{} params, {} grads, {} buffers",
                params.len(),
                grads.len(),
                self.buffers.len()
            )));
        }
        let c = &self.config;
        let (mu, wd) = (S::lit(c.momentum), S::lit(c.weight_decay));
        for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut self.buffers) {
            if g.len() != p.value.len() || m.len() != p.value.len() {
                return Err(Error::Optimizer(format!(
                    "gradient for {} has {} entries, expected {}",
                    p.name,
                    g.len(),
                    p.value.len()
                )));
            }
            let excluded = p.is_bias() || p.is_batch_norm();
            let g_eff: Vec<S> = if excluded {
                g.to_vec()
            } else {
                g.iter().zip(&p.value).map(|(&g, &w)| g + wd * w).collect()
            };
            let local = if excluded {
                1.0
            } else {
                trust_ratio(
                    scalar::norm(&p.value).as_f64(),
                    scalar::norm(&g_eff).as_f64(),
                    c.trust_coefficient,
                )
            };
            let rate = S::lit(local * lr);
            for ((w, m), g) in p.value.iter_mut().zip(m.iter_mut()).zip(&g_eff) {
                *m = mu * *m + rate * *g;
                *w -= *m;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ParamKind;

    fn param(kind: ParamKind, value: Vec<f64>) -> Param<f64> {
        Param {
            name: "p".into(),
            shape: vec![value.len()],
            value,
            kind,
        }
    }

    fn schedule() -> LrSchedule {
        LrSchedule::new(&LarsConfig::default(), 256, 10, 100)
    }

    #[test]
    fn warmup_boundary_and_end() {
        let s = schedule();
        assert_eq!(s.warmup_steps, 50);
        assert!((s.at(50) - 0.3).abs() < 1e-12);
        assert!((s.at(49) - 0.3 * 49.0 / 50.0).abs() < 1e-12);
        assert_eq!(s.at(0), 0.0);
        assert!(s.at(999).abs() < 1e-12);
        assert_eq!(s.at(5000), 0.0);
    }

    #[test]
    fn decay_midpoint_is_half_peak() {
        let s = LrSchedule {
            peak: 2.0,
            warmup_steps: 10,
            total_steps: 111,
        };
        // decay spans steps 10..=110, midpoint 60
        assert!((s.at(60) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn continuity_at_warmup_boundary() {
        let s = schedule();
        let ramp_end = s.peak * s.warmup_steps as f64 / s.warmup_steps as f64;
        assert!((ramp_end - s.at(s.warmup_steps)).abs() < 1e-12);
        assert!((s.at(s.warmup_steps) - s.at(s.warmup_steps + 1)).abs() < 1e-5);
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let s = schedule();
        for t in 0..999 {
            if t < s.warmup_steps {
                assert!(s.at(t + 1) >= s.at(t));
            } else {
                assert!(s.at(t + 1) <= s.at(t));
            }
        }
    }

    #[test]
    fn trust_ratio_example() {
        let r = trust_ratio(1.0, 2.0, 1e-3);
        assert!((r - 5e-4).abs() < 1e-12);
        assert_eq!(trust_ratio(0.0, 2.0, 1e-3), 1.0);
    }

    #[test]
    fn excluded_plain_sgd_reduction() {
        let config = LarsConfig {
            weight_decay: 0.0,
            momentum: 0.0,
            ..LarsConfig::default()
        };
        let mut p = param(ParamKind::Bias, vec![1.0, -2.0, 0.5]);
        let g = [0.5, 0.25, -1.0];
        let mut opt = Lars::new(config, [&p]);
        opt.step(&mut [&mut p], &[&g], 0.1).unwrap();
        assert_eq!(p.value, vec![1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25, 0.5 + 0.1]);
    }

    #[test]
    fn bias_skips_weight_decay() {
        let config = LarsConfig {
            weight_decay: 1e-6,
            momentum: 0.0,
            ..LarsConfig::default()
        };
        let mut b = param(ParamKind::Bias, vec![3.0, 4.0]);
        let mut bn = param(ParamKind::BatchNormScale, vec![1.0, 1.0]);
        let mut opt = Lars::new(config, [&b, &bn]);
        opt.step(&mut [&mut b, &mut bn], &[&[0.0, 0.0], &[0.0, 0.0]], 0.5)
            .unwrap();
        assert_eq!(b.value, vec![3.0, 4.0]);
        assert_eq!(bn.value, vec![1.0, 1.0]);
    }

    #[test]
    fn zero_gradient_weight_only_decays() {
        let config = LarsConfig {
            weight_decay: 1e-2,
            momentum: 0.9,
            trust_coefficient: 1e-3,
            ..LarsConfig::default()
        };
        let mut w = param(ParamKind::Weight, vec![3.0, 4.0]);
        let mut opt = Lars::new(config, [&w]);
        opt.step(&mut [&mut w], &[&[0.0, 0.0]], 1.0).unwrap();
        // g' = wd * w, trust = eta / wd, update = eta * lr * w
        let trust = 1e-3 * 5.0 / (1e-2 * 5.0 + 1e-9);
        let expected: Vec<f64> = [3.0, 4.0].iter().map(|&x| x - trust * 1e-2 * x).collect();
        for (a, b) in w.value.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn adapted_update_uses_trust_ratio_and_momentum() {
        let config = LarsConfig {
            weight_decay: 0.0,
            momentum: 0.9,
            trust_coefficient: 1e-3,
            ..LarsConfig::default()
        };
        let mut w = param(ParamKind::Weight, vec![1.0, 0.0]);
        let g = [0.0, 2.0];
        let mut opt = Lars::new(config, [&w]);
        opt.step(&mut [&mut w], &[&g], 1.0).unwrap();
        let local = 1e-3 / (2.0 + 1e-9);
        assert!((w.value[1] + local * 2.0).abs() < 1e-15);
        let m1 = opt.buffers()[0][1];
        opt.step(&mut [&mut w], &[&g], 1.0).unwrap();
        let local2 = 1e-3 * (1.0f64 + m1 * m1).sqrt() / (2.0 + 1e-9);
        assert!((opt.buffers()[0][1] - (0.9 * m1 + local2 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn mismatched_gradient_is_rejected() {
        let mut w = param(ParamKind::Weight, vec![1.0, 0.0]);
        let mut opt = Lars::new(LarsConfig::default(), [&w]);
        assert!(matches!(
            opt.step(&mut [&mut w], &[&[1.0]], 0.1),
            Err(Error::Optimizer(_))
        ));
    }

    #[test]
    fn config_validation() {
        assert!(LarsConfig::default().validate(100).is_ok());
        assert!(LarsConfig::default().validate(3).is_err());
        let bad = LarsConfig {
            momentum: -0.1,
            ..LarsConfig::default()
        };
        assert!(bad.validate(100).is_err());
    }
}
