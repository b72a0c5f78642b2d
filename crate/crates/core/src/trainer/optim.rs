use ndarray::Array2;

use crate::error::{Error, Result};
use crate::trainer::config::TrainConfig;

/// Linear warmup from `min_lr` to `base_lr` over `warmup_epochs` epochs,
/// then linear decay that reaches `min_lr` at the last step.
pub fn lr_at_step(cfg: &TrainConfig, step: u64, steps_per_epoch: u64) -> f64 {
    let warm = (cfg.warmup_epochs * steps_per_epoch as f64).round() as u64;
    let last = (cfg.epochs as u64 * steps_per_epoch).saturating_sub(1);
    if step < warm {
        return cfg.min_lr + (cfg.base_lr - cfg.min_lr) * step as f64 / warm as f64;
    }
    if last <= warm {
        // No decay phase left.
        return cfg.base_lr;
    }
    if step >= last {
        return cfg.min_lr;
    }
    let frac = (step - warm) as f64 / (last - warm) as f64;
    cfg.base_lr - (cfg.base_lr - cfg.min_lr) * frac
}

/// Global L2 norm over every gradient matrix and scalar.
pub fn global_norm(grads: &[Array2<f64>]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(shapes: &[(usize, usize)], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    /// One update of every `(value, decay)` slot with the matching gradient.
    pub fn step(&mut self, params: &mut [(&mut Array2<f64>, bool)], grads: &[Array2<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, ((value, decay), g)) in params.iter_mut().zip(grads).enumerate() {
            if value.dim() != g.dim() || self.m[i].dim() != g.dim() {
                return Err(Error::Shape(format!("gradient {i} has shape {:?}", g.dim())));
            }
            if *decay && self.weight_decay > 0.0 {
                let f = 1.0 - lr * self.weight_decay;
                value.mapv_inplace(|v| v * f);
            }
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut **value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 10,
            warmup_epochs: 2.0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_examples() {
        let c = cfg();
        let spe = 100;
        assert_eq!(lr_at_step(&c, 0, spe), 1e-6);
        assert_eq!(lr_at_step(&c, 200, spe), 1e-3);
        // Decay runs from step 200 to step 999; 599.5 is its midpoint.
        let a = lr_at_step(&c, 599, spe);
        let b = lr_at_step(&c, 600, spe);
        assert!(((a + b) / 2.0 - (1e-3 + 1e-6) / 2.0).abs() < 1e-12);
        assert!((lr_at_step(&c, 999, spe) - 1e-6).abs() < 1e-18);
        assert_eq!(lr_at_step(&c, 5000, spe), 1e-6);
    }

    #[test]
    fn schedule_is_monotone_in_each_phase() {
        let c = cfg();
        let lrs: Vec<f64> = (0..1000).map(|s| lr_at_step(&c, s, 100)).collect();
        assert!(lrs[..200].windows(2).all(|w| w[0] < w[1]));
        assert!(lrs[200..].windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![array![[3.0, 0.0]], array![[0.0], [4.0]]];
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = vec![array![[0.1]]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][[0, 0]], 0.1);
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        let mut opt = AdamW::new(&[(1, 2)], 0.0);
        let mut w = array![[1.0, 1.0]];
        opt.step(&mut [(&mut w, true)], &[array![[0.5, -2.0]]], 0.1).unwrap();
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn decay_only_touches_flagged_slots() {
        let mut opt = AdamW::new(&[(1, 1), (1, 1)], 0.1);
        let (mut a, mut b) = (array![[2.0]], array![[2.0]]);
        let zero = vec![array![[0.0]], array![[0.0]]];
        opt.step(&mut [(&mut a, true), (&mut b, false)], &zero, 0.5).unwrap();
        assert!((a[[0, 0]] - 2.0 * 0.95).abs() < 1e-12);
        assert_eq!(b[[0, 0]], 2.0);
    }
}
