use super::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// Adam with bias-corrected moments. Moment buffers follow store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update. `grads[i]` belongs to parameter `i`; parameters
    /// without a gradient are left untouched.
    pub fn update(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::usage(
                "optimizer state does not match the parameter store",
            ));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(ParamId(i));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup then inverse-square-root decay:
/// `scale · d^-0.5 · min(step^-0.5, step · warmup^-1.5)` with 1-based steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoamSchedule {
    pub model_dim: usize,
    pub warmup: u64,
    pub scale: f64,
}

impl NoamSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        let s = (step.max(1)) as f64;
        let w = self.warmup.max(1) as f64;
        self.scale * (self.model_dim as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }
}

/// Rescales gradients in place so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, -1.0]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        let g = vec![Some(Tensor::vector(vec![0.5, -2.0]))];
        adam.update(&mut store, &g, 0.1).unwrap();
        let w = store.get(ParamId(0)).data();
        // bias-corrected first step is lr · sign(g) up to eps
        assert!((w[0] - 0.9).abs() < 1e-8);
        assert!((w[1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn noam_peaks_at_warmup() {
        let s = NoamSchedule {
            model_dim: 128,
            warmup: 400,
            scale: 1.0,
        };
        assert!(s.lr(400) > s.lr(399));
        assert!(s.lr(400) > s.lr(401));
        let peak = 128f64.powf(-0.5) * 400f64.powf(-0.5);
        assert!((s.lr(400) - peak).abs() < 1e-15);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Some(Tensor::vector(vec![3.0, 4.0])), None];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let d = g[0].as_ref().unwrap().data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }
}
