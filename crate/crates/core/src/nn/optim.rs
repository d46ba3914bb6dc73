//! AdamW with global-norm gradient clipping, and the warmup + cosine
//! learning-rate schedule.

use crate::error::Result;
use crate::nn::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct AdamW<S> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(store: &ParamStore<S>, beta1: f64, beta2: f64) -> Self {
        let m = store
            .ids()
            .map(|id| Tensor::zeros(store.value(id).shape()))
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamW {
            m,
            v,
            step: 0,
            beta1,
            beta2,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Clips the global gradient norm to `grad_clip` (when finite), then
    /// applies one bias-corrected decoupled-weight-decay update.
    pub fn step(
        &mut self,
        store: &mut ParamStore<S>,
        lr: f64,
        weight_decay: f64,
        grad_clip: Option<f64>,
    ) -> Result<()> {
        if let Some(clip) = grad_clip {
            let norm = store.grad_global_norm();
            if norm > clip && norm > 0.0 {
                store.scale_grads(clip / norm);
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let omb1 = S::from_f64(1.0 - self.beta1);
        let omb2 = S::from_f64(1.0 - self.beta2);
        let lr_s = S::from_f64(lr);
        let eps = S::from_f64(ADAM_EPS);
        let decay_factor = S::from_f64(1.0 - lr * weight_decay);
        let inv_bc1 = S::from_f64(1.0 / bc1);
        let inv_bc2 = S::from_f64(1.0 / bc2);

        for id in store.ids().collect::<Vec<_>>() {
            let grad = store.grad(id).clone();
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let value = store.value_mut(id);
            for i in 0..grad.numel() {
                let g = grad.data()[i];
                let mi = b1 * m.data()[i] + omb1 * g;
                let vi = b2 * v.data()[i] + omb2 * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi * inv_bc1;
                let vhat = vi * inv_bc2;
                let p = value.data()[i];
                value.data_mut()[i] = p * decay_factor - lr_s * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear ramp 0 -> base_lr over `warmup_frac * total_steps`, then half-cosine
/// decay to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_frac: f64) -> f64 {
    assert!(step <= total_steps, "step {step} > total {total_steps}");
    if total_steps == 0 {
        return 0.0;
    }
    let warmup = warmup_frac * total_steps as f64;
    let s = step as f64;
    if warmup > 0.0 && s < warmup {
        return base_lr * s / warmup;
    }
    let denom = (total_steps as f64 - warmup).max(1e-12);
    let progress = (s - warmup) / denom;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(value: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.register("p", Tensor::from_vec(&[1], vec![value]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn zero_grad_no_decay_is_fixed_point() {
        let mut store = scalar_store(1.25);
        let mut opt = AdamW::new(&store, 0.9, 0.999);
        opt.step(&mut store, 0.1, 0.0, Some(1.0)).unwrap();
        assert_eq!(store.value(crate::nn::params::ParamId(0)).data()[0], 1.25);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // Hand-evaluated Adam recurrences: after one step with g=1,
        // mhat = 1, vhat = 1, so the update is lr / (1 + eps) ~ lr.
        let mut store = scalar_store(0.0);
        let id = crate::nn::params::ParamId(0);
        store.accumulate_grad(id, &Tensor::from_vec(&[1], vec![1.0]).unwrap());
        let mut opt = AdamW::new(&store, 0.9, 0.999);
        opt.step(&mut store, 0.1, 0.0, None).unwrap();
        let got = store.value(id).data()[0];
        assert!((got + 0.1).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn global_norm_clip_scales_gradients() {
        let mut store = ParamStore::<f32>::new();
        let a = store
            .register("a", Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap())
            .unwrap();
        let b = store
            .register("b", Tensor::from_vec(&[1], vec![0.0]).unwrap())
            .unwrap();
        store.accumulate_grad(a, &Tensor::from_vec(&[2], vec![6.0, 8.0]).unwrap());
        store.accumulate_grad(b, &Tensor::from_vec(&[1], vec![0.0]).unwrap());
        // norm = 10, clip at 1 -> gradients scaled by 0.1
        let norm = store.grad_global_norm();
        assert!((norm - 10.0).abs() < 1e-6);
        let mut opt = AdamW::new(&store, 0.9, 0.999);
        opt.step(&mut store, 0.0, 0.0, Some(1.0)).unwrap();
        assert!((store.grad(a).data()[0] - 0.6).abs() < 1e-6);
        assert!((store.grad(a).data()[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut store = scalar_store(2.0);
        let mut opt = AdamW::new(&store, 0.9, 0.999);
        // zero gradient: only the decay term acts, p *= (1 - lr*wd)
        opt.step(&mut store, 0.1, 0.5, None).unwrap();
        let got = store.value(crate::nn::params::ParamId(0)).data()[0];
        assert!((got - 2.0 * (1.0 - 0.05)).abs() < 1e-6);
    }

    #[test]
    fn cosine_lr_endpoints() {
        let total = 1000;
        assert_eq!(cosine_lr(0, total, 3e-4, 0.05), 0.0);
        let warmup_end = 50;
        assert!((cosine_lr(warmup_end, total, 3e-4, 0.05) - 3e-4).abs() < 1e-18);
        assert!(cosine_lr(total, total, 3e-4, 0.05).abs() < 1e-12);
        // monotone ramp then decay
        assert!(cosine_lr(25, total, 3e-4, 0.05) < cosine_lr(50, total, 3e-4, 0.05));
        assert!(cosine_lr(500, total, 3e-4, 0.05) > cosine_lr(900, total, 3e-4, 0.05));
    }
}
