//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        AdamState {
            config,
            m: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect(),
            step: 0,
        }
    }

    /// One update with learning rate `lr` (the schedule lives with the caller).
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &Gradients<T>, lr: f64) -> Result<()> {
        if params.len() != grads.tensors.len() || params.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.tensors.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(&grads.tensors).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape(format!(
                    "adam: tensor {i} param {:?} grad {:?} moment {:?}",
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let lr = T::of(lr);
        let eps = T::of(c.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(&grads.tensors)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for k in 0..p.data.len() {
                let gk = g.data[k];
                let mk = b1 * m.data[k] + (one - b1) * gk;
                let vk = b2 * v.data[k] + (one - b2) * gk * gk;
                m.data[k] = mk;
                v.data[k] = vk;
                let mhat = mk / bc1;
                let vhat = vk / bc2;
                p.data[k] = p.data[k] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Exponential interpolation from `lr` at step 0 to `lr_final` at `total`.
pub fn decayed_lr(lr: f64, lr_final: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return lr;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    lr * (lr_final / lr).powf(frac)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (AdamState<f64>, Vec<Tensor<f64>>) {
        let shapes = [(2, 2), (1, 3)];
        let params = vec![
            Tensor::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.0]),
            Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]),
        ];
        (AdamState::new(AdamConfig::default(), &shapes), params)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let (mut st, mut p) = setup();
        let before = p.clone();
        let g = Gradients::zeros(&[(2, 2), (1, 3)]);
        for _ in 0..5 {
            st.step(&mut p, &g, 1e-2).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let (mut st, mut p) = setup();
        let mut g = Gradients::zeros(&[(2, 2), (1, 3)]);
        g.tensors[0].data[0] = 1.0;
        st.step(&mut p, &g, 1e-3).unwrap();
        let m0 = st.m[0].data[0];
        let zero = Gradients::zeros(&[(2, 2), (1, 3)]);
        st.step(&mut p, &zero, 1e-3).unwrap();
        assert!((st.m[0].data[0] - 0.9 * m0).abs() < 1e-15);
    }

    #[test]
    fn constant_unit_gradient_update_tends_to_lr() {
        // Reference recurrence evaluated directly.
        let (mut st, mut p) = setup();
        let mut g = Gradients::zeros(&[(2, 2), (1, 3)]);
        for t in &mut g.tensors {
            t.data.iter_mut().for_each(|v| *v = 1.0);
        }
        let lr = 1e-3;
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p[0].data[0];
            st.step(&mut p, &g, lr).unwrap();
            last = before - p[0].data[0];
        }
        assert!((last - lr).abs() < 1e-3 * lr, "update {last}");
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (mut st, mut p) = setup();
        let g = Gradients::zeros(&[(2, 2)]);
        assert!(st.step(&mut p, &g, 1e-3).is_err());
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let (mut st, mut p) = setup();
            let mut g = Gradients::zeros(&[(2, 2), (1, 3)]);
            for (k, t) in g.tensors.iter_mut().enumerate() {
                t.data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i + k) as f64).sin());
            }
            for _ in 0..10 {
                st.step(&mut p, &g, 1e-2).unwrap();
            }
            (p, st)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lr_decays_exponentially() {
        assert_eq!(decayed_lr(5e-4, 5e-5, 0, 100), 5e-4);
        assert!((decayed_lr(5e-4, 5e-5, 100, 100) - 5e-5).abs() < 1e-18);
        assert!((decayed_lr(5e-4, 5e-5, 50, 100) - (5e-4f64 * 5e-5).sqrt()).abs() < 1e-15);
    }
}
