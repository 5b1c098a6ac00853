//! Adam over a list of tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-tensor multipliers of `lr`; empty means 1 everywhere.
    pub lr_scale: Vec<f64>,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, lr_scale: Vec::new(), step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// In-place update of `params` with matching `grads`.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::invalid(format!("{} params but {} gradients", params.len(), grads.len())));
        }
        if !self.lr_scale.is_empty() && self.lr_scale.len() != params.len() {
            return Err(Error::invalid(format!("{} lr scales for {} params", self.lr_scale.len(), params.len())));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m.get(i).map(Vec::len) != Some(p.numel()) {
                return Err(Error::shape("adam", format!("param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
        }
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let lr = self.lr * self.lr_scale.get(i).copied().unwrap_or(1.0);
            for (j, (x, gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *x -= lr * (m[j] / b1t) / ((v[j] / b2t).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_in_sign_direction() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let g = Tensor::from_vec(vec![3.0, -0.01, 0.0]);
        let mut opt = Adam::new(0.1);
        opt.update(&mut [&mut p], &[&g]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-9);
        assert!((p.data()[1] + 1.9).abs() < 1e-6);
        assert_eq!(p.data()[2], 0.5);
    }

    #[test]
    fn lr_scale_applies_per_tensor() {
        let mut a = Tensor::from_vec(vec![1.0]);
        let mut b = Tensor::from_vec(vec![1.0]);
        let g = Tensor::from_vec(vec![2.0]);
        let mut opt = Adam::new(0.1);
        opt.lr_scale = vec![1.0, 10.0];
        opt.update(&mut [&mut a, &mut b], &[&g, &g]).unwrap();
        assert!((a.data()[0] - 0.9).abs() < 1e-9);
        assert!(b.data()[0].abs() < 1e-7);
        opt.lr_scale = vec![1.0];
        assert!(opt.update(&mut [&mut a, &mut b], &[&g, &g]).is_err());
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = Tensor::from_vec(vec![1.0, 2.0]);
        let before = p.clone();
        let mut opt = Adam::new(0.0);
        opt.update(&mut [&mut p], &[&Tensor::from_vec(vec![5.0, -1.0])]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Tensor::from_vec(vec![3.0, -4.0]);
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let g = p.map(|x| 2.0 * x);
            opt.update(&mut [&mut p], &[&g]).unwrap();
        }
        assert!(p.max_abs() < 1e-3);
    }
}
