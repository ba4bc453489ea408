//! AdamW with decoupled weight decay.

use crate::nn::Module;
use crate::numerics::{Result, Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW { lr, beta1, beta2, eps: 1e-8, weight_decay, steps: 0, moments: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// Updates every trainable parameter of `model` from its accumulated
    /// gradient (missing gradients count as zero) and replaces it with a fresh
    /// leaf, which also clears the gradient.
    pub fn step<M: Module + ?Sized>(&mut self, model: &mut M) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let moments = &mut self.moments;
        let mut idx = 0;
        let mut err = None;
        model.visit_params("", &mut |name, p| {
            if !p.requires_grad() || err.is_some() {
                return;
            }
            let n = p.numel();
            if moments.len() == idx {
                moments.push((vec![0.0; n], vec![0.0; n]));
            }
            let (m, v) = &mut moments[idx];
            idx += 1;
            if m.len() != n {
                err = Some(TensorError::invalid("adamw", format!("parameter {name} changed size")));
                return;
            }
            let g = p.grad().unwrap_or_else(|| vec![0.0; n]);
            let mut w = p.to_vec();
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                w[i] -= lr * (update + wd * w[i]);
            }
            *p = Tensor::param(w, p.shape()).expect("same shape");
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut lin = Linear::zeros(2, 1, false);
        lin.weight = Tensor::param(vec![1.0, -2.0], &[2, 1]).unwrap();
        let x = Tensor::new(vec![3.0, -0.5], &[1, 2]).unwrap();
        lin.forward(&x).unwrap().sum().backward().unwrap();
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 0.0);
        opt.step(&mut lin).unwrap();
        // Bias-corrected first step is g/|g| up to eps.
        let w = lin.weight.to_vec();
        assert!((w[0] - 0.9).abs() < 1e-8);
        assert!((w[1] + 1.9).abs() < 1e-8);
        assert!(lin.weight.grad().is_none());
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let mut lin = Linear::zeros(1, 1, false);
        lin.weight = Tensor::param(vec![2.0], &[1, 1]).unwrap();
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 0.5);
        opt.step(&mut lin).unwrap();
        assert!((lin.weight.item() - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut lin = Linear::zeros(1, 1, false);
        let mut opt = AdamW::new(0.05, 0.9, 0.999, 0.0);
        for _ in 0..2000 {
            lin.weight.add_scalar(-3.0).square().sum().backward().unwrap();
            opt.step(&mut lin).unwrap();
        }
        assert!((lin.weight.item() - 3.0).abs() < 1e-3);
    }
}
