//! Small building blocks shared by the models: linear layers and named
//! parameter traversal.

use crate::numerics::{Result, Rng, Tensor};

/// Visits every parameter tensor under a dotted name. Implementors list their
/// fields in a fixed order so traversal is deterministic.
pub trait Module {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));

    /// Snapshot of `(name, tensor)` pairs in traversal order.
    fn named_params(&self) -> Vec<(String, Tensor)>
    where
        Self: Clone,
    {
        let mut out = Vec::new();
        self.clone().visit_params("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    /// Number of scalar parameters that track gradients.
    fn trainable_count(&self) -> usize
    where
        Self: Clone,
    {
        self.named_params().iter().filter(|(_, t)| t.requires_grad()).map(|(_, t)| t.numel()).sum()
    }

    /// Marks every parameter as trainable or frozen.
    fn set_trainable(&mut self, trainable: bool) {
        self.visit_params("", &mut |_, t| *t = t.with_grad(trainable));
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Gaussian-initialized trainable tensor.
pub(crate) fn gaussian(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(rng.normals(n, std), shape).expect("shape and length agree")
}

pub(crate) fn trainable_zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).with_grad(true)
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(input: usize, output: usize, bias: bool, std: f64, rng: &mut Rng) -> Self {
        Linear { weight: gaussian(&[input, output], std, rng), bias: bias.then(|| trainable_zeros(&[output])) }
    }

    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Linear { weight: trainable_zeros(&[input, output]), bias: bias.then(|| trainable_zeros(&[output])) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

impl Module for Linear {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(join(prefix, "bias"), b);
        }
    }
}
