//! LoRA experts over the vision-branch query, key and value projections.
//!
//! Row convention: tokens are rows, so the delta for a token `x` is
//! `x · (BA)^T = (x · A^T) · B^T`.

use crate::nn::{gaussian, join, trainable_zeros, Module};
use crate::numerics::{Result, Rng, Tensor, TensorError};

/// Which vision projection an adapter matrix pair updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Target {
    Q,
    K,
    V,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Q, Target::K, Target::V];

    fn index(self) -> usize {
        match self {
            Target::Q => 0,
            Target::K => 1,
            Target::V => 2,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Target::Q => "q",
            Target::K => "k",
            Target::V => "v",
        }
    }
}

/// One expert: a rank-`r` update `ΔW = BA` per target, `A: [r, D]`, `B: [D, r]`.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    pub rank: usize,
    pub dim: usize,
    pub a: [Tensor; 3],
    pub b: [Tensor; 3],
}

impl LoraAdapter {
    /// `A ~ N(0, 1/r)`, `B = 0`.
    pub fn init(rank: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        if rank == 0 || rank > dim {
            return Err(TensorError::Config(format!("LoRA rank must satisfy 1 <= r <= D, got r={rank}, D={dim}")));
        }
        let std = 1.0 / (rank as f64).sqrt();
        let a = [0, 1, 2].map(|_| gaussian(&[rank, dim], std, rng));
        let b = [0, 1, 2].map(|_| trainable_zeros(&[dim, rank]));
        Ok(LoraAdapter { rank, dim, a, b })
    }

    pub fn a(&self, t: Target) -> &Tensor {
        &self.a[t.index()]
    }

    pub fn b(&self, t: Target) -> &Tensor {
        &self.b[t.index()]
    }

    pub fn set(&mut self, t: Target, a: Tensor, b: Tensor) {
        self.a[t.index()] = a;
        self.b[t.index()] = b;
    }

    /// The low-rank delta `(BA) x` for every row of `x: [.., D]`. The frozen
    /// base projection is not included.
    pub fn lora_apply(&self, target: Target, x: &Tensor) -> Result<Tensor> {
        if x.shape().last() != Some(&self.dim) {
            return Err(TensorError::Shape {
                op: "lora_apply",
                lhs: x.shape().to_vec(),
                rhs: vec![self.rank, self.dim],
            });
        }
        x.matmul_t(self.a(target))?.matmul_t(self.b(target))
    }

    /// Trainable scalars for one target matrix: `2·r·D`.
    pub fn params_per_target(&self) -> usize {
        self.a[0].numel() + self.b[0].numel()
    }
}

impl Module for LoraAdapter {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for t in Target::ALL {
            f(join(prefix, &format!("{}.a", t.name())), &mut self.a[t.index()]);
            f(join(prefix, &format!("{}.b", t.name())), &mut self.b[t.index()]);
        }
    }
}

/// `M` experts sharing rank and width.
#[derive(Clone, Debug)]
pub struct ExpertBank {
    pub adapters: Vec<LoraAdapter>,
}

impl ExpertBank {
    pub fn init(experts: usize, rank: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        init_expert_bank(experts, rank, dim, rng)
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.adapters[0].rank
    }

    pub fn dim(&self) -> usize {
        self.adapters[0].dim
    }
}

impl Module for ExpertBank {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (m, a) in self.adapters.iter_mut().enumerate() {
            a.visit_params(&join(prefix, &format!("expert{m}")), f);
        }
    }
}

/// A fresh bank: independent Gaussian `A` draws, `B = 0`, so the bank adds
/// exactly nothing until trained.
pub fn init_expert_bank(experts: usize, rank: usize, dim: usize, rng: &mut Rng) -> Result<ExpertBank> {
    if experts == 0 {
        return Err(TensorError::Config("expert bank needs at least one expert".into()));
    }
    let adapters = (0..experts).map(|_| LoraAdapter::init(rank, dim, rng)).collect::<Result<Vec<_>>>()?;
    Ok(ExpertBank { adapters })
}
