//! Gating network, Gumbel-Softmax hard selection, token dispatch and the
//! expert balance loss.

use serde::{Deserialize, Serialize};

use crate::nn::{join, Linear, Module};
use crate::numerics::{sinusoidal_embed, Result, Rng, Tensor, TensorError};

/// Which signals feed the gate. `VisionOnly` drops the conditioning vector
/// and the latent-step embedding (routing-statistics ablation).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateInputs {
    #[default]
    Full,
    VisionOnly,
}

/// Two-layer GELU MLP mapping a `D`-wide gate input to `M` logits.
#[derive(Clone, Debug)]
pub struct GateNetwork {
    pub dim: usize,
    pub experts: usize,
    pub hidden: Linear,
    pub out: Linear,
}

impl GateNetwork {
    pub fn init(dim: usize, experts: usize, rng: &mut Rng) -> Result<Self> {
        if experts == 0 {
            return Err(TensorError::Config("gate needs at least one expert".into()));
        }
        if !dim.is_multiple_of(2) {
            return Err(TensorError::Config(format!("gate width must be even for the step embedding, got {dim}")));
        }
        Ok(GateNetwork {
            dim,
            experts,
            hidden: Linear::new(dim, dim, true, 1.0 / (dim as f64).sqrt(), rng),
            out: Linear::new(dim, experts, true, 0.02, rng),
        })
    }

    /// A gate whose every weight is zero: uniform routing probabilities.
    pub fn zeros(dim: usize, experts: usize) -> Self {
        GateNetwork { dim, experts, hidden: Linear::zeros(dim, dim, true), out: Linear::zeros(dim, experts, true) }
    }
}

impl Module for GateNetwork {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.hidden.visit_params(&join(prefix, "hidden"), f);
        self.out.visit_params(&join(prefix, "out"), f);
    }
}

/// Per-token logits `[batch*tokens, M]` from `x + y + step_embed(t_latent)`.
///
/// `x_tokens: [batch, tokens, D]`, `y: [batch, D]`. Rows are independent.
pub fn gate_logits(
    x_tokens: &Tensor,
    y: Option<&Tensor>,
    t_latent: usize,
    gate: &GateNetwork,
    inputs: GateInputs,
) -> Result<Tensor> {
    if t_latent == 0 {
        return Err(TensorError::invalid("gate_logits", "latent steps are numbered from 1"));
    }
    if x_tokens.rank() != 3 || x_tokens.shape()[2] != gate.dim {
        return Err(TensorError::Shape {
            op: "gate_logits",
            lhs: x_tokens.shape().to_vec(),
            rhs: vec![0, 0, gate.dim],
        });
    }
    let (b, n) = (x_tokens.shape()[0], x_tokens.shape()[1]);
    let mut input = x_tokens.clone();
    if inputs == GateInputs::Full {
        if let Some(y) = y {
            if y.shape() != [b, gate.dim] {
                return Err(TensorError::Shape { op: "gate_logits", lhs: y.shape().to_vec(), rhs: vec![b, gate.dim] });
            }
            input = input.add(&y.reshape(&[b, 1, gate.dim])?)?;
        }
        input = input.add(&sinusoidal_embed(t_latent as f64, gate.dim)?)?;
    }
    let h = gate.hidden.forward(&input)?.gelu();
    gate.out.forward(&h)?.reshape(&[b * n, gate.experts])
}

/// Outcome of one routing step over a set of token rows.
#[derive(Clone, Debug)]
pub struct RoutingDecision {
    pub logits: Tensor,
    /// The Gumbel noise added to the logits, row-major `[rows, M]`, if any.
    pub noise: Option<Vec<f64>>,
    /// `softmax((logits + noise) / tau)`, gradient-tracking.
    pub soft_probs: Tensor,
    pub selected: Vec<usize>,
}

impl RoutingDecision {
    pub fn rows(&self) -> usize {
        self.selected.len()
    }

    pub fn experts(&self) -> usize {
        self.logits.shape()[1]
    }

    /// Straight-through weight of each row's selected expert: forward value
    /// exactly 1, backward gradient into that expert's soft probability.
    pub fn selection_weights(&self) -> Result<Tensor> {
        self.soft_probs.pick(&self.selected)?.straight_through(vec![1.0; self.rows()])
    }

    /// Tokens per expert.
    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.experts()];
        for &s in &self.selected {
            c[s] += 1;
        }
        c
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Gumbel-Softmax top-1 selection. With `training` the logits are perturbed by
/// fresh Gumbel(0,1) noise; otherwise the choice is the plain argmax.
pub fn gumbel_select(logits: &Tensor, tau: f64, rng: &mut Rng, training: bool) -> Result<RoutingDecision> {
    let noise = training.then(|| (0..logits.numel()).map(|_| rng.gumbel()).collect());
    select_with_noise(logits, tau, noise, None)
}

/// Selection with caller-supplied noise (replay) and optionally a forced
/// choice per row. Forced rows keep the soft probabilities so the gate still
/// receives gradients.
pub fn select_with_noise(
    logits: &Tensor,
    tau: f64,
    noise: Option<Vec<f64>>,
    forced: Option<&[usize]>,
) -> Result<RoutingDecision> {
    if !(tau > 0.0) {
        return Err(TensorError::Config(format!("Gumbel temperature must be positive, got {tau}")));
    }
    if logits.rank() != 2 {
        return Err(TensorError::invalid("gumbel_select", format!("logits shape {:?}", logits.shape())));
    }
    let (rows, m) = (logits.shape()[0], logits.shape()[1]);
    let perturbed = match &noise {
        Some(g) => {
            if g.len() != logits.numel() {
                return Err(TensorError::invalid("gumbel_select", "noise length differs from logits"));
            }
            logits.add(&Tensor::new(g.clone(), logits.shape())?)?
        }
        None => logits.clone(),
    };
    let selected = match forced {
        Some(f) => {
            if f.len() != rows || f.iter().any(|&s| s >= m) {
                return Err(TensorError::invalid("gumbel_select", "forced selection out of range"));
            }
            f.to_vec()
        }
        None => perturbed.data().chunks(m).map(argmax).collect(),
    };
    let soft_probs = perturbed.scale(1.0 / tau).softmax(1)?;
    Ok(RoutingDecision { logits: logits.clone(), noise, soft_probs, selected })
}

/// Grouping of flattened tokens by expert and its inverse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPermutation {
    /// `forward[j]` is the original row placed at grouped position `j`.
    pub forward: Vec<usize>,
    /// `inverse[i]` is the grouped position of original row `i`.
    pub inverse: Vec<usize>,
    /// Start offset of each expert's group in grouped order, plus the total.
    pub offsets: Vec<usize>,
}

impl TokenPermutation {
    pub fn group(selected: &[usize], experts: usize) -> Result<Self> {
        if let Some(&bad) = selected.iter().find(|&&s| s >= experts) {
            return Err(TensorError::invalid("dispatch", format!("expert {bad} of {experts}")));
        }
        let mut offsets = vec![0; experts + 1];
        for &s in selected {
            offsets[s + 1] += 1;
        }
        for m in 0..experts {
            offsets[m + 1] += offsets[m];
        }
        let mut cursor = offsets.clone();
        let mut forward = vec![0; selected.len()];
        let mut inverse = vec![0; selected.len()];
        for (i, &s) in selected.iter().enumerate() {
            forward[cursor[s]] = i;
            inverse[i] = cursor[s];
            cursor[s] += 1;
        }
        Ok(TokenPermutation { forward, inverse, offsets })
    }
}

/// Flattens all leading axes of `tokens: [.., D]` into rows, runs each
/// expert's function on the rows routed to it and scatters the results back
/// so output row `i` corresponds to input row `i`. Experts with no rows are
/// not called.
pub fn dispatch_and_reassemble<F>(tokens: &Tensor, selected: &[usize], experts: usize, mut apply: F) -> Result<Tensor>
where
    F: FnMut(usize, &Tensor) -> Result<Tensor>,
{
    let d = *tokens.shape().last().ok_or_else(|| TensorError::invalid("dispatch", "rank 0 tokens"))?;
    let rows = tokens.numel() / d.max(1);
    if selected.len() != rows {
        return Err(TensorError::invalid("dispatch", format!("{} decisions for {rows} tokens", selected.len())));
    }
    let perm = TokenPermutation::group(selected, experts)?;
    let flat = tokens.reshape(&[rows, d])?;
    let mut outputs = Vec::new();
    for m in 0..experts {
        let (lo, hi) = (perm.offsets[m], perm.offsets[m + 1]);
        if lo == hi {
            continue;
        }
        let group = flat.index_select(&perm.forward[lo..hi])?;
        let out = apply(m, &group)?;
        if out.rank() != 2 || out.shape()[0] != hi - lo {
            return Err(TensorError::invalid("dispatch", format!("expert {m} returned shape {:?}", out.shape())));
        }
        outputs.push(out);
    }
    let grouped = Tensor::concat(&outputs, 0)?;
    let width = grouped.shape()[1];
    let restored = grouped.index_select(&perm.inverse)?;
    let mut shape = tokens.shape().to_vec();
    *shape.last_mut().unwrap() = width;
    restored.reshape(&shape)
}

/// `M · Σ_m f_m · p̄_m` with `f_m` the fraction of rows routed to expert `m`
/// (constant) and `p̄_m` the mean soft probability (differentiable).
///
/// Evaluated as the row mean of `Σ_m w_m · p[r, m]` with `w_m = M·count_m/T`,
/// so uniform routing gives exactly 1 and full collapse exactly `M`.
pub fn balance_loss(soft_probs: &Tensor, selected: &[usize]) -> Result<Tensor> {
    if soft_probs.rank() != 2 || soft_probs.shape()[0] != selected.len() || selected.is_empty() {
        return Err(TensorError::invalid(
            "balance_loss",
            format!("{} selections for probabilities {:?}", selected.len(), soft_probs.shape()),
        ));
    }
    let m = soft_probs.shape()[1];
    let mut counts = vec![0usize; m];
    for &s in selected {
        if s >= m {
            return Err(TensorError::invalid("balance_loss", format!("expert {s} of {m}")));
        }
        counts[s] += 1;
    }
    let t = selected.len() as f64;
    let weights = counts.iter().map(|&c| (m * c) as f64 / t).collect();
    Ok(soft_probs.mul(&Tensor::new(weights, &[m])?)?.sum_axis(1)?.mean())
}
