//! Recursive sparse joint attention.
//!
//! The vision tokens are modulated once (`x̃`) and the text branch's
//! query/key/value are computed once. Then for each latent step a gate picks
//! one LoRA expert per token, the expert's low-rank Q/K/V maps are applied to
//! the current latent, and joint attention runs against the fixed text
//! projections. Intermediate steps feed `attention + x̃` forward; the last step
//! adds the frozen base projection `Ŵx̃` to the adapter output and skips the
//! residual. The result passes through the usual gated output projection.

use serde::{Deserialize, Serialize};

use crate::adapters::{ExpertBank, Target};
use crate::block::{
    attend, attention_residual, mlp_residual, modulate, text_qkv, MmditBlockParams, ModVectors, ModulationParams, Qkv,
};
use crate::nn::{join, Module};
use crate::numerics::{Result, Rng, Tensor, TensorError};
use crate::routing::{
    balance_loss, dispatch_and_reassemble, gate_logits, select_with_noise, GateInputs, GateNetwork, RoutingDecision,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecursionConfig {
    pub experts: usize,
    pub latent_steps: usize,
    pub tau: f64,
    /// Re-apply the vision modulation to the latent before every adapter
    /// call instead of feeding the latent directly.
    pub remodulate: bool,
    pub gate_inputs: GateInputs,
    /// One decision per image (mean of its token logits) instead of per token.
    pub pooled: bool,
}

impl RecursionConfig {
    pub fn new(experts: usize, latent_steps: usize, tau: f64) -> Self {
        RecursionConfig { experts, latent_steps, tau, remodulate: false, gate_inputs: GateInputs::Full, pooled: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return Err(TensorError::Config("experts must be >= 1".into()));
        }
        if self.latent_steps == 0 {
            return Err(TensorError::Config("latent_steps must be >= 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(TensorError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// The recursive component attached to one block: experts plus gate.
#[derive(Clone, Debug)]
pub struct RecursiveLayer {
    pub bank: ExpertBank,
    pub gate: GateNetwork,
}

impl RecursiveLayer {
    pub fn init(experts: usize, rank: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        Ok(RecursiveLayer {
            bank: ExpertBank::init(experts, rank, dim, rng)?,
            gate: GateNetwork::init(dim, experts, rng)?,
        })
    }

    fn check(&self, block: &MmditBlockParams, cfg: &RecursionConfig) -> Result<()> {
        cfg.validate()?;
        if self.bank.len() != cfg.experts || self.gate.experts != cfg.experts {
            return Err(TensorError::Config(format!(
                "config asks for {} experts, bank has {} and gate has {}",
                cfg.experts,
                self.bank.len(),
                self.gate.experts
            )));
        }
        if self.bank.dim() != block.dim || self.gate.dim != block.dim {
            return Err(TensorError::Config(format!(
                "block width {} but bank width {} and gate width {}",
                block.dim,
                self.bank.dim(),
                self.gate.dim
            )));
        }
        Ok(())
    }
}

impl Module for RecursiveLayer {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.bank.visit_params(&join(prefix, "bank"), f);
        self.gate.visit_params(&join(prefix, "gate"), f);
    }
}

/// How each step's expert choice is made.
pub enum RoutingMode<'a> {
    /// Training: fresh Gumbel noise from the generator.
    Sample(&'a mut Rng),
    /// Inference: noise-free argmax.
    Greedy,
    /// Recorded noise per step, row-major `[rows, M]`.
    Replay(&'a [Vec<f64>]),
    /// Fixed choices per step (one per routed row).
    Force(&'a [Vec<usize>]),
}

/// Structural counters of one recursive forward.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RecursionCounters {
    /// Steps at which the expert adapters were applied.
    pub adapter_steps: usize,
    /// Adapter applications summed over tokens and steps.
    pub adapter_token_applications: usize,
    /// Frozen base vision projections (`Ŵx̃`).
    pub base_projections: usize,
    /// Intermediate residual additions of `x̃`.
    pub residual_adds: usize,
    /// Text-branch Q/K/V computations.
    pub text_qkv: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based latent step.
    pub step: usize,
    pub is_final: bool,
    /// Expert per token, `batch*tokens` entries.
    pub selected: Vec<usize>,
    /// Soft probabilities per token, row-major `[batch*tokens, M]`.
    pub soft_probs: Vec<f64>,
    /// Vision latent after this step, row-major `[batch*tokens, D]`.
    pub tokens: Vec<f64>,
}

/// Per-step routing and latent snapshots of one forward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecursionTrace {
    pub batch: usize,
    pub tokens_per_image: usize,
    pub dim: usize,
    pub experts: usize,
    /// Diffusion timestep of each image, when known.
    pub diffusion_t: Vec<usize>,
    /// Conditioning (class) id of each image, when known.
    pub labels: Vec<usize>,
    /// Captured with the gate restricted to vision tokens only.
    pub ablation: bool,
    pub steps: Vec<StepRecord>,
}

impl RecursionTrace {
    pub fn new(batch: usize, tokens_per_image: usize, dim: usize, experts: usize) -> Self {
        RecursionTrace {
            batch,
            tokens_per_image,
            dim,
            experts,
            diffusion_t: Vec::new(),
            labels: Vec::new(),
            ablation: false,
            steps: Vec::new(),
        }
    }
}

pub struct RecursionOutput {
    /// Vision tokens after the gated attention residual.
    pub x: Tensor,
    /// Text tokens after the gated attention residual.
    pub c: Option<Tensor>,
    pub decisions: Vec<RoutingDecision>,
    pub counters: RecursionCounters,
    pub trace: Option<RecursionTrace>,
}

impl RecursionOutput {
    /// Balance loss over every routing decision of the forward.
    pub fn balance_loss(&self) -> Result<Tensor> {
        let probs: Vec<Tensor> = self.decisions.iter().map(|d| d.soft_probs.clone()).collect();
        let sel: Vec<usize> = self.decisions.iter().flat_map(|d| d.selected.iter().copied()).collect();
        balance_loss(&Tensor::concat(&probs, 0)?, &sel)
    }

    /// Tokens routed to each expert, over all steps.
    pub fn expert_counts(&self, experts: usize) -> Vec<usize> {
        let mut c = vec![0; experts];
        for d in &self.decisions {
            for (m, n) in d.counts().into_iter().enumerate() {
                c[m] += n;
            }
        }
        c
    }
}

/// Step-wise driver of the recursion, usable one latent step at a time.
pub struct RecursionState<'a> {
    layer: &'a RecursiveLayer,
    block: &'a MmditBlockParams,
    cfg: &'a RecursionConfig,
    mods: &'a ModVectors,
    y: Option<Tensor>,
    x_tilde: Tensor,
    text: Option<Qkv>,
    /// Current vision latent `[batch, tokens, D]`.
    pub latent: Tensor,
    /// Number of completed steps.
    pub step: usize,
    text_attn: Option<Tensor>,
    pub counters: RecursionCounters,
}

impl<'a> RecursionState<'a> {
    /// Modulates the inputs and precomputes the text projections.
    /// `c_tilde` must already be modulated.
    pub fn begin(
        layer: &'a RecursiveLayer,
        block: &'a MmditBlockParams,
        cfg: &'a RecursionConfig,
        mods: &'a ModVectors,
        x: &Tensor,
        c_tilde: Option<&Tensor>,
        y: Option<&Tensor>,
    ) -> Result<Self> {
        layer.check(block, cfg)?;
        if x.rank() != 3 || x.shape()[2] != block.dim {
            return Err(TensorError::Shape {
                op: "recursive_attention",
                lhs: x.shape().to_vec(),
                rhs: vec![0, 0, block.dim],
            });
        }
        let x_tilde = modulate(x, &mods.alpha, &mods.beta)?;
        let text = text_qkv(c_tilde, block)?;
        let counters = RecursionCounters { text_qkv: 1, ..Default::default() };
        Ok(RecursionState {
            layer,
            block,
            cfg,
            mods,
            y: y.cloned(),
            latent: x_tilde.clone(),
            x_tilde,
            text,
            step: 0,
            text_attn: None,
            counters,
        })
    }

    pub fn batch(&self) -> usize {
        self.x_tilde.shape()[0]
    }

    pub fn tokens_per_image(&self) -> usize {
        self.x_tilde.shape()[1]
    }

    /// The modulated input `x̃`.
    pub fn x_tilde(&self) -> &Tensor {
        &self.x_tilde
    }

    /// Gate logits for the next step; `[batch*tokens, M]`, or `[batch, M]`
    /// when routing is pooled per image.
    pub fn next_logits(&self) -> Result<Tensor> {
        let logits = gate_logits(&self.latent, self.y.as_ref(), self.step + 1, &self.layer.gate, self.cfg.gate_inputs)?;
        if self.cfg.pooled {
            let (b, n, m) = (self.batch(), self.tokens_per_image(), self.cfg.experts);
            logits.reshape(&[b, n, m])?.mean_axis(1)
        } else {
            Ok(logits)
        }
    }

    /// Picks experts for the next step from `logits`.
    pub fn decide(&self, logits: &Tensor, mode: &mut RoutingMode<'_>) -> Result<RoutingDecision> {
        let step = self.step;
        let tau = self.cfg.tau;
        match mode {
            RoutingMode::Sample(rng) => {
                let noise = (0..logits.numel()).map(|_| rng.gumbel()).collect();
                select_with_noise(logits, tau, Some(noise), None)
            }
            RoutingMode::Greedy => select_with_noise(logits, tau, None, None),
            RoutingMode::Replay(noise) => {
                let g = noise.get(step).ok_or_else(|| TensorError::invalid("recursion", "no replay noise for step"))?;
                select_with_noise(logits, tau, Some(g.clone()), None)
            }
            RoutingMode::Force(choices) => {
                let f =
                    choices.get(step).ok_or_else(|| TensorError::invalid("recursion", "no forced choice for step"))?;
                select_with_noise(logits, tau, None, Some(f))
            }
        }
    }

    /// Runs one latent step with the given decision. On the final step the
    /// frozen base projection is added and no residual is taken.
    pub fn advance(&mut self, decision: &RoutingDecision, is_final: bool) -> Result<()> {
        let (b, n, d) = (self.batch(), self.tokens_per_image(), self.block.dim);
        let (per_token, weights) = if decision.rows() == b * n {
            (decision.selected.clone(), decision.selection_weights()?)
        } else if decision.rows() == b {
            let rows: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat_n(i, n)).collect();
            let sel = rows.iter().map(|&i| decision.selected[i]).collect();
            (sel, decision.selection_weights()?.index_select(&rows)?)
        } else {
            return Err(TensorError::invalid(
                "recursion",
                format!("{} routing rows for {b}x{n} tokens", decision.rows()),
            ));
        };

        let adapter_in = if self.cfg.remodulate {
            modulate(&self.latent, &self.mods.alpha, &self.mods.beta)?
        } else {
            self.latent.clone()
        };
        let bank = &self.layer.bank;
        let delta = dispatch_and_reassemble(&adapter_in, &per_token, bank.len(), |m, rows| {
            let ad = &bank.adapters[m];
            Tensor::concat(
                &[ad.lora_apply(Target::Q, rows)?, ad.lora_apply(Target::K, rows)?, ad.lora_apply(Target::V, rows)?],
                1,
            )
        })?;
        let delta = delta.mul(&weights.reshape(&[b, n, 1])?)?;
        self.counters.adapter_steps += 1;
        self.counters.adapter_token_applications += b * n;

        let mut q = delta.narrow(2, 0, d)?;
        let mut k = delta.narrow(2, d, d)?;
        let mut v = delta.narrow(2, 2 * d, d)?;
        if is_final {
            let base = self.block.x.project(&self.x_tilde)?;
            q = base.q.add(&q)?;
            k = base.k.add(&k)?;
            v = base.v.add(&v)?;
            self.counters.base_projections += 1;
        }
        let (ax, ac) = attend(&Qkv { q, k, v }, self.text.as_ref(), self.block.heads)?;
        self.latent = if is_final {
            ax
        } else {
            self.counters.residual_adds += 1;
            ax.add(&self.x_tilde)?
        };
        self.text_attn = ac;
        self.step += 1;
        Ok(())
    }

    /// Gated output projection of the final latent and text attention:
    /// `x + γ_x ⊙ (ã W_O)`, `c + γ_c ⊙ (a_c W_O^c)`.
    pub fn finish(
        &self,
        x: &Tensor,
        c: Option<&Tensor>,
        c_mods: Option<&ModVectors>,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let x_out = attention_residual(x, &self.mods.gamma, &self.latent.matmul(&self.block.x.wo)?)?;
        let c_out = match (c, &self.text_attn, c_mods, &self.block.c) {
            (Some(c), Some(ac), Some(mc), Some(branch)) => {
                Some(attention_residual(c, &mc.gamma, &ac.matmul(&branch.wo)?)?)
            }
            (Some(c), _, _, _) => Some(c.clone()),
            _ => None,
        };
        Ok((x_out, c_out))
    }

    fn record(&self, decision: &RoutingDecision, is_final: bool) -> StepRecord {
        let (b, n) = (self.batch(), self.tokens_per_image());
        let m = decision.experts();
        let expand = decision.rows() == b && b * n != b;
        let (selected, soft_probs) = if expand {
            let mut sel = Vec::with_capacity(b * n);
            let mut probs = Vec::with_capacity(b * n * m);
            for i in 0..b {
                for _ in 0..n {
                    sel.push(decision.selected[i]);
                    probs.extend_from_slice(&decision.soft_probs.data()[i * m..(i + 1) * m]);
                }
            }
            (sel, probs)
        } else {
            (decision.selected.clone(), decision.soft_probs.to_vec())
        };
        StepRecord { step: self.step, is_final, selected, soft_probs, tokens: self.latent.to_vec() }
    }
}

/// Full recursion over `cfg.latent_steps` steps, returning the post-attention
/// vision and text streams (before the MLP sub-block).
#[allow(clippy::too_many_arguments)]
pub fn recursive_attention(
    x: &Tensor,
    c: Option<&Tensor>,
    y: &Tensor,
    mods: &ModulationParams,
    block: &MmditBlockParams,
    layer: &RecursiveLayer,
    cfg: &RecursionConfig,
    mut mode: RoutingMode<'_>,
    trace: bool,
) -> Result<RecursionOutput> {
    let c_tilde = match (c, &mods.c) {
        (Some(c), Some(mc)) => Some(modulate(c, &mc.alpha, &mc.beta)?),
        (Some(_), None) => {
            return Err(TensorError::Config("text tokens given to a block without a text branch".into()))
        }
        _ => None,
    };
    let mut state = RecursionState::begin(layer, block, cfg, &mods.x, x, c_tilde.as_ref(), Some(y))?;
    let mut decisions = Vec::with_capacity(cfg.latent_steps);
    let mut rec = trace.then(|| {
        let mut t = RecursionTrace::new(state.batch(), state.tokens_per_image(), block.dim, cfg.experts);
        t.ablation = cfg.gate_inputs == GateInputs::VisionOnly;
        t
    });
    for t in 1..=cfg.latent_steps {
        let is_final = t == cfg.latent_steps;
        let logits = state.next_logits()?;
        let decision = state.decide(&logits, &mut mode)?;
        state.advance(&decision, is_final)?;
        if let Some(r) = rec.as_mut() {
            r.steps.push(state.record(&decision, is_final));
        }
        decisions.push(decision);
    }
    let (x_out, c_out) = state.finish(x, c, mods.c.as_ref())?;
    Ok(RecursionOutput { x: x_out, c: c_out, decisions, counters: state.counters.clone(), trace: rec })
}

/// A whole block whose attention sub-layer is the recursion; the MLP
/// sub-block is unchanged.
#[allow(clippy::too_many_arguments)]
pub fn recursive_block_forward(
    x: &Tensor,
    c: Option<&Tensor>,
    y: &Tensor,
    block: &MmditBlockParams,
    layer: &RecursiveLayer,
    cfg: &RecursionConfig,
    mode: RoutingMode<'_>,
    trace: bool,
) -> Result<RecursionOutput> {
    let mods = block.modulation(y)?;
    let mut out = recursive_attention(x, c, y, &mods, block, layer, cfg, mode, trace)?;
    out.x = mlp_residual(&out.x, &mods.x, &block.x)?;
    if let (Some(c1), Some(mc), Some(branch)) = (out.c.as_ref(), mods.c.as_ref(), block.c.as_ref()) {
        out.c = Some(mlp_residual(c1, mc, branch)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
