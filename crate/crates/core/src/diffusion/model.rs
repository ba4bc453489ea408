//! Patch-token denoiser: a stack of DiT-mode blocks, some of which run the
//! recursive sparse attention.

use serde::{Deserialize, Serialize};

use crate::block::{block_forward, MmditBlockParams};
use crate::nn::{gaussian, join, Linear, Module};
use crate::numerics::{sinusoidal_embed, sinusoidal_table, Result, Rng, Tensor, TensorError, LN_EPS};
use crate::recursion::{recursive_block_forward, RecursionConfig, RecursionTrace, RecursiveLayer, RoutingMode};
use crate::routing::RoutingDecision;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DitConfig {
    pub channels: usize,
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub classes: usize,
    /// 0-based indices of the blocks carrying experts and a gate.
    pub target_layers: Vec<usize>,
    pub lora_rank: usize,
    pub recursion: RecursionConfig,
}

impl Default for DitConfig {
    fn default() -> Self {
        DitConfig {
            channels: 1,
            image_size: 16,
            patch: 4,
            dim: 64,
            heads: 4,
            layers: 6,
            classes: 4,
            target_layers: vec![2],
            lora_rank: 8,
            recursion: RecursionConfig::new(2, 2, 5.0),
        }
    }
}

impl DitConfig {
    pub fn tokens(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TensorError::Config(m));
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return bad(format!("image_size {} is not divisible by patch {}", self.image_size, self.patch));
        }
        if self.channels == 0 {
            return bad("channels must be >= 1".into());
        }
        if self.dim == 0 || !self.dim.is_multiple_of(4) {
            return bad(format!("dim must be a positive multiple of 4, got {}", self.dim));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} is not divisible by heads {}", self.dim, self.heads));
        }
        if self.classes == 0 {
            return bad("classes must be >= 1".into());
        }
        if let Some(&l) = self.target_layers.iter().find(|&&l| l >= self.layers) {
            return bad(format!("target layer {l} out of range for {} layers", self.layers));
        }
        if !self.target_layers.is_empty() {
            if self.lora_rank == 0 || self.lora_rank > self.dim {
                return bad(format!("lora_rank must be in 1..={}, got {}", self.dim, self.lora_rank));
            }
            self.recursion.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DitLayer {
    pub block: MmditBlockParams,
    pub recursion: Option<RecursiveLayer>,
}

#[derive(Clone, Debug)]
pub struct DitModel {
    pub cfg: DitConfig,
    pub patch_embed: Linear,
    /// Fixed 2D sinusoidal position embedding `[tokens, dim]`.
    pub pos: Tensor,
    pub class_embed: Tensor,
    pub t_embed: [Linear; 2],
    pub layers: Vec<DitLayer>,
    pub final_mod: Linear,
    pub head: Linear,
}

/// Routing policy for every recursive layer of one forward.
pub enum Routing<'a> {
    Sample(&'a mut Rng),
    Greedy,
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    /// When false the target layers run as plain blocks.
    pub recursion: bool,
    pub latent_steps: Option<usize>,
    pub trace: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { recursion: true, latent_steps: None, trace: false }
    }
}

pub struct ForwardOutput {
    /// Predicted noise per patch `[batch, tokens, patch_len]`.
    pub eps: Tensor,
    pub decisions: Vec<RoutingDecision>,
    pub traces: Vec<RecursionTrace>,
}

/// 2D sin/cos position table: first half of each row encodes the patch row,
/// second half the patch column.
pub fn position_table(grid: usize, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(grid * grid * dim);
    for r in 0..grid {
        let er = sinusoidal_embed(r as f64, half)?;
        for c in 0..grid {
            data.extend_from_slice(er.data());
            data.extend_from_slice(sinusoidal_embed(c as f64, half)?.data());
        }
    }
    Tensor::new(data, &[grid * grid, dim])
}

impl DitModel {
    pub fn init(cfg: &DitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let d = cfg.dim;
        let p = cfg.patch_len();
        let patch_embed = Linear::new(p, d, true, 1.0 / (p as f64).sqrt(), &mut rng);
        let class_embed = gaussian(&[cfg.classes, d], 0.02, &mut rng);
        let t_embed = [Linear::new(d, d, true, 0.02, &mut rng), Linear::new(d, d, true, 0.02, &mut rng)];
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let block = MmditBlockParams::init(d, cfg.heads, false, &mut rng)?;
            let recursion = if cfg.target_layers.contains(&l) {
                Some(RecursiveLayer::init(cfg.recursion.experts, cfg.lora_rank, d, &mut rng)?)
            } else {
                None
            };
            layers.push(DitLayer { block, recursion });
        }
        Ok(DitModel {
            cfg: cfg.clone(),
            patch_embed,
            pos: position_table(cfg.image_size / cfg.patch, d)?,
            class_embed,
            t_embed,
            layers,
            final_mod: Linear::zeros(d, 2 * d, true),
            head: Linear::zeros(d, p, true),
        })
    }

    /// Conditioning vector `y = class_embed[label] + MLP(sin(t))`, `[batch, dim]`.
    pub fn conditioning(&self, t: &[usize], labels: &[usize]) -> Result<Tensor> {
        if let Some(&l) = labels.iter().find(|&&l| l >= self.cfg.classes) {
            return Err(TensorError::Config(format!("class {l} out of range 0..{}", self.cfg.classes)));
        }
        let ts: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        let temb = self.t_embed[1].forward(&self.t_embed[0].forward(&sinusoidal_table(&ts, self.cfg.dim)?)?.silu())?;
        self.class_embed.index_select(labels)?.add(&temb)
    }

    /// Predicts the noise in `patches: [batch, tokens, patch_len]` at
    /// diffusion steps `t` for classes `labels`.
    pub fn forward(
        &self,
        patches: &Tensor,
        t: &[usize],
        labels: &[usize],
        routing: &mut Routing<'_>,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let (n, p) = (self.cfg.tokens(), self.cfg.patch_len());
        if patches.rank() != 3 || patches.shape()[1] != n || patches.shape()[2] != p {
            return Err(TensorError::Shape { op: "dit_forward", lhs: patches.shape().to_vec(), rhs: vec![0, n, p] });
        }
        let b = patches.shape()[0];
        if t.len() != b || labels.len() != b {
            return Err(TensorError::invalid("dit_forward", "timesteps and labels must match the batch"));
        }
        let y = self.conditioning(t, labels)?;
        let mut h = self.patch_embed.forward(patches)?.add(&self.pos)?;
        let mut cfg = self.cfg.recursion.clone();
        if let Some(steps) = opts.latent_steps {
            cfg.latent_steps = steps;
        }
        let mut decisions = Vec::new();
        let mut traces = Vec::new();
        for layer in &self.layers {
            h = match (&layer.recursion, opts.recursion) {
                (Some(rec), true) => {
                    let mode = match routing {
                        Routing::Sample(rng) => RoutingMode::Sample(rng),
                        Routing::Greedy => RoutingMode::Greedy,
                    };
                    let out = recursive_block_forward(&h, None, &y, &layer.block, rec, &cfg, mode, opts.trace)?;
                    decisions.extend(out.decisions);
                    if let Some(mut tr) = out.trace {
                        tr.diffusion_t = t.to_vec();
                        tr.labels = labels.to_vec();
                        traces.push(tr);
                    }
                    out.x
                }
                _ => block_forward(&h, None, &y, &layer.block)?.0,
            };
        }
        let d = self.cfg.dim;
        let m = self.final_mod.forward(&y)?.reshape(&[b, 1, 2 * d])?;
        let shift = m.narrow(2, 0, d)?;
        let scale = m.narrow(2, d, d)?.add_scalar(1.0);
        let h = h.layernorm(2, LN_EPS)?.mul(&scale)?.add(&shift)?;
        Ok(ForwardOutput { eps: self.head.forward(&h)?, decisions, traces })
    }

    /// Same architecture and weights, with every parameter frozen.
    pub fn frozen(&self) -> DitModel {
        let mut m = self.clone();
        m.set_trainable(false);
        m
    }

    pub fn experts(&self) -> usize {
        if self.layers.iter().any(|l| l.recursion.is_some()) {
            self.cfg.recursion.experts
        } else {
            0
        }
    }
}

impl Module for DitModel {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.patch_embed.visit_params(&join(prefix, "patch_embed"), f);
        f(join(prefix, "class_embed"), &mut self.class_embed);
        for (i, l) in self.t_embed.iter_mut().enumerate() {
            l.visit_params(&join(prefix, &format!("t_embed.{i}")), f);
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.block.visit_params(&join(prefix, &format!("layers.{i}.block")), f);
            if let Some(r) = layer.recursion.as_mut() {
                r.visit_params(&join(prefix, &format!("layers.{i}.recursion")), f);
            }
        }
        self.final_mod.visit_params(&join(prefix, "final_mod"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }
}
