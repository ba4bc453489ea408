//! Action-routed recursion over frame tokens, with a frame decoder.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::env::{render, Action, Cell, LakeMap, Pos, Rollout};
use crate::block::{block_forward, MmditBlockParams};
use crate::diffusion::model::position_table;
use crate::diffusion::patchify;
use crate::nn::{gaussian, join, Linear, Module};
use crate::numerics::{Result, Rng, Tensor, TensorError, LN_EPS};
use crate::optim::AdamW;
use crate::recursion::{RecursionConfig, RecursionState, RecursiveLayer};
use crate::routing::{select_with_noise, GateInputs, RoutingDecision};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LakeConfig {
    pub grid: usize,
    pub cell_px: usize,
    pub dim: usize,
    pub heads: usize,
    /// Plain blocks between the patch embedding and the recursive block.
    pub encoder_layers: usize,
    pub experts: usize,
    pub lora_rank: usize,
    pub tau: f64,
    pub remodulate: bool,
}

impl Default for LakeConfig {
    fn default() -> Self {
        LakeConfig {
            grid: 4,
            cell_px: 4,
            dim: 32,
            heads: 4,
            encoder_layers: 2,
            experts: 4,
            lora_rank: 8,
            tau: 5.0,
            remodulate: false,
        }
    }
}

impl LakeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.experts != Action::ALL.len() {
            return Err(TensorError::Config(format!("experts must equal the 4 actions, got {}", self.experts)));
        }
        if self.grid < 2 || self.cell_px < 2 {
            return Err(TensorError::Config("grid and cell_px must be >= 2".into()));
        }
        if self.dim == 0 || !self.dim.is_multiple_of(4) || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(TensorError::Config(format!(
                "dim {} must be a multiple of 4 and of heads {}",
                self.dim, self.heads
            )));
        }
        if self.lora_rank == 0 || self.lora_rank > self.dim {
            return Err(TensorError::Config(format!("lora_rank must be in 1..={}", self.dim)));
        }
        self.recursion(1).validate()
    }

    pub fn frame_side(&self) -> usize {
        self.grid * self.cell_px
    }

    pub fn recursion(&self, steps: usize) -> RecursionConfig {
        RecursionConfig {
            experts: self.experts,
            latent_steps: steps.max(1),
            tau: self.tau,
            remodulate: self.remodulate,
            gate_inputs: GateInputs::Full,
            pooled: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LakeModel {
    pub cfg: LakeConfig,
    pub patch_embed: Linear,
    pub pos: Tensor,
    /// Learned conditioning vector shared by all frames, `[1, dim]`.
    pub cond: Tensor,
    pub encoder: Vec<MmditBlockParams>,
    pub block: MmditBlockParams,
    pub recursion: RecursiveLayer,
    pub decoder: MmditBlockParams,
    pub head: Linear,
}

impl Module for LakeModel {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.patch_embed.visit_params(&join(prefix, "patch_embed"), f);
        f(join(prefix, "cond"), &mut self.cond);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_params(&join(prefix, &format!("encoder.{i}")), f);
        }
        self.block.visit_params(&join(prefix, "block"), f);
        self.recursion.visit_params(&join(prefix, "recursion"), f);
        self.decoder.visit_params(&join(prefix, "decoder"), f);
        self.head.visit_params(&join(prefix, "head"), f);
    }
}

/// Losses and gate agreement of one teacher-forced batch.
pub struct ForcedOutput {
    pub gate_loss: Tensor,
    pub frame_loss: Tensor,
    /// `confusion[label][chosen]` of the gate's argmax.
    pub confusion: [[usize; 4]; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Goal,
    Hole,
    /// Step cap reached without reaching the goal: no plan.
    StepCap,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub actions: Vec<Action>,
    pub positions: Vec<Pos>,
    pub outcome: Outcome,
    /// Decoded frame after each latent step, row-major pixels.
    #[serde(skip)]
    pub frames: Vec<Vec<f64>>,
}

impl LakeModel {
    pub fn init(cfg: &LakeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let d = cfg.dim;
        let p = cfg.cell_px * cfg.cell_px;
        let mut block = || MmditBlockParams::init(d, cfg.heads, false, &mut rng);
        let encoder = (0..cfg.encoder_layers).map(|_| block()).collect::<Result<Vec<_>>>()?;
        let main = block()?;
        let decoder = block()?;
        Ok(LakeModel {
            cfg: cfg.clone(),
            patch_embed: Linear::new(p, d, true, 1.0 / (p as f64).sqrt(), &mut rng),
            pos: position_table(cfg.grid, d)?,
            cond: gaussian(&[1, d], 0.02, &mut rng),
            encoder,
            block: main,
            recursion: RecursiveLayer::init(cfg.experts, cfg.lora_rank, d, &mut rng)?,
            decoder,
            head: Linear::zeros(d, p, true),
        })
    }

    fn cond_batch(&self, b: usize) -> Result<Tensor> {
        self.cond.index_select(&vec![0; b])
    }

    /// Embeds frames (one token per cell) and runs the encoder blocks.
    pub fn encode(&self, frames: &[&[f64]]) -> Result<Tensor> {
        let (side, px) = (self.cfg.frame_side(), self.cfg.cell_px);
        let b = frames.len();
        let flat: Vec<f64> = frames.iter().flat_map(|f| f.iter().copied()).collect();
        if flat.len() != b * side * side {
            return Err(TensorError::invalid("lake_encode", "frame size does not match the grid"));
        }
        let n = self.cfg.grid * self.cfg.grid;
        let patches = Tensor::new(patchify(&flat, b, 1, side, side, px), &[b, n, px * px])?;
        let y = self.cond_batch(b)?;
        let mut h = self.patch_embed.forward(&patches)?.add(&self.pos)?;
        for blk in &self.encoder {
            h = block_forward(&h, None, &y, blk)?.0;
        }
        Ok(h)
    }

    /// Decodes latent tokens to frame patches `[batch, cells, cell_px²]`.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let y = self.cond_batch(latent.shape()[0])?;
        let h = block_forward(latent, None, &y, &self.decoder)?.0;
        self.head.forward(&h.layernorm(2, LN_EPS)?)
    }

    fn frame_patches(&self, frames: &[&[f64]]) -> Result<Tensor> {
        let (side, px) = (self.cfg.frame_side(), self.cfg.cell_px);
        let b = frames.len();
        let flat: Vec<f64> = frames.iter().flat_map(|f| f.iter().copied()).collect();
        Tensor::new(patchify(&flat, b, 1, side, side, px), &[b, self.cfg.grid * self.cfg.grid, px * px])
    }

    /// Runs rollouts of equal length with experts forced to the taken
    /// actions. The gate is scored against the shortest-path labels and every
    /// latent (including the initial one) is decoded against its frame.
    pub fn teacher_forced(&self, batch: &[&Rollout]) -> Result<ForcedOutput> {
        let t_len = batch.first().map_or(0, |r| r.len());
        if batch.is_empty() || batch.iter().any(|r| r.len() != t_len) {
            return Err(TensorError::invalid("teacher_forced", "batch needs rollouts of one common length"));
        }
        let b = batch.len();
        let starts: Vec<&[f64]> = batch.iter().map(|r| r.frames[0].as_slice()).collect();
        let h = self.encode(&starts)?;
        let y = self.cond_batch(b)?;
        let mods = self.block.modulation(&y)?;
        let rc = self.cfg.recursion(t_len);
        let mut st = RecursionState::begin(&self.recursion, &self.block, &rc, &mods.x, &h, None, Some(&y))?;
        let mut frame_terms = vec![self.decode(&st.latent)?.sub(&self.frame_patches(&starts)?)?.square().mean()];
        let mut gate_terms = Vec::with_capacity(t_len);
        let mut confusion = [[0usize; 4]; 4];
        for t in 0..t_len {
            let logits = st.next_logits()?;
            let labels: Vec<usize> = batch.iter().map(|r| r.labels[t].index()).collect();
            gate_terms.push(logits.log_softmax(1)?.pick(&labels)?.mean().neg());
            for (row, &l) in logits.data().chunks(4).zip(&labels) {
                confusion[l][argmax(row)] += 1;
            }
            let taken: Vec<usize> = batch.iter().map(|r| r.actions[t].index()).collect();
            let decision = select_with_noise(&logits, self.cfg.tau, None, Some(&taken))?;
            st.advance(&decision, false)?;
            let target: Vec<&[f64]> = batch.iter().map(|r| r.frames[t + 1].as_slice()).collect();
            frame_terms.push(self.decode(&st.latent)?.sub(&self.frame_patches(&target)?)?.square().mean());
        }
        let mean = |terms: &[Tensor]| -> Result<Tensor> {
            if terms.is_empty() {
                return Ok(Tensor::scalar(0.0));
            }
            let parts: Vec<Tensor> = terms.iter().map(|t| t.reshape(&[1])).collect::<Result<_>>()?;
            Ok(Tensor::concat(&parts, 0)?.mean())
        };
        Ok(ForcedOutput { gate_loss: mean(&gate_terms)?, frame_loss: mean(&frame_terms)?, confusion })
    }

    /// From the start frame alone: at each latent step the gate's argmax is
    /// the action, the environment executes it, and the latent is decoded.
    /// Stops at the goal, in a hole, or after `4·G²` steps.
    pub fn plan_and_decode(&self, map: &LakeMap) -> Result<Plan> {
        if map.size != self.cfg.grid {
            return Err(TensorError::Config(format!("map size {} but model grid {}", map.size, self.cfg.grid)));
        }
        let frozen = {
            let mut m = self.clone();
            m.set_trainable(false);
            m
        };
        let cap = 4 * map.size * map.size;
        let start = render(map, map.start(), self.cfg.cell_px);
        let h = frozen.encode(&[&start])?;
        let y = frozen.cond_batch(1)?;
        let mods = frozen.block.modulation(&y)?;
        let rc = frozen.cfg.recursion(cap);
        let mut st = RecursionState::begin(&frozen.recursion, &frozen.block, &rc, &mods.x, &h, None, Some(&y))?;
        let mut pos = map.start();
        let mut plan =
            Plan { actions: Vec::new(), positions: vec![pos], outcome: Outcome::StepCap, frames: Vec::new() };
        for _ in 0..cap {
            let logits = st.next_logits()?;
            let decision: RoutingDecision = select_with_noise(&logits, frozen.cfg.tau, None, None)?;
            let action = Action::from_index(decision.selected[0]).expect("four experts");
            st.advance(&decision, false)?;
            let patches = frozen.decode(&st.latent)?;
            let side = frozen.cfg.frame_side();
            plan.frames.push(crate::diffusion::unpatchify(patches.data(), 1, 1, side, side, frozen.cfg.cell_px));
            pos = map.step(pos, action);
            plan.actions.push(action);
            plan.positions.push(pos);
            match map.cell(pos) {
                Cell::Goal => {
                    plan.outcome = Outcome::Goal;
                    break;
                }
                Cell::Hole => {
                    plan.outcome = Outcome::Hole;
                    break;
                }
                _ => {}
            }
        }
        Ok(plan)
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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LakeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub gate_weight: f64,
    pub frame_weight: f64,
    pub seed: u64,
}

impl Default for LakeTrainConfig {
    fn default() -> Self {
        LakeTrainConfig {
            steps: 3000,
            batch_size: 16,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            gate_weight: 1.0,
            frame_weight: 10.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LakeLogRecord {
    pub step: usize,
    pub gate_loss: f64,
    pub frame_loss: f64,
    pub gate_accuracy: f64,
}

/// Rollouts grouped by length, skipping empty ones.
pub fn by_length(rollouts: &[Rollout]) -> BTreeMap<usize, Vec<&Rollout>> {
    let mut groups: BTreeMap<usize, Vec<&Rollout>> = BTreeMap::new();
    for r in rollouts.iter().filter(|r| !r.is_empty()) {
        groups.entry(r.len()).or_default().push(r);
    }
    groups
}

fn accuracy(c: &[[usize; 4]; 4]) -> f64 {
    let total: usize = c.iter().flatten().sum();
    let diag: usize = (0..4).map(|i| c[i][i]).sum();
    diag as f64 / total.max(1) as f64
}

/// Joint training of gate, adapters, encoder and decoder. Each step draws a
/// rollout length (weighted by how many rollouts have it) and a batch of
/// rollouts of that length.
pub fn train_planner(
    model: &mut LakeModel,
    rollouts: &[Rollout],
    cfg: &LakeTrainConfig,
    on_step: &mut dyn FnMut(&LakeLogRecord, &LakeModel) -> Result<()>,
) -> Result<Vec<LakeLogRecord>> {
    model.cfg.validate()?;
    let groups: Vec<Vec<&Rollout>> = by_length(rollouts).into_values().collect();
    let total: usize = groups.iter().map(Vec::len).sum();
    if total == 0 || cfg.batch_size == 0 {
        return Err(TensorError::Config("need non-empty rollouts and a positive batch size".into()));
    }
    let mut rng = Rng::new(cfg.seed).derive(1);
    let mut opt = AdamW::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut pick = rng.below(total);
        let group = groups
            .iter()
            .find(|g| {
                let hit = pick < g.len();
                if !hit {
                    pick -= g.len();
                }
                hit
            })
            .expect("pick is below the total");
        let batch: Vec<&Rollout> = (0..cfg.batch_size).map(|_| group[rng.below(group.len())]).collect();
        let out = model.teacher_forced(&batch)?;
        let loss = out.gate_loss.scale(cfg.gate_weight).add(&out.frame_loss.scale(cfg.frame_weight))?;
        if !loss.item().is_finite() {
            return Err(TensorError::invalid("train_planner", format!("loss diverged at step {step}")));
        }
        loss.backward()?;
        opt.step(model)?;
        let rec = LakeLogRecord {
            step,
            gate_loss: out.gate_loss.item(),
            frame_loss: out.frame_loss.item(),
            gate_accuracy: accuracy(&out.confusion),
        };
        on_step(&rec, model)?;
        log.push(rec);
    }
    Ok(log)
}

/// Teacher-forced gate agreement with the shortest-path labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateEval {
    pub accuracy: f64,
    /// `confusion[label][chosen]`.
    pub confusion: [[usize; 4]; 4],
    pub frame_mse: f64,
}

pub fn evaluate_gate(model: &LakeModel, rollouts: &[Rollout]) -> Result<GateEval> {
    let mut frozen = model.clone();
    frozen.set_trainable(false);
    let mut confusion = [[0usize; 4]; 4];
    let (mut mse, mut batches) = (0.0, 0usize);
    for group in by_length(rollouts).values() {
        for chunk in group.chunks(64) {
            let out = frozen.teacher_forced(chunk)?;
            for (row, add) in confusion.iter_mut().zip(&out.confusion) {
                for (c, a) in row.iter_mut().zip(add) {
                    *c += a;
                }
            }
            mse += out.frame_loss.item();
            batches += 1;
        }
    }
    Ok(GateEval { accuracy: accuracy(&confusion), confusion, frame_mse: mse / batches.max(1) as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanReport {
    pub maps: usize,
    pub goal_rate: f64,
    pub holes: usize,
    pub step_caps: usize,
    /// Maps (as text) whose plan fell into a hole or hit the step cap.
    pub failures: Vec<String>,
}

pub fn evaluate_plans(model: &LakeModel, maps: &[LakeMap]) -> Result<(PlanReport, Vec<Plan>)> {
    let mut plans = Vec::with_capacity(maps.len());
    let mut report = PlanReport { maps: maps.len(), goal_rate: 0.0, holes: 0, step_caps: 0, failures: Vec::new() };
    let mut goals = 0;
    for m in maps {
        let p = model.plan_and_decode(m)?;
        match p.outcome {
            Outcome::Goal => goals += 1,
            Outcome::Hole => report.holes += 1,
            Outcome::StepCap => report.step_caps += 1,
        }
        if p.outcome != Outcome::Goal {
            report.failures.push(m.to_string());
        }
        plans.push(p);
    }
    report.goal_rate = goals as f64 / maps.len().max(1) as f64;
    Ok((report, plans))
}
