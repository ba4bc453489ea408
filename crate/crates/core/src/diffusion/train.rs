//! Noise-prediction training loop and the ancestral sampler.

use serde::{Deserialize, Serialize};

use super::data::{patchify, unpatchify, ToyDataset};
use super::model::{DitModel, ForwardOptions, Routing};
use super::schedule::{noised, DiffusionSchedule};
use crate::numerics::{Result, Rng, Tensor, TensorError};
use crate::optim::AdamW;
use crate::recursion::RecursionTrace;
use crate::routing::balance_loss;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Weight of the balance loss, applied whenever there are two or more experts.
    pub balance_weight: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 10_000,
            batch_size: 8,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            balance_weight: 0.01,
            seed: 0,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub balance_loss: f64,
    /// Fraction of routed tokens per expert at this step.
    pub expert_usage: Vec<f64>,
}

/// Training-stream generators, split so routing noise never shifts the data
/// or diffusion noise draws.
struct Streams {
    data: Rng,
    noise: Rng,
    routing: Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        let root = Rng::new(seed);
        Streams { data: root.derive(1), noise: root.derive(2), routing: root.derive(3) }
    }
}

/// Mean-squared noise-prediction loss on one batch, plus the balance loss
/// and per-expert token counts.
pub fn batch_loss(
    model: &DitModel,
    data: &ToyDataset,
    schedule: &DiffusionSchedule,
    indices: &[usize],
    timesteps: &[usize],
    eps: &[f64],
    routing: &mut Routing<'_>,
) -> Result<(Tensor, Option<Tensor>, Vec<usize>)> {
    let cfg = &model.cfg;
    let (c, s, p) = (cfg.channels, cfg.image_size, cfg.patch);
    let n = data.image_len();
    let mut x_t = Vec::with_capacity(indices.len() * n);
    for (k, (&i, &t)) in indices.iter().zip(timesteps).enumerate() {
        x_t.extend(noised(data.image(i), &eps[k * n..(k + 1) * n], schedule.alpha_bar(t)));
    }
    let b = indices.len();
    let shape = [b, cfg.tokens(), cfg.patch_len()];
    let input = Tensor::new(patchify(&x_t, b, c, s, s, p), &shape)?;
    let target = Tensor::new(patchify(eps, b, c, s, s, p), &shape)?;
    let labels: Vec<usize> = indices.iter().map(|&i| data.labels[i]).collect();
    let out = model.forward(&input, timesteps, &labels, routing, &ForwardOptions::default())?;
    let mse = out.eps.sub(&target)?.square().mean();
    let mut counts = vec![0; model.experts()];
    for d in &out.decisions {
        for (m, k) in d.counts().into_iter().enumerate() {
            counts[m] += k;
        }
    }
    let bal = if out.decisions.is_empty() {
        None
    } else {
        let probs: Vec<Tensor> = out.decisions.iter().map(|d| d.soft_probs.clone()).collect();
        let sel: Vec<usize> = out.decisions.iter().flat_map(|d| d.selected.iter().copied()).collect();
        Some(balance_loss(&Tensor::concat(&probs, 0)?, &sel)?)
    };
    Ok((mse, bal, counts))
}

/// Trains every parameter of `model` with AdamW. `on_step` sees each log
/// record and the updated model (for logging and checkpoints).
pub fn train(
    model: &mut DitModel,
    data: &ToyDataset,
    schedule: &DiffusionSchedule,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&LogRecord, &DitModel) -> Result<()>,
) -> Result<Vec<LogRecord>> {
    if cfg.batch_size == 0 || data.is_empty() {
        return Err(TensorError::Config("batch_size and dataset size must be positive".into()));
    }
    if data.classes != model.cfg.classes || data.height != model.cfg.image_size || data.channels != model.cfg.channels {
        return Err(TensorError::Config("dataset does not match the model's image or class configuration".into()));
    }
    let mut streams = Streams::new(cfg.seed);
    let mut opt = AdamW::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.steps);
    let n = data.image_len();
    for step in 1..=cfg.steps {
        let indices: Vec<usize> = (0..cfg.batch_size).map(|_| streams.data.below(data.len())).collect();
        let timesteps: Vec<usize> = (0..cfg.batch_size).map(|_| 1 + streams.noise.below(schedule.steps)).collect();
        let eps = streams.noise.normals(cfg.batch_size * n, 1.0);
        let (mse, bal, counts) =
            batch_loss(model, data, schedule, &indices, &timesteps, &eps, &mut Routing::Sample(&mut streams.routing))?;
        let mut total = mse.clone();
        if let Some(b) = &bal {
            if model.experts() >= 2 && cfg.balance_weight > 0.0 {
                total = total.add(&b.scale(cfg.balance_weight))?;
            }
        }
        let loss = mse.item();
        if !total.item().is_finite() {
            return Err(TensorError::invalid("train", format!("loss diverged at step {step}: {loss}")));
        }
        total.backward()?;
        opt.step(model)?;
        let routed: usize = counts.iter().sum();
        let rec = LogRecord {
            step,
            loss,
            balance_loss: bal.map_or(0.0, |b| b.item()),
            expert_usage: counts.iter().map(|&k| k as f64 / routed.max(1) as f64).collect(),
        };
        on_step(&rec, model)?;
        log.push(rec);
    }
    Ok(log)
}

#[derive(Clone, Debug)]
pub struct SampleOptions {
    pub seed: u64,
    pub latent_steps: Option<usize>,
    pub recursion: bool,
    pub trace: bool,
}

impl SampleOptions {
    pub fn new(seed: u64) -> Self {
        SampleOptions { seed, latent_steps: None, recursion: true, trace: false }
    }
}

pub struct Samples {
    /// `[n, C, H, W]` row-major, clamped to `[-1, 1]`.
    pub images: Vec<f64>,
    /// One trace per recursive layer per diffusion step, in sampling order.
    pub traces: Vec<RecursionTrace>,
}

/// Ancestral sampling of one image per entry of `labels`, from pure noise
/// down to `t = 1`, with noise-free routing.
pub fn sample(
    model: &DitModel,
    schedule: &DiffusionSchedule,
    labels: &[usize],
    opts: &SampleOptions,
) -> Result<Samples> {
    let frozen = model.frozen();
    let cfg = &model.cfg;
    let (c, s, p) = (cfg.channels, cfg.image_size, cfg.patch);
    let b = labels.len();
    let len = b * c * s * s;
    let mut rng = Rng::new(opts.seed).derive(0);
    let mut x = rng.normals(len, 1.0);
    let fwd = ForwardOptions { recursion: opts.recursion, latent_steps: opts.latent_steps, trace: opts.trace };
    let mut traces = Vec::new();
    for t in (1..=schedule.steps).rev() {
        let input = Tensor::new(patchify(&x, b, c, s, s, p), &[b, cfg.tokens(), cfg.patch_len()])?;
        let out = frozen.forward(&input, &vec![t; b], labels, &mut Routing::Greedy, &fwd)?;
        if !out.eps.all_finite() {
            return Err(TensorError::invalid("sample", format!("non-finite prediction at step {t}")));
        }
        traces.extend(out.traces);
        let eps = unpatchify(out.eps.data(), b, c, s, s, p);
        let z = if t > 1 { rng.normals(len, 1.0) } else { vec![0.0; len] };
        x = schedule.reverse_step(&x, &eps, t, &z)?;
    }
    x.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(Samples { images: x, traces })
}
