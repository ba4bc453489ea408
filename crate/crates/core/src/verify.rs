//! Finite-difference gradient suite over the differentiable components.

use crate::adapters::{LoraAdapter, Target};
use crate::block::{block_forward, MmditBlockParams};
use crate::numerics::{check_gradients, Result, Rng, Tensor};
use crate::recursion::{recursive_block_forward, RecursionConfig, RecursiveLayer, RoutingMode};
use crate::routing::{balance_loss, gate_logits, select_with_noise, GateInputs, GateNetwork};

/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

pub const SUITE: [&str; 5] = ["mmdit_block", "lora_adapter", "gate_soft_path", "balance_loss", "recursion"];

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub max_rel_err: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOLERANCE
    }
}

fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    Tensor::new(rng.normals(shape.iter().product(), std), shape).expect("shape and length agree")
}

/// Adds a term whose analytic gradient is one but whose value is zero, so
/// backward disagrees with finite differences.
fn corrupted(loss: Tensor, input: &Tensor, on: bool) -> Result<Tensor> {
    if !on {
        return Ok(loss);
    }
    loss.add(&input.straight_through(vec![0.0; input.numel()])?.sum())
}

/// Runs every check in [`SUITE`] once. `corrupt` names an op whose analytic
/// gradient is deliberately broken (negative control).
pub fn gradient_suite(seed: u64, corrupt: Option<&str>) -> Result<Vec<OpReport>> {
    let root = Rng::new(seed);
    let mut out = Vec::with_capacity(SUITE.len());
    for (i, op) in SUITE.iter().enumerate() {
        let mut rng = root.derive(i as u64);
        let bad = corrupt == Some(*op);
        let report = match *op {
            "mmdit_block" => {
                let block = MmditBlockParams::random(8, 2, true, &mut rng)?;
                let inputs = [
                    normal(&[2, 3, 8], 1.0, &mut rng),
                    normal(&[2, 2, 8], 1.0, &mut rng),
                    normal(&[2, 8], 1.0, &mut rng),
                    block.x.wq.detach(),
                    block.x.wo.detach(),
                    block.c.as_ref().expect("text branch").mlp_in.weight.detach(),
                    block.x.modulation.weight.detach(),
                ];
                check_gradients(
                    &inputs,
                    |t| {
                        let mut b = block.clone();
                        b.x.wq = t[3].clone();
                        b.x.wo = t[4].clone();
                        b.c.as_mut().expect("text branch").mlp_in.weight = t[5].clone();
                        b.x.modulation.weight = t[6].clone();
                        let (x, c) = block_forward(&t[0], Some(&t[1]), &t[2], &b)?;
                        let loss = x.tanh().sum().add(&c.expect("text output").square().mean())?;
                        corrupted(loss, &t[0], bad)
                    },
                    STEP,
                )?
            }
            "lora_adapter" => {
                let inputs =
                    [normal(&[5, 8], 1.0, &mut rng), normal(&[3, 8], 0.5, &mut rng), normal(&[8, 3], 0.5, &mut rng)];
                let mut ad = LoraAdapter::init(3, 8, &mut rng)?;
                check_gradients(
                    &inputs,
                    |t| {
                        ad.set(Target::V, t[1].clone(), t[2].clone());
                        corrupted(ad.lora_apply(Target::V, &t[0])?.tanh().sum(), &t[0], bad)
                    },
                    STEP,
                )?
            }
            "gate_soft_path" => {
                let gate = GateNetwork::init(8, 3, &mut rng)?;
                let x = normal(&[2, 3, 8], 1.0, &mut rng);
                let y = normal(&[2, 8], 1.0, &mut rng);
                let noise: Vec<f64> = (0..18).map(|_| rng.gumbel()).collect();
                let w = normal(&[6, 3], 1.0, &mut rng);
                let inputs = [x, y, gate.hidden.weight.detach(), gate.out.weight.detach()];
                check_gradients(
                    &inputs,
                    |t| {
                        let mut g = gate.clone();
                        g.hidden.weight = t[2].clone();
                        g.out.weight = t[3].clone();
                        let logits = gate_logits(&t[0], Some(&t[1]), 2, &g, GateInputs::Full)?;
                        let d = select_with_noise(&logits, 0.7, Some(noise.clone()), None)?;
                        corrupted(d.soft_probs.mul(&w)?.sum(), &t[0], bad)
                    },
                    STEP,
                )?
            }
            "balance_loss" => {
                let logits = normal(&[10, 4], 1.0, &mut rng);
                let selected: Vec<usize> = (0..10).map(|_| rng.below(4)).collect();
                check_gradients(
                    &[logits],
                    |t| corrupted(balance_loss(&t[0].softmax(1)?, &selected)?, &t[0], bad),
                    STEP,
                )?
            }
            "recursion" => {
                let block = MmditBlockParams::random(8, 2, true, &mut rng)?;
                let mut layer = RecursiveLayer::init(2, 2, 8, &mut rng)?;
                // The gate only gets a straight-through surrogate; a zero gate
                // keeps it out of the checked gradients.
                layer.gate = GateNetwork::zeros(8, 2);
                let y = normal(&[2, 8], 1.0, &mut rng);
                let mut inputs = vec![normal(&[2, 3, 8], 1.0, &mut rng), normal(&[2, 2, 8], 1.0, &mut rng)];
                for _ in 0..2 {
                    inputs.push(normal(&[2, 8], 0.5, &mut rng));
                    inputs.push(normal(&[8, 2], 0.5, &mut rng));
                }
                let forced: Vec<Vec<usize>> = (0..2).map(|_| (0..6).map(|_| rng.below(2)).collect()).collect();
                let cfg = RecursionConfig::new(2, 2, 1.0);
                check_gradients(
                    &inputs,
                    |t| {
                        let mut l = layer.clone();
                        for e in 0..2 {
                            for target in Target::ALL {
                                l.bank.adapters[e].set(target, t[2 + 2 * e].clone(), t[3 + 2 * e].clone());
                            }
                        }
                        let out = recursive_block_forward(
                            &t[0],
                            Some(&t[1]),
                            &y,
                            &block,
                            &l,
                            &cfg,
                            RoutingMode::Force(&forced),
                            false,
                        )?;
                        let loss = out.x.tanh().sum().add(&out.c.expect("text output").square().mean())?;
                        corrupted(loss, &t[0], bad)
                    },
                    STEP,
                )?
            }
            _ => unreachable!("suite entries are matched above"),
        };
        out.push(OpReport { op, max_rel_err: report.worst() });
    }
    Ok(out)
}
