//! The joint-attention transformer block: per-modality adaptive modulation,
//! multi-head attention over the concatenated vision and text tokens, gated
//! residuals and a gated GELU MLP.
//!
//! Token tensors are `[batch, tokens, dim]`; the conditioning vector `y` is
//! `[batch, dim]`. A block without a text branch is a plain DiT block
//! (self-attention over vision tokens only).

use crate::nn::{gaussian, join, Linear, Module};
use crate::numerics::{Result, Rng, Tensor, TensorError, LN_EPS};

/// Projections, MLP and modulation head of one modality.
#[derive(Clone, Debug)]
pub struct BranchParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    /// `y -> [alpha, beta, gamma, delta, epsilon, zeta]`, each of width `dim`.
    pub modulation: Linear,
}

impl BranchParams {
    /// Standard init: projections `N(0, 1/D)`, identity output projection,
    /// modulation head zero with unit bias on the two scales so the residual
    /// gates start at zero and the block is the identity.
    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let mut modulation = Linear::zeros(dim, 6 * dim, true);
        let mut bias = vec![0.0; 6 * dim];
        bias[..dim].fill(1.0); // alpha
        bias[3 * dim..4 * dim].fill(1.0); // delta
        modulation.bias = Some(Tensor::param(bias, &[6 * dim]).expect("sized"));
        BranchParams {
            wq: gaussian(&[dim, dim], std, rng),
            wk: gaussian(&[dim, dim], std, rng),
            wv: gaussian(&[dim, dim], std, rng),
            wo: Tensor::eye(dim).with_grad(true),
            mlp_in: Linear::new(dim, 4 * dim, true, std, rng),
            mlp_out: Linear::new(4 * dim, dim, true, 0.5 * std, rng),
            modulation,
        }
    }

    /// Every tensor random, including the modulation head, so no path is
    /// trivially gated off. Used by gradient and oracle checks.
    pub fn random(dim: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        let mut modulation = Linear::new(dim, 6 * dim, true, 0.3 * std, rng);
        modulation.bias = Some(gaussian(&[6 * dim], 0.5, rng));
        let mut mlp_in = Linear::new(dim, 4 * dim, true, std, rng);
        mlp_in.bias = Some(gaussian(&[4 * dim], 0.1, rng));
        let mut mlp_out = Linear::new(4 * dim, dim, true, 0.5 * std, rng);
        mlp_out.bias = Some(gaussian(&[dim], 0.1, rng));
        BranchParams {
            wq: gaussian(&[dim, dim], std, rng),
            wk: gaussian(&[dim, dim], std, rng),
            wv: gaussian(&[dim, dim], std, rng),
            wo: gaussian(&[dim, dim], std, rng),
            mlp_in,
            mlp_out,
            modulation,
        }
    }

    fn modulation_vectors(&self, y: &Tensor, dim: usize) -> Result<ModVectors> {
        let b = y.shape()[0];
        let m = self.modulation.forward(y)?.reshape(&[b, 1, 6 * dim])?;
        let part = |i: usize| m.narrow(2, i * dim, dim);
        Ok(ModVectors {
            alpha: part(0)?,
            beta: part(1)?,
            gamma: part(2)?,
            delta: part(3)?,
            epsilon: part(4)?,
            zeta: part(5)?,
        })
    }

    /// Vision-style projection of modulated tokens with the frozen weights.
    pub fn project(&self, tokens: &Tensor) -> Result<Qkv> {
        Ok(Qkv { q: tokens.matmul(&self.wq)?, k: tokens.matmul(&self.wk)?, v: tokens.matmul(&self.wv)? })
    }

    pub fn mlp(&self, h: &Tensor) -> Result<Tensor> {
        self.mlp_out.forward(&self.mlp_in.forward(h)?.gelu())
    }
}

impl Module for BranchParams {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(join(prefix, "wq"), &mut self.wq);
        f(join(prefix, "wk"), &mut self.wk);
        f(join(prefix, "wv"), &mut self.wv);
        f(join(prefix, "wo"), &mut self.wo);
        self.mlp_in.visit_params(&join(prefix, "mlp_in"), f);
        self.mlp_out.visit_params(&join(prefix, "mlp_out"), f);
        self.modulation.visit_params(&join(prefix, "modulation"), f);
    }
}

/// Modulation of one modality, each `[batch, 1, dim]`.
#[derive(Clone, Debug)]
pub struct ModVectors {
    pub alpha: Tensor,
    pub beta: Tensor,
    pub gamma: Tensor,
    pub delta: Tensor,
    pub epsilon: Tensor,
    pub zeta: Tensor,
}

#[derive(Clone, Debug)]
pub struct ModulationParams {
    pub x: ModVectors,
    pub c: Option<ModVectors>,
}

/// Query, key and value tokens, each `[batch, tokens, dim]`.
#[derive(Clone, Debug)]
pub struct Qkv {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug)]
pub struct MmditBlockParams {
    pub dim: usize,
    pub heads: usize,
    pub x: BranchParams,
    /// Text branch; `None` for a self-attention (DiT) block.
    pub c: Option<BranchParams>,
}

impl MmditBlockParams {
    pub fn init(dim: usize, heads: usize, text_branch: bool, rng: &mut Rng) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(MmditBlockParams {
            dim,
            heads,
            x: BranchParams::init(dim, rng),
            c: text_branch.then(|| BranchParams::init(dim, rng)),
        })
    }

    pub fn random(dim: usize, heads: usize, text_branch: bool, rng: &mut Rng) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(MmditBlockParams {
            dim,
            heads,
            x: BranchParams::random(dim, rng),
            c: text_branch.then(|| BranchParams::random(dim, rng)),
        })
    }

    /// Runs the modulation heads on the conditioning vector `y: [batch, dim]`.
    pub fn modulation(&self, y: &Tensor) -> Result<ModulationParams> {
        if y.rank() != 2 || y.shape()[1] != self.dim {
            return Err(TensorError::Shape { op: "modulation", lhs: y.shape().to_vec(), rhs: vec![0, self.dim] });
        }
        Ok(ModulationParams {
            x: self.x.modulation_vectors(y, self.dim)?,
            c: self.c.as_ref().map(|c| c.modulation_vectors(y, self.dim)).transpose()?,
        })
    }

    fn check_tokens(&self, t: &Tensor, what: &'static str) -> Result<()> {
        if t.rank() != 3 || t.shape()[2] != self.dim {
            return Err(TensorError::Shape { op: what, lhs: t.shape().to_vec(), rhs: vec![0, 0, self.dim] });
        }
        Ok(())
    }
}

impl Module for MmditBlockParams {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.x.visit_params(&join(prefix, "x"), f);
        if let Some(c) = self.c.as_mut() {
            c.visit_params(&join(prefix, "c"), f);
        }
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(TensorError::Config(format!("dim {dim} is not divisible by heads {heads}")));
    }
    Ok(())
}

/// `scale ⊙ LN(tokens) + shift`, row-wise over the last axis.
pub fn modulate(tokens: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let d = *tokens.shape().last().unwrap_or(&0);
    for v in [scale, shift] {
        if v.shape().last() != Some(&d) {
            return Err(TensorError::Shape { op: "modulate", lhs: tokens.shape().to_vec(), rhs: v.shape().to_vec() });
        }
    }
    tokens.layernorm(tokens.rank() - 1, LN_EPS)?.mul(scale)?.add(shift)
}

fn split_heads(t: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    t.reshape(&[b, n, heads, d / heads])?.permute(&[0, 2, 1, 3])?.reshape(&[b * heads, n, d / heads])
}

fn merge_heads(t: &Tensor, batch: usize, heads: usize) -> Result<Tensor> {
    let (n, dh) = (t.shape()[1], t.shape()[2]);
    t.reshape(&[batch, heads, n, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[batch, n, heads * dh])
}

/// Per-head attention probabilities `[batch*heads, queries, keys]`.
pub fn attention_probs(q: &Tensor, k: &Tensor, heads: usize) -> Result<Tensor> {
    let dh = q.shape()[2] / heads;
    let qh = split_heads(q, heads)?;
    let kh = split_heads(k, heads)?;
    qh.matmul_t(&kh)?.scale(1.0 / (dh as f64).sqrt()).softmax(2)
}

/// Multi-head attention over the per-image concatenation `[vision; text]`,
/// scaled by `1/sqrt(dim/heads)`, split back into the two streams. No output
/// projection.
pub fn attend(vision: &Qkv, text: Option<&Qkv>, heads: usize) -> Result<(Tensor, Option<Tensor>)> {
    let (b, nx, d) = (vision.q.shape()[0], vision.q.shape()[1], vision.q.shape()[2]);
    let (q, k, v) = match text {
        Some(t) => (
            Tensor::concat(&[vision.q.clone(), t.q.clone()], 1)?,
            Tensor::concat(&[vision.k.clone(), t.k.clone()], 1)?,
            Tensor::concat(&[vision.v.clone(), t.v.clone()], 1)?,
        ),
        None => (vision.q.clone(), vision.k.clone(), vision.v.clone()),
    };
    let probs = attention_probs(&q, &k, heads)?;
    let out = merge_heads(&probs.matmul(&split_heads(&v, heads)?)?, b, heads)?;
    debug_assert_eq!(out.shape()[2], d);
    let n = out.shape()[1];
    let ax = out.narrow(1, 0, nx)?;
    let ac = if n > nx { Some(out.narrow(1, nx, n - nx)?) } else { None };
    Ok((ax, ac))
}

/// Joint attention of already-modulated token streams, including the
/// per-branch output projection.
pub fn joint_attention(
    x_tokens: &Tensor,
    c_tokens: Option<&Tensor>,
    params: &MmditBlockParams,
) -> Result<(Tensor, Option<Tensor>)> {
    params.check_tokens(x_tokens, "joint_attention")?;
    let vision = params.x.project(x_tokens)?;
    let text = text_qkv(c_tokens, params)?;
    let (ax, ac) = attend(&vision, text.as_ref(), params.heads)?;
    let ax = ax.matmul(&params.x.wo)?;
    let ac = match (ac, &params.c) {
        (Some(a), Some(c)) => Some(a.matmul(&c.wo)?),
        _ => None,
    };
    Ok((ax, ac))
}

/// Projects the modulated text tokens with the (frozen) text-branch weights.
pub fn text_qkv(c_tokens: Option<&Tensor>, params: &MmditBlockParams) -> Result<Option<Qkv>> {
    match (c_tokens, &params.c) {
        (None, _) => Ok(None),
        (Some(c), Some(branch)) => {
            params.check_tokens(c, "joint_attention")?;
            if c.shape()[0] == 0 || c.shape()[1] == 0 {
                return Ok(None);
            }
            Ok(Some(branch.project(c)?))
        }
        (Some(_), None) => Err(TensorError::Config("text tokens given to a block without a text branch".into())),
    }
}

/// `h + gamma ⊙ attn_out`, the gated attention residual (attn_out already projected).
pub fn attention_residual(h: &Tensor, gamma: &Tensor, attn_out: &Tensor) -> Result<Tensor> {
    h.add(&gamma.mul(attn_out)?)
}

/// `h + zeta ⊙ MLP(delta ⊙ LN(h) + epsilon)`.
pub fn mlp_residual(h: &Tensor, m: &ModVectors, branch: &BranchParams) -> Result<Tensor> {
    let inner = modulate(h, &m.delta, &m.epsilon)?;
    h.add(&m.zeta.mul(&branch.mlp(&inner)?)?)
}

/// One full block with modulation computed from `y`.
pub fn block_forward(
    x: &Tensor,
    c: Option<&Tensor>,
    y: &Tensor,
    params: &MmditBlockParams,
) -> Result<(Tensor, Option<Tensor>)> {
    let m = params.modulation(y)?;
    block_forward_modulated(x, c, &m, params)
}

pub fn block_forward_modulated(
    x: &Tensor,
    c: Option<&Tensor>,
    m: &ModulationParams,
    params: &MmditBlockParams,
) -> Result<(Tensor, Option<Tensor>)> {
    params.check_tokens(x, "block_forward")?;
    let x_mod = modulate(x, &m.x.alpha, &m.x.beta)?;
    let c_mod = match (c, &m.c) {
        (Some(c), Some(mc)) => Some(modulate(c, &mc.alpha, &mc.beta)?),
        (Some(_), None) => {
            return Err(TensorError::Config("text tokens given to a block without a text branch".into()))
        }
        _ => None,
    };
    let (ax, ac) = joint_attention(&x_mod, c_mod.as_ref(), params)?;
    finish_block(x, c, &ax, ac.as_ref(), m, params)
}

/// Gated attention residual followed by the gated MLP residual, per stream.
pub fn finish_block(
    x: &Tensor,
    c: Option<&Tensor>,
    ax: &Tensor,
    ac: Option<&Tensor>,
    m: &ModulationParams,
    params: &MmditBlockParams,
) -> Result<(Tensor, Option<Tensor>)> {
    let x1 = attention_residual(x, &m.x.gamma, ax)?;
    let x2 = mlp_residual(&x1, &m.x, &params.x)?;
    let c2 = match (c, ac, &m.c, &params.c) {
        (Some(c), Some(ac), Some(mc), Some(branch)) => {
            let c1 = attention_residual(c, &mc.gamma, ac)?;
            Some(mlp_residual(&c1, mc, branch)?)
        }
        (Some(c), None, Some(mc), Some(branch)) => Some(mlp_residual(c, mc, branch)?),
        _ => None,
    };
    Ok((x2, c2))
}
