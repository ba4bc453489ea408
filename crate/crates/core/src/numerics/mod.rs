//! Tensor arithmetic, reverse-mode gradients, deterministic randomness and
//! the finite-difference oracle used to verify gradients.

mod gemm;
mod gradcheck;
mod rng;
mod tensor;

pub use gradcheck::{check_gradients, finite_diff_grad, relative_error, GradReport};
pub use rng::Rng;
pub use tensor::Tensor;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-6;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("invalid argument to {op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("configuration error: {0}")]
    Config(String),
}

impl TensorError {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Invalid { op, msg: msg.into() }
    }
}

/// Interleaved sin/cos embedding of `t`: element `2i` is `sin(t·ω_i)`,
/// element `2i+1` is `cos(t·ω_i)`, with `ω_i = 10000^(-2i/dim)`.
pub fn sinusoidal_embed(t: f64, dim: usize) -> Result<Tensor> {
    Ok(Tensor::new(sinusoidal_values(t, dim)?, &[dim]).expect("length matches"))
}

/// Stacks [`sinusoidal_embed`] rows for several positions into `[len, dim]`.
pub fn sinusoidal_table(ts: &[f64], dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(sinusoidal_values(t, dim)?);
    }
    Tensor::new(data, &[ts.len(), dim])
}

fn sinusoidal_values(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(TensorError::Config(format!("sinusoidal dimension must be even and positive, got {dim}")));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
