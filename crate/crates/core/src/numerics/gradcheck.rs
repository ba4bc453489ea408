use super::{Result, Tensor};

/// Central differences `(f(x+h·e_i) - f(x-h·e_i)) / 2h` for every coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let base = x.to_vec();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&Tensor::new(plus, x.shape())?)?;
        let fm = f(&Tensor::new(minus, x.shape())?)?;
        grad.push((fp - fm) / (2.0 * h));
    }
    Tensor::new(grad, x.shape())
}

/// `|a - b| / max(|a|, |b|, 1e-3)`: relative for ordinary magnitudes, absolute
/// near zero where central differences are dominated by rounding.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Per input: the largest coordinate-wise relative error.
    pub max_rel_err: Vec<f64>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }
}

/// Compares `backward()` of `loss(inputs)` with central differences on every
/// coordinate of every input. `loss` must be deterministic.
pub fn check_gradients<F>(inputs: &[Tensor], mut loss: F, h: f64) -> Result<GradReport>
where
    F: FnMut(&[Tensor]) -> Result<Tensor>,
{
    let tracked: Vec<Tensor> = inputs.iter().map(|t| t.with_grad(true)).collect();
    let out = loss(&tracked)?;
    out.backward()?;
    let mut max_rel_err = Vec::with_capacity(inputs.len());
    for (k, t) in tracked.iter().enumerate() {
        let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
        let numeric = finite_diff_grad(
            |probe| {
                let mut args: Vec<Tensor> = tracked.iter().map(Tensor::detach).collect();
                args[k] = probe.clone();
                Ok(loss(&args)?.item())
            },
            t,
            h,
        )?;
        let worst = analytic.iter().zip(numeric.data()).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max);
        max_rel_err.push(worst);
    }
    Ok(GradReport { max_rel_err })
}
