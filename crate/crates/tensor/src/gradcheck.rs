use crate::error::{Result, TensorError};
use crate::tensor::{no_grad, Tensor};

/// Largest relative disagreement between the backward-pass gradient of `f`
/// at `x` and central differences `(f(x+eps·eᵢ) − f(x−eps·eᵢ)) / (2·eps)`.
///
/// Each coordinate's error is `|analytic − numeric| / max(|analytic|, |numeric|, s)`
/// with `s = 1e-2 · max_j |analytic_j|` (and at least 1e-12), so coordinates
/// whose gradient is orders of magnitude below the largest one are compared at
/// the scale of the gradient as a whole rather than against rounding noise.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let (analytic, numeric) = gradients(&f, x, eps)?;
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-2 * scale).max(1e-12);
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max))
}

/// Backward-pass and central-difference gradients of `f` at `x`.
pub fn gradients<F>(f: &F, x: &Tensor, eps: f64) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = x.with_requires_grad(true);
    let y = f(&leaf)?;
    if y.numel() != 1 {
        return Err(TensorError::Contract(
            "grad_check needs a scalar function".into(),
        ));
    }
    y.backward()?;
    let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let _g = no_grad();
    let base = x.to_vec();
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = f(&Tensor::new(plus, x.shape())?)?.item()?;
        let fm = f(&Tensor::new(minus, x.shape())?)?.item()?;
        numeric.push((fp - fm) / (2.0 * eps));
    }
    Ok((analytic, numeric))
}
