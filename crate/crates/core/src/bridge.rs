//! Gaussian bridge between two endpoint states: closed-form posteriors, the
//! restricted bridge on a sub-interval, and the Markov sampling chain.

use hazebridge_tensor::{no_grad, Tensor};

use crate::error::{Error, Result};
use crate::rng::NoiseStream;

/// Uniform time grid `t_i = i / N` with diffusion strength `tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BridgeSchedule {
    n_intervals: usize,
    tau: f64,
}

impl BridgeSchedule {
    pub fn new(n_intervals: usize, tau: f64) -> Result<BridgeSchedule> {
        if n_intervals == 0 {
            return Err(Error::Config("bridge needs at least one interval".into()));
        }
        if !(tau >= 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!(
                "tau must be a finite nonnegative number, got {tau}"
            )));
        }
        Ok(BridgeSchedule { n_intervals, tau })
    }

    pub fn n_intervals(&self) -> usize {
        self.n_intervals
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.n_intervals as f64
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..=self.n_intervals).map(|i| self.time(i)).collect()
    }

    /// Same `tau` on a grid of `n` intervals.
    pub fn with_intervals(&self, n: usize) -> Result<BridgeSchedule> {
        BridgeSchedule::new(n, self.tau)
    }
}

/// Isotropic Gaussian `N(mean, variance·I)`.
#[derive(Debug, Clone)]
pub struct GaussianParams {
    pub mean: Tensor,
    pub variance: f64,
}

impl GaussianParams {
    /// One draw, outside the gradient graph.
    pub fn sample(&self, noise: &mut dyn NoiseStream) -> Result<Tensor> {
        let _g = no_grad();
        if self.variance == 0.0 {
            return Ok(self.mean.detach());
        }
        let z = noise.standard_normal(self.mean.shape());
        let sd = self.variance.sqrt();
        let data = self
            .mean
            .data()
            .iter()
            .zip(&z)
            .map(|(m, e)| m + sd * e)
            .collect();
        Ok(Tensor::new(data, self.mean.shape())?)
    }
}

/// `s·b + (1−s)·a`.
fn lerp(a: &Tensor, b: &Tensor, s: f64) -> Result<Tensor> {
    Ok(b.mul_scalar(s)?.add(&a.mul_scalar(1.0 - s)?)?)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Contract(format!(
            "{op}: endpoint shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Law of the bridge state at `t` given both endpoints.
pub fn bridge_posterior(x0: &Tensor, x1: &Tensor, t: f64, tau: f64) -> Result<GaussianParams> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain {
            op: "bridge_posterior",
            detail: format!("t = {t} outside [0, 1]"),
        });
    }
    same_shape("bridge_posterior", x0, x1)?;
    Ok(GaussianParams {
        mean: lerp(x0, x1, t)?,
        variance: t * (1.0 - t) * tau,
    })
}

/// Law at `t` of the bridge restricted to `[t_a, t_b]` with endpoint states `x_a`, `x_b`.
pub fn sub_bridge_posterior(
    x_a: &Tensor,
    x_b: &Tensor,
    t: f64,
    t_a: f64,
    t_b: f64,
    tau: f64,
) -> Result<GaussianParams> {
    if t_a >= t_b {
        return Err(Error::Domain {
            op: "sub_bridge_posterior",
            detail: format!("degenerate interval [{t_a}, {t_b}]"),
        });
    }
    if !(t_a..=t_b).contains(&t) {
        return Err(Error::Domain {
            op: "sub_bridge_posterior",
            detail: format!("t = {t} outside [{t_a}, {t_b}]"),
        });
    }
    same_shape("sub_bridge_posterior", x_a, x_b)?;
    let s = (t - t_a) / (t_b - t_a);
    Ok(GaussianParams {
        mean: lerp(x_a, x_b, s)?,
        variance: s * (1.0 - s) * tau * (t_b - t_a),
    })
}

/// Parameters of one chain transition from `t_j` to `t_next` toward the predicted endpoint.
pub fn markov_step_params(
    x_tj: &Tensor,
    x1_pred: &Tensor,
    t_j: f64,
    t_next: f64,
    tau: f64,
) -> Result<GaussianParams> {
    if !(t_j < t_next && t_next <= 1.0 && t_j >= 0.0) {
        return Err(Error::Contract(format!(
            "markov step needs 0 <= t_j < t_next <= 1, got {t_j} -> {t_next}"
        )));
    }
    same_shape("markov_step", x_tj, x1_pred)?;
    let _g = no_grad();
    let s = (t_next - t_j) / (1.0 - t_j);
    Ok(GaussianParams {
        mean: lerp(x_tj, x1_pred, s)?,
        variance: s * (1.0 - s) * tau * (1.0 - t_j),
    })
}

/// Samples `x(t_next)`; never recorded for differentiation. At `t_next = 1`
/// the result is `x1_pred` exactly.
pub fn markov_step(
    x_tj: &Tensor,
    x1_pred: &Tensor,
    t_j: f64,
    t_next: f64,
    tau: f64,
    noise: &mut dyn NoiseStream,
) -> Result<Tensor> {
    if t_next == 1.0 {
        same_shape("markov_step", x_tj, x1_pred)?;
        return Ok(x1_pred.detach());
    }
    markov_step_params(x_tj, x1_pred, t_j, t_next, tau)?.sample(noise)
}

/// Runs `i` transitions on `schedule`, asking `predict(x, t_j)` for the
/// endpoint at each one, and returns `x(t_i)`.
pub fn roll_chain<F>(
    x0: &Tensor,
    mut predict: F,
    i: usize,
    schedule: &BridgeSchedule,
    noise: &mut dyn NoiseStream,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if i > schedule.n_intervals() {
        return Err(Error::Contract(format!(
            "chain length {i} exceeds {} intervals",
            schedule.n_intervals()
        )));
    }
    let _g = no_grad();
    let mut x = x0.detach();
    for j in 0..i {
        let (t_j, t_next) = (schedule.time(j), schedule.time(j + 1));
        let x1 = predict(&x, t_j)?;
        x = markov_step(&x, &x1, t_j, t_next, schedule.tau(), noise)?;
    }
    Ok(x)
}
