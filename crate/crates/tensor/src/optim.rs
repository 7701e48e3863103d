use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Adam {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to `params` from their accumulated gradients and
    /// clears those gradients. Parameters without a gradient are left as is.
    /// The parameter list must be presented in the same order on every call.
    pub fn step(&mut self, params: Vec<&mut Tensor>) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(TensorError::Contract(format!(
                "optimizer tracks {} tensors, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad() else { continue };
            if m.len() != g.len() {
                return Err(TensorError::Contract("parameter size changed".into()));
            }
            let mut data = p.to_vec();
            for i in 0..data.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            *p = Tensor::param(data, p.shape())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Tensor::param(vec![1.0, -1.0], &[2]).unwrap();
        p.mul(&Tensor::new(vec![3.0, -0.5], &[2]).unwrap())
            .unwrap()
            .sum()
            .unwrap()
            .backward()
            .unwrap();
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        opt.step(vec![&mut p]).unwrap();
        let d = p.data();
        assert!((d[0] - 0.9).abs() < 1e-6);
        assert!((d[1] - (-0.9)).abs() < 1e-6);
        assert!(p.grad().is_none());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::param(vec![5.0, -3.0], &[2]).unwrap();
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        for _ in 0..500 {
            p.square().unwrap().sum().unwrap().backward().unwrap();
            opt.step(vec![&mut p]).unwrap();
        }
        assert!(p.data().iter().all(|v| v.abs() < 1e-2));
    }
}
