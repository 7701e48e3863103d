//! Parameter containers and the two layer types every network here is built from.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::ops::conv::Conv2dSpec;
use crate::tensor::Tensor;

/// Anything owning trainable tensors. `named_params` and `params_mut` must
/// list parameters in the same order.
pub trait Module {
    fn named_params(&self) -> Vec<(String, &Tensor)>;

    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn zero_grad(&self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }

    /// Owned copies of all parameters, keyed by name.
    fn state(&self) -> Vec<(String, Tensor)> {
        self.named_params()
            .into_iter()
            .map(|(n, t)| (n, t.detach()))
            .collect()
    }

    /// Replaces every parameter with the same-named, same-shaped entry of `state`.
    fn load_state(&mut self, state: &HashMap<String, Tensor>) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = self
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let mut fresh = Vec::with_capacity(names.len());
        for (name, shape) in &names {
            let src = state
                .get(name)
                .ok_or_else(|| TensorError::Contract(format!("missing parameter {name}")))?;
            if src.shape() != shape.as_slice() {
                return Err(TensorError::Contract(format!(
                    "parameter {name}: stored shape {:?}, expected {:?}",
                    src.shape(),
                    shape
                )));
            }
            fresh.push(src.with_requires_grad(true));
        }
        for (slot, t) in self.params_mut().into_iter().zip(fresh) {
            *slot = t;
        }
        Ok(())
    }
}

pub fn prefixed<'a>(prefix: &str, inner: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    inner
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

pub(crate) fn uniform_param<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::param(data, shape).expect("shape matches data")
}

/// Fully connected layer `y = x·W + b` with `W` stored as (in, out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Linear {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Linear {
            weight: uniform_param(rng, &[fan_in, fan_out], bound),
            bias: uniform_param(rng, &[fan_out], bound),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            weight: Tensor::zeros(&[fan_in, fan_out]).with_requires_grad(true),
            bias: Tensor::zeros(&[fan_out]).with_requires_grad(true),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add(&self.bias)
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

impl Module for Linear {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Conv2d {
        let bound = 1.0 / ((cin * kernel * kernel) as f64).sqrt();
        Conv2d {
            weight: uniform_param(rng, &[cout, cin, kernel, kernel], bound),
            bias: uniform_param(rng, &[cout], bound),
            spec: Conv2dSpec { stride, padding },
        }
    }

    pub fn zeros(cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize) -> Conv2d {
        Conv2d {
            weight: Tensor::zeros(&[cout, cin, kernel, kernel]).with_requires_grad(true),
            bias: Tensor::zeros(&[cout]).with_requires_grad(true),
            spec: Conv2dSpec { stride, padding },
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, Some(&self.bias), self.spec)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

impl Module for Conv2d {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

impl<M: Module> Module for Vec<M> {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.iter()
            .enumerate()
            .flat_map(|(i, m)| prefixed(&i.to_string(), m.named_params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().flat_map(|m| m.params_mut()).collect()
    }
}
