use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::shape::{broadcast_map, broadcast_shapes};
use crate::tensor::{is_checked, Tensor};

/// Sums `g` (laid out over the broadcast output) back onto the input shape.
fn reduce_broadcast(g: &[f64], map: Option<&[usize]>, in_len: usize) -> Vec<f64> {
    match map {
        None => g.to_vec(),
        Some(map) => {
            let mut out = vec![0.0; in_len];
            for (gi, &m) in g.iter().zip(map) {
                out[m] += gi;
            }
            out
        }
    }
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline]
    fn apply(self, x: f64, y: f64) -> f64 {
        match self {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        }
    }
}

fn binary(a: &Tensor, b: &Tensor, kind: Binary) -> Result<Tensor> {
    let name = kind.name();
    let out_shape = if a.shape() == b.shape() {
        a.shape().to_vec()
    } else {
        broadcast_shapes(a.shape(), b.shape()).map_err(|_| TensorError::Dimension {
            op: name,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        })?
    };
    let map_a =
        (a.shape() != out_shape.as_slice()).then(|| Arc::new(broadcast_map(a.shape(), &out_shape)));
    let map_b =
        (b.shape() != out_shape.as_slice()).then(|| Arc::new(broadcast_map(b.shape(), &out_shape)));
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = match (&map_a, &map_b) {
        (None, None) => ad.iter().zip(bd).map(|(&x, &y)| kind.apply(x, y)).collect(),
        (Some(ma), None) => ma
            .iter()
            .zip(bd)
            .map(|(&i, &y)| kind.apply(ad[i], y))
            .collect(),
        (None, Some(mb)) => ad
            .iter()
            .zip(mb.iter())
            .map(|(&x, &j)| kind.apply(x, bd[j]))
            .collect(),
        (Some(ma), Some(mb)) => ma
            .iter()
            .zip(mb.iter())
            .map(|(&i, &j)| kind.apply(ad[i], bd[j]))
            .collect(),
    };
    if is_checked() && matches!(kind, Binary::Div) && data.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::Domain {
            op: "div",
            detail: "division produced a non-finite value".into(),
        });
    }
    Tensor::from_op(
        name,
        data,
        out_shape,
        vec![a.clone(), b.clone()],
        Box::new(move |g, parents, _out| {
            let (pa, pb) = (&parents[0], &parents[1]);
            let ga = pa.requires_grad().then(|| {
                let local: Vec<f64> = match kind {
                    Binary::Add | Binary::Sub => g.to_vec(),
                    Binary::Mul => g
                        .iter()
                        .enumerate()
                        .map(|(k, gi)| gi * pb.data()[map_b.as_ref().map_or(k, |m| m[k])])
                        .collect(),
                    Binary::Div => g
                        .iter()
                        .enumerate()
                        .map(|(k, gi)| gi / pb.data()[map_b.as_ref().map_or(k, |m| m[k])])
                        .collect(),
                };
                reduce_broadcast(&local, map_a.as_deref().map(|v| v.as_slice()), pa.numel())
            });
            let gb = pb.requires_grad().then(|| {
                let local: Vec<f64> = match kind {
                    Binary::Add => g.to_vec(),
                    Binary::Sub => g.iter().map(|gi| -gi).collect(),
                    Binary::Mul => g
                        .iter()
                        .enumerate()
                        .map(|(k, gi)| gi * pa.data()[map_a.as_ref().map_or(k, |m| m[k])])
                        .collect(),
                    Binary::Div => g
                        .iter()
                        .enumerate()
                        .map(|(k, gi)| {
                            let x = pa.data()[map_a.as_ref().map_or(k, |m| m[k])];
                            let y = pb.data()[map_b.as_ref().map_or(k, |m| m[k])];
                            -gi * x / (y * y)
                        })
                        .collect(),
                };
                reduce_broadcast(&local, map_b.as_deref().map(|v| v.as_slice()), pb.numel())
            });
            vec![ga, gb]
        }),
    )
}

/// Elementwise op with derivative expressed through input `x` and output `y`.
fn unary(
    x: &Tensor,
    name: &'static str,
    f: impl Fn(f64) -> f64,
    df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(
        name,
        data,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g, parents, out| {
            let xd = parents[0].data();
            vec![Some(
                g.iter()
                    .zip(xd)
                    .zip(out)
                    .map(|((gi, &xi), &yi)| gi * df(xi, yi))
                    .collect(),
            )]
        }),
    )
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Binary::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Binary::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Binary::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Binary::Div)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        unary(self, "add_scalar", |v| v + c, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Result<Tensor> {
        unary(self, "mul_scalar", |v| v * c, move |_, _| c)
    }

    /// Division by a constant; exact where multiplying by the reciprocal is not
    /// (e.g. a sum of `n` ones divided by `n` is exactly one).
    pub fn div_scalar(&self, c: f64) -> Result<Tensor> {
        if is_checked() && c == 0.0 {
            return Err(TensorError::Domain {
                op: "div_scalar",
                detail: "division by zero".into(),
            });
        }
        unary(self, "div_scalar", move |v| v / c, move |_, _| 1.0 / c)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Result<Tensor> {
        unary(self, "square", |v| v * v, |x, _| 2.0 * x)
    }

    pub fn exp(&self) -> Result<Tensor> {
        unary(self, "exp", f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Result<Tensor> {
        if is_checked() {
            if let Some(v) = self.data().iter().find(|v| **v <= 0.0) {
                return Err(TensorError::Domain {
                    op: "log",
                    detail: format!("argument {v} is not positive"),
                });
            }
        }
        unary(self, "log", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if is_checked() {
            if let Some(v) = self.data().iter().find(|v| **v < 0.0) {
                return Err(TensorError::Domain {
                    op: "sqrt",
                    detail: format!("argument {v} is negative"),
                });
            }
        }
        // zero derivative at 0 keeps sqrt(0) from poisoning the graph
        unary(
            self,
            "sqrt",
            f64::sqrt,
            |_, y| if y > 0.0 { 0.5 / y } else { 0.0 },
        )
    }

    pub fn tanh(&self) -> Result<Tensor> {
        unary(self, "tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        unary(self, "sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&self) -> Result<Tensor> {
        unary(
            self,
            "relu",
            |v| v.max(0.0),
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        unary(
            self,
            "leaky_relu",
            move |v| if v > 0.0 { v } else { slope * v },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// x·sigmoid(x).
    pub fn silu(&self) -> Result<Tensor> {
        unary(
            self,
            "silu",
            |v| v * sigmoid(v),
            |x, _| {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// |x| with subgradient 0 at the origin.
    pub fn abs(&self) -> Result<Tensor> {
        unary(self, "abs", f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Clamps values; the gradient passes only where the input lies inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Result<Tensor> {
        unary(
            self,
            "clamp",
            move |v| v.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }
}
