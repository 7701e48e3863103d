use crate::error::Result;
use crate::shape::{check_axis, split_at_axis};
use crate::tensor::Tensor;

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

impl Tensor {
    /// Sum of all elements as a 0-d tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let total: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![total],
            vec![],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel().max(1);
        self.sum()?.div_scalar(n as f64)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis("sum_axis", self.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &x[(o * len + k) * inner..(o * len + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
            }
        }
        Tensor::from_op(
            "sum_axis",
            out,
            reduced_shape(self.shape(), axis, keepdim),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for k in 0..len {
                        gx[(o * len + k) * inner..(o * len + k + 1) * inner].copy_from_slice(src);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis("mean_axis", self.shape(), axis)?;
        let len = self.shape()[axis].max(1);
        self.sum_axis(axis, keepdim)?.div_scalar(len as f64)
    }

    /// Sums over several axes (any order), keeping them as size-1 extents when asked.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut out = self.clone();
        for &ax in sorted.iter().rev() {
            out = out.sum_axis(ax, keepdim)?;
        }
        Ok(out)
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Result<Tensor> {
        let count: usize = axes
            .iter()
            .map(|&a| self.shape().get(a).copied().unwrap_or(1))
            .product();
        self.sum_axes(axes, keepdim)?
            .div_scalar(count.max(1) as f64)
    }

    /// Minimum along an axis; the gradient goes to the first minimizer.
    pub fn min_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.extreme_axis(axis, keepdim, true)
    }

    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.extreme_axis(axis, keepdim, false)
    }

    fn extreme_axis(&self, axis: usize, keepdim: bool, min: bool) -> Result<Tensor> {
        check_axis("min/max_axis", self.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = x[o * len * inner + i];
                let mut best_k = 0;
                for k in 1..len {
                    let v = x[(o * len + k) * inner + i];
                    if (min && v < best) || (!min && v > best) {
                        best = v;
                        best_k = k;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = (o * len + best_k) * inner + i;
            }
        }
        Tensor::from_op(
            if min { "min_axis" } else { "max_axis" },
            out,
            reduced_shape(self.shape(), axis, keepdim),
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; outer * len * inner];
                for (gi, &a) in g.iter().zip(&arg) {
                    gx[a] += gi;
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let m = (0..len)
                    .map(|k| x[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (x[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        Tensor::from_op(
            "softmax",
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _, y| {
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("log_softmax", self.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let m = (0..len)
                    .map(|k| x[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..len).map(|k| (x[idx(k)] - m).exp()).sum::<f64>().ln();
                for k in 0..len {
                    out[idx(k)] = x[idx(k)] - lse;
                }
            }
        }
        Tensor::from_op(
            "log_softmax",
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _, y| {
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let gsum: f64 = (0..len).map(|k| g[idx(k)]).sum();
                        for k in 0..len {
                            gx[idx(k)] = g[idx(k)] - y[idx(k)].exp() * gsum;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// log Σ exp along an axis, computed stably.
    pub fn logsumexp(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        check_axis("logsumexp", self.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let m = (0..len)
                    .map(|k| x[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                out[o * inner + i] = m + (0..len).map(|k| (x[idx(k)] - m).exp()).sum::<f64>().ln();
            }
        }
        Tensor::from_op(
            "logsumexp",
            out,
            reduced_shape(self.shape(), axis, keepdim),
            vec![self.clone()],
            Box::new(move |g, parents, y| {
                let x = parents[0].data();
                let mut gx = vec![0.0; x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let r = o * inner + i;
                        for k in 0..len {
                            let j = (o * len + k) * inner + i;
                            gx[j] = g[r] * (x[j] - y[r]).exp();
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        for c in [-3.0, 0.0, 7.5] {
            let s = Tensor::new(vec![c, c], &[2]).unwrap().softmax(0).unwrap();
            assert_eq!(s.data(), &[0.5, 0.5]);
        }
    }

    #[test]
    fn axis_reductions() {
        let x = Tensor::new((1..=6).map(f64::from).collect(), &[2, 3]).unwrap();
        assert_eq!(x.sum_axis(0, false).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(x.sum_axis(1, true).unwrap().shape(), &[2, 1]);
        assert_eq!(x.mean_axis(1, false).unwrap().data(), &[2.0, 5.0]);
        assert_eq!(x.min_axis(1, false).unwrap().data(), &[1.0, 4.0]);
        assert_eq!(x.max_axis(0, false).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert_eq!(x.mean_axes(&[0, 1], false).unwrap().data(), &[3.5]);
    }

    #[test]
    fn logsumexp_matches_direct() {
        let x = Tensor::new(vec![0.1, -2.0, 3.0, 0.5], &[2, 2]).unwrap();
        let l = x.logsumexp(1, false).unwrap();
        let d = [
            (0.1f64.exp() + (-2.0f64).exp()).ln(),
            (3.0f64.exp() + 0.5f64.exp()).ln(),
        ];
        for (a, b) in l.data().iter().zip(d) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
