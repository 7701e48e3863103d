use std::sync::Arc;

use crate::error::{dim_err, Result};
use crate::shape::{check_axis, split_at_axis, strides};
use crate::tensor::{numel, Tensor};

/// Gather-style op: `out[k] = x[src[k]]`; gradient scatters back.
fn gather(x: &Tensor, name: &'static str, src: Vec<usize>, shape: Vec<usize>) -> Result<Tensor> {
    let data = src.iter().map(|&i| x.data()[i]).collect();
    let src = Arc::new(src);
    Tensor::from_op(
        name,
        data,
        shape,
        vec![x.clone()],
        Box::new(move |g, parents, _| {
            let mut gx = vec![0.0; parents[0].numel()];
            for (gi, &s) in g.iter().zip(src.iter()) {
                gx[s] += gi;
            }
            vec![Some(gx)]
        }),
    )
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return dim_err("reshape", format!("{:?} -> {:?}", self.shape(), shape));
        }
        Tensor::from_op(
            "reshape",
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        )
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        check_axis("transpose", self.shape(), a)?;
        check_axis("transpose", self.shape(), b)?;
        let mut perm: Vec<usize> = (0..self.ndim()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let n = self.ndim();
        let mut seen = vec![false; n];
        if perm.len() != n
            || perm
                .iter()
                .any(|&p| p >= n || std::mem::replace(&mut seen[p], true))
        {
            return dim_err(
                "permute",
                format!("bad permutation {perm:?} for {:?}", self.shape()),
            );
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let total = self.numel();
        let mut src = Vec::with_capacity(total);
        let mut idx = vec![0usize; n];
        let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut pos = 0;
        for _ in 0..total {
            src.push(pos);
            for ax in (0..n).rev() {
                idx[ax] += 1;
                pos += eff[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                pos -= eff[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        gather(self, "permute", src, out_shape)
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis("narrow", self.shape(), axis)?;
        if start + len > self.shape()[axis] {
            return dim_err(
                "narrow",
                format!(
                    "range {start}..{} exceeds extent {}",
                    start + len,
                    self.shape()[axis]
                ),
            );
        }
        let idx: Vec<usize> = (start..start + len).collect();
        self.index_select(axis, &idx)
    }

    /// Picks entries along `axis` (repeats allowed).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        check_axis("index_select", self.shape(), axis)?;
        let (outer, len, inner) = split_at_axis(self.shape(), axis);
        if let Some(bad) = indices.iter().find(|&&i| i >= len) {
            return dim_err("index_select", format!("index {bad} out of range {len}"));
        }
        let mut src = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &k in indices {
                let base = (o * len + k) * inner;
                src.extend(base..base + inner);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = indices.len();
        gather(self, "index_select", src, shape)
    }

    /// Concatenates tensors that agree on every axis but `axis`.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let Some(first) = parts.first() else {
            return dim_err("concat", "no inputs");
        };
        check_axis("concat", first.shape(), axis)?;
        for p in parts {
            let ok = p.ndim() == first.ndim()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return dim_err("concat", format!("{:?} vs {:?}", p.shape(), first.shape()));
            }
        }
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total_len: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_len;
        Tensor::from_op(
            "concat",
            data,
            shape,
            parts.to_vec(),
            Box::new(move |g, parents, _| {
                let mut grads: Vec<Vec<f64>> = parents
                    .iter()
                    .map(|p| Vec::with_capacity(p.numel()))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gp, &l) in grads.iter_mut().zip(&lens) {
                        gp.extend_from_slice(&g[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(parents)
                    .map(|(gp, p)| p.requires_grad().then_some(gp))
                    .collect()
            }),
        )
    }

    /// Edge-replicating pad of the last two axes.
    pub fn pad_replicate(
        &self,
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    ) -> Result<Tensor> {
        if self.ndim() < 2 {
            return dim_err("pad_replicate", "needs at least 2 axes");
        }
        let n = self.ndim();
        let (h, w) = (self.shape()[n - 2], self.shape()[n - 1]);
        if h == 0 || w == 0 {
            return dim_err("pad_replicate", "empty spatial extent");
        }
        let planes = self.numel() / (h * w);
        let (oh, ow) = (h + top + bottom, w + left + right);
        let mut src = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for y in 0..oh {
                let sy = y.saturating_sub(top).min(h - 1);
                for x in 0..ow {
                    let sx = x.saturating_sub(left).min(w - 1);
                    src.push(p * h * w + sy * w + sx);
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[n - 2] = oh;
        shape[n - 1] = ow;
        gather(self, "pad_replicate", src, shape)
    }

    /// Nearest-neighbour upsampling of the last two axes by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        if self.ndim() < 2 || factor == 0 {
            return dim_err("upsample_nearest", "needs at least 2 axes and factor >= 1");
        }
        let n = self.ndim();
        let (h, w) = (self.shape()[n - 2], self.shape()[n - 1]);
        let planes = self.numel() / (h * w).max(1);
        let (oh, ow) = (h * factor, w * factor);
        let mut src = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for y in 0..oh {
                for x in 0..ow {
                    src.push(p * h * w + (y / factor) * w + x / factor);
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape[n - 2] = oh;
        shape[n - 1] = ow;
        gather(self, "upsample_nearest", src, shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(shape: &[usize]) -> Tensor {
        Tensor::new((0..numel(shape)).map(|v| v as f64).collect(), shape).unwrap()
    }

    #[test]
    fn transpose_2d() {
        let t = iota(&[2, 3]).transpose(0, 1).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn narrow_and_concat_roundtrip() {
        let x = iota(&[2, 5]);
        let a = x.narrow(1, 0, 2).unwrap();
        let b = x.narrow(1, 2, 3).unwrap();
        assert_eq!(a.data(), &[0.0, 1.0, 5.0, 6.0]);
        let y = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(y.data(), x.data());
        assert!(x.narrow(1, 4, 2).is_err());
    }

    #[test]
    fn replicate_padding_copies_edges() {
        let x = iota(&[1, 2, 2]);
        let p = x.pad_replicate(1, 0, 0, 1).unwrap();
        assert_eq!(p.shape(), &[1, 3, 3]);
        assert_eq!(p.data(), &[0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn upsample_grad_sums_blocks() {
        let x = Tensor::param(vec![1.0, 2.0], &[1, 1, 2]).unwrap();
        let y = x.upsample_nearest(2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4]);
        y.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 4.0]);
    }

    #[test]
    fn reshape_checks_size() {
        assert!(iota(&[2, 3]).reshape(&[3, 2]).is_ok());
        assert!(iota(&[2, 3]).reshape(&[4]).is_err());
    }
}
