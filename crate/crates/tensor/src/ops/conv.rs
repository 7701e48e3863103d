use crate::error::{dim_err, Result};
use crate::ops::linalg::{gemm, Mat};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 0,
        }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies inside the image.
fn valid_columns(g: &Geometry, kx: usize) -> (usize, usize) {
    let lo = if g.pad > kx {
        (g.pad - kx).div_ceil(g.stride)
    } else {
        0
    };
    let hi = if g.w + g.pad > kx {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(g.ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let hw = g.hw_out();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_columns(g, kx);
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (v, s) in line[lo..hi]
                            .iter_mut()
                            .zip(src[first..].iter().step_by(g.stride))
                        {
                            *v = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geometry, dx: &mut [f64]) {
    let hw = g.hw_out();
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let (lo, hi) = valid_columns(g, kx);
                if lo == hi {
                    continue;
                }
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w + lo * g.stride + kx - g.pad;
                    let line = &src[oy * g.ow + lo..oy * g.ow + hi];
                    if g.stride == 1 {
                        for (d, s) in dx[base..base + line.len()].iter_mut().zip(line) {
                            *d += s;
                        }
                    } else {
                        for (d, s) in dx[base..].iter_mut().step_by(g.stride).zip(line) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// 2-D cross-correlation over NCHW input with (out, in, kh, kw) weights and
    /// zero padding.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        spec: Conv2dSpec,
    ) -> Result<Tensor> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || spec.stride == 0 {
            return dim_err("conv2d", format!("input {xs:?}, weight {ws:?}"));
        }
        let (b, cout) = (xs[0], ws[0]);
        let (h, w, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * spec.padding < kh || w + 2 * spec.padding < kw {
            return dim_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
            );
        }
        if let Some(bias) = bias {
            if bias.shape() != [cout] {
                return dim_err(
                    "conv2d",
                    format!("bias {:?} for {cout} channels", bias.shape()),
                );
            }
        }
        let g = Geometry {
            c: xs[1],
            h,
            w,
            kh,
            kw,
            oh: (h + 2 * spec.padding - kh) / spec.stride + 1,
            ow: (w + 2 * spec.padding - kw) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.padding,
        };
        let (k, hw) = (g.k(), g.hw_out());
        let in_plane = g.c * h * w;
        let mut out = vec![0.0; b * cout * hw];
        let mut cols = vec![0.0; k * hw];
        for i in 0..b {
            im2col(
                &self.data()[i * in_plane..(i + 1) * in_plane],
                &g,
                &mut cols,
            );
            let dst = &mut out[i * cout * hw..(i + 1) * cout * hw];
            gemm(
                Mat::new(weight.data(), cout, k),
                Mat::new(&cols, k, hw),
                dst,
                0.0,
            );
            if let Some(bias) = bias {
                for (oc, &bv) in bias.data().iter().enumerate() {
                    dst[oc * hw..(oc + 1) * hw]
                        .iter_mut()
                        .for_each(|v| *v += bv);
                }
            }
        }
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bias) = bias {
            parents.push(bias.clone());
        }
        Tensor::from_op(
            "conv2d",
            out,
            vec![b, cout, g.oh, g.ow],
            parents,
            Box::new(move |grad, parents, _| {
                let (x, wt) = (&parents[0], &parents[1]);
                let mut gx = x.requires_grad().then(|| vec![0.0; x.numel()]);
                let mut gw = wt.requires_grad().then(|| vec![0.0; wt.numel()]);
                let mut cols = vec![0.0; k * hw];
                for i in 0..b {
                    let dy = &grad[i * cout * hw..(i + 1) * cout * hw];
                    if let Some(gw) = gw.as_mut() {
                        im2col(&x.data()[i * in_plane..(i + 1) * in_plane], &g, &mut cols);
                        gemm(Mat::new(dy, cout, hw), Mat::t(&cols, k, hw), gw, 1.0);
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(
                            Mat::t(wt.data(), cout, k),
                            Mat::new(dy, cout, hw),
                            &mut cols,
                            0.0,
                        );
                        col2im(&cols, &g, &mut gx[i * in_plane..(i + 1) * in_plane]);
                    }
                }
                let mut res = vec![gx, gw];
                if parents.len() == 3 {
                    let gb = parents[2].requires_grad().then(|| {
                        let mut gb = vec![0.0; cout];
                        for i in 0..b {
                            for (oc, acc) in gb.iter_mut().enumerate() {
                                let s = (i * cout + oc) * hw;
                                *acc += grad[s..s + hw].iter().sum::<f64>();
                            }
                        }
                        gb
                    });
                    res.push(gb);
                }
                res
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as the reference.
    fn naive(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; b * o * oh * ow];
        for bi in 0..b {
            for oc in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        acc += x.data()
                                            [((bi * c + ic) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((oc * c + ic) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((bi * o + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_with_stride_and_padding() {
        let x = Tensor::new(
            (0..2 * 3 * 7 * 6)
                .map(|v| ((v * 37 % 11) as f64) / 5.0 - 1.0)
                .collect(),
            &[2, 3, 7, 6],
        )
        .unwrap();
        let w = Tensor::new(
            (0..4 * 3 * 3 * 3)
                .map(|v| ((v * 13 % 7) as f64) / 3.0 - 1.0)
                .collect(),
            &[4, 3, 3, 3],
        )
        .unwrap();
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let y = x
                .conv2d(
                    &w,
                    None,
                    Conv2dSpec {
                        stride,
                        padding: pad,
                    },
                )
                .unwrap();
            let want = naive(&x, &w, stride, pad);
            assert_eq!(y.numel(), want.len());
            for (a, b) in y.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn stride_two_output_extent() {
        let x = Tensor::zeros(&[1, 3, 32, 32]);
        let w = Tensor::zeros(&[8, 3, 4, 4]);
        let y = x
            .conv2d(
                &w,
                None,
                Conv2dSpec {
                    stride: 2,
                    padding: 1,
                },
            )
            .unwrap();
        assert_eq!(y.shape(), &[1, 8, 16, 16]);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 5, 5]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(x.conv2d(&w, None, Conv2dSpec::default()).is_err());
    }
}
