use crate::error::{dim_err, Result};
use crate::ops::elementwise::sigmoid;
use crate::tensor::Tensor;

/// Row-major matrix view with an optional logical transpose.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            trans: false,
        }
    }

    /// Logical transpose of a stored `rows x cols` matrix.
    pub fn t(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            trans: true,
        }
    }

    fn shape(&self) -> (usize, usize) {
        if self.trans {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = beta·c + a·b` for logical shapes (m,k)·(k,n); `c` is row-major m×n.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, c: &mut [f64], beta: f64) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert!(a.data.len() >= a.rows * a.cols && b.data.len() >= b.rows * b.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: bounds asserted above; strides describe dense row-major storage.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// Matrix product over the last two axes. Accepts (m,k)·(k,n), batched
    /// (b,m,k)·(b,k,n), and a 2-D operand broadcast against a 3-D one.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        let bad = || dim_err("matmul", format!("{sa:?} x {sb:?}"));
        if !(2..=3).contains(&sa.len()) || !(2..=3).contains(&sb.len()) {
            return bad();
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return bad();
        }
        let ba = if sa.len() == 3 { sa[0] } else { 1 };
        let bb = if sb.len() == 3 { sb[0] } else { 1 };
        if ba != bb && ba != 1 && bb != 1 {
            return bad();
        }
        let batch = ba.max(bb);
        let (a3, b3) = (sa.len() == 3, sb.len() == 3);
        let step_a = if a3 && ba > 1 { m * k } else { 0 };
        let step_b = if b3 && bb > 1 { k * n } else { 0 };
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                Mat::new(&self.data()[i * step_a..], m, k),
                Mat::new(&other.data()[i * step_b..], k, n),
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let shape = if a3 || b3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        Tensor::from_op(
            "matmul",
            out,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g, parents, _| {
                let (pa, pb) = (&parents[0], &parents[1]);
                let ga = pa.requires_grad().then(|| {
                    // dA = dC · Bᵀ, summed over broadcast batches
                    let mut ga = vec![0.0; pa.numel()];
                    for i in 0..batch {
                        let beta = if step_a == 0 && i > 0 { 1.0 } else { 0.0 };
                        gemm(
                            Mat::new(&g[i * m * n..], m, n),
                            Mat::t(&pb.data()[i * step_b..], k, n),
                            &mut ga[i * step_a..],
                            beta,
                        );
                    }
                    ga
                });
                let gb = pb.requires_grad().then(|| {
                    // dB = Aᵀ · dC
                    let mut gb = vec![0.0; pb.numel()];
                    for i in 0..batch {
                        let beta = if step_b == 0 && i > 0 { 1.0 } else { 0.0 };
                        gemm(
                            Mat::t(&pa.data()[i * step_a..], m, k),
                            Mat::new(&g[i * m * n..], m, n),
                            &mut gb[i * step_b..],
                            beta,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        )
    }

    /// Pairwise scores `out[i, j] = Σ_k w_k · silu(self[i, k] + other[j, k])`
    /// for `self: (m, h)`, `other: (n, h)` and `w` with `h` elements, without
    /// materialising the `(m, n, h)` intermediate.
    pub fn pairwise_silu_dot(&self, other: &Tensor, w: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] || w.numel() != sa[1] {
            return dim_err(
                "pairwise_silu_dot",
                format!("{sa:?}, {sb:?}, {:?}", w.shape()),
            );
        }
        let (m, n, h) = (sa[0], sb[0], sa[1]);
        let (a, b, wv) = (self.data(), other.data(), w.data());
        let mut sig = vec![0.0; m * n * h];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ai = &a[i * h..(i + 1) * h];
            for j in 0..n {
                let bj = &b[j * h..(j + 1) * h];
                let s = &mut sig[(i * n + j) * h..(i * n + j + 1) * h];
                let mut acc = 0.0;
                for k in 0..h {
                    let z = ai[k] + bj[k];
                    s[k] = sigmoid(z);
                    acc += wv[k] * z * s[k];
                }
                out[i * n + j] = acc;
            }
        }
        Tensor::from_op(
            "pairwise_silu_dot",
            out,
            vec![m, n],
            vec![self.clone(), other.clone(), w.clone()],
            Box::new(move |g, parents, _| {
                let (a, b, wv) = (parents[0].data(), parents[1].data(), parents[2].data());
                let mut ga = vec![0.0; m * h];
                let mut gb = vec![0.0; n * h];
                let mut gw = vec![0.0; h];
                for i in 0..m {
                    let ai = &a[i * h..(i + 1) * h];
                    for j in 0..n {
                        let gij = g[i * n + j];
                        let bj = &b[j * h..(j + 1) * h];
                        let s = &sig[(i * n + j) * h..(i * n + j + 1) * h];
                        for k in 0..h {
                            let z = ai[k] + bj[k];
                            gw[k] += gij * z * s[k];
                            let dz = gij * wv[k] * s[k] * (1.0 + z * (1.0 - s[k]));
                            ga[i * h + k] += dz;
                            gb[j * h + k] += dz;
                        }
                    }
                }
                vec![
                    parents[0].requires_grad().then_some(ga),
                    parents[1].requires_grad().then_some(gb),
                    parents[2].requires_grad().then_some(gw),
                ]
            }),
        )
    }
}
