//! Detail-preserving losses on `(B, C, H, W)` image batches: patch-contrastive
//! correspondence, DFT amplitude, SSIM and Sobel gradient magnitude.

use std::f64::consts::PI;

use hazebridge_tensor::{Conv2dSpec, Tensor};
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

/// Smoothing scale of the L1 surrogate `sqrt(d² + δ²) − δ`.
const L1_DELTA_SQ: f64 = 1e-6;
/// Offset inside square roots of magnitudes, keeping them differentiable at zero.
const MAG_EPS: f64 = 1e-8;

/// Mean absolute difference, smoothed near zero so it stays differentiable;
/// exactly 0 when `a == b`.
pub fn l1_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = a.sub(b)?;
    Ok(d.square()?
        .add_scalar(L1_DELTA_SQ)?
        .sqrt()?
        .add_scalar(-L1_DELTA_SQ.sqrt())?
        .mean()?)
}

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if a.shape() != b.shape() || a.ndim() != 4 {
        return Err(Error::Contract(format!(
            "{op}: need equal (B, C, H, W) shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let s = a.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

/// Depthwise convolution of every channel with the same single-channel kernel.
fn depthwise(x: &Tensor, kernel: &Tensor, spec: Conv2dSpec) -> Result<Tensor> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let y = x.reshape(&[b * c, 1, h, w])?.conv2d(kernel, None, spec)?;
    let (oh, ow) = (y.shape()[2], y.shape()[3]);
    Ok(y.reshape(&[b, c, oh, ow])?)
}

// ---------------------------------------------------------------- PatchNCE

/// Features gathered at shared locations: one `(B, L, C)` tensor per layer.
#[derive(Debug, Clone)]
pub struct PatchFeatureSet {
    pub layers: Vec<Tensor>,
    pub locations: Vec<Vec<usize>>,
    pub temperature: f64,
}

/// Chooses up to `count` distinct spatial positions per layer.
pub fn sample_locations<R: Rng + ?Sized>(
    rng: &mut R,
    maps: &[Tensor],
    count: usize,
) -> Vec<Vec<usize>> {
    maps.iter()
        .map(|m| {
            let hw = m.shape()[2] * m.shape()[3];
            let mut idx = sample(rng, hw, count.min(hw)).into_vec();
            idx.sort_unstable();
            idx
        })
        .collect()
}

/// Gathers `(B, C, H, W)` maps at the given flat positions into `(B, L, C)` stacks.
pub fn gather_patches(
    maps: &[Tensor],
    locations: &[Vec<usize>],
    temperature: f64,
) -> Result<PatchFeatureSet> {
    if maps.len() != locations.len() {
        return Err(Error::Contract(format!(
            "{} feature maps but {} location sets",
            maps.len(),
            locations.len()
        )));
    }
    let layers = maps
        .iter()
        .zip(locations)
        .map(|(m, loc)| {
            let s = m.shape();
            Ok(m.reshape(&[s[0], s[1], s[2] * s[3]])?
                .index_select(2, loc)?
                .transpose(1, 2)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchFeatureSet {
        layers,
        locations: locations.to_vec(),
        temperature,
    })
}

/// Rescales vectors along the last axis to unit length.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let last = x.ndim() - 1;
    let norm = x
        .square()?
        .sum_axis(last, true)?
        .add_scalar(1e-12)?
        .sqrt()?;
    Ok(x.div(&norm)?)
}

/// Contrastive loss matching each output patch to the same-location input patch
/// against the other locations of the same image.
pub fn patch_nce_loss(feats_in: &PatchFeatureSet, feats_out: &PatchFeatureSet) -> Result<Tensor> {
    if feats_in.layers.len() != feats_out.layers.len()
        || feats_in.locations != feats_out.locations
        || feats_in.layers.is_empty()
    {
        return Err(Error::Contract(
            "patch feature sets differ in layers or locations".into(),
        ));
    }
    let mut total: Option<Tensor> = None;
    for (k, q) in feats_in.layers.iter().zip(&feats_out.layers) {
        if k.shape() != q.shape() || k.shape()[1] == 0 {
            return Err(Error::Contract(format!(
                "patch stacks {:?} and {:?}",
                k.shape(),
                q.shape()
            )));
        }
        let l = k.shape()[1];
        let logits = l2_normalize(q)?
            .matmul(&l2_normalize(k)?.transpose(1, 2)?)?
            .div_scalar(feats_out.temperature)?;
        let eye = Tensor::new(
            (0..l * l)
                .map(|i| if i / l == i % l { 1.0 } else { 0.0 })
                .collect(),
            &[l, l],
        )?;
        let nll = logits
            .log_softmax(2)?
            .mul(&eye)?
            .sum_axis(2, false)?
            .mean()?
            .neg()?;
        total = Some(match total {
            None => nll,
            Some(t) => t.add(&nll)?,
        });
    }
    let n = feats_in.layers.len() as f64;
    Ok(total.expect("at least one layer").div_scalar(n)?)
}

// ---------------------------------------------------------------- DFT

fn dft_matrices(n: usize) -> (Tensor, Tensor) {
    let scale = 1.0 / (n as f64).sqrt();
    let angle = |k: usize, m: usize| 2.0 * PI * ((k * m) % n) as f64 / n as f64;
    let cos = (0..n * n)
        .map(|i| angle(i / n, i % n).cos() * scale)
        .collect();
    let sin = (0..n * n)
        .map(|i| angle(i / n, i % n).sin() * scale)
        .collect();
    (
        Tensor::new(cos, &[n, n]).expect("square"),
        Tensor::new(sin, &[n, n]).expect("square"),
    )
}

/// Orthonormal 2-D DFT amplitude of every channel plane.
pub fn amplitude_spectrum(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 4 {
        return Err(Error::Contract(format!(
            "amplitude spectrum of {:?}",
            x.shape()
        )));
    }
    let s = x.shape().to_vec();
    let planes = x.reshape(&[s[0] * s[1], s[2], s[3]])?;
    let (ch, sh) = dft_matrices(s[2]);
    let (cw, sw) = dft_matrices(s[3]);
    let (xc, xs) = (planes.matmul(&cw)?, planes.matmul(&sw)?);
    let re = ch.matmul(&xc)?.sub(&sh.matmul(&xs)?)?;
    let im = sh.matmul(&xc)?.add(&ch.matmul(&xs)?)?;
    let amp = re
        .square()?
        .add(&im.square()?)?
        .add_scalar(MAG_EPS)?
        .sqrt()?;
    Ok(amp.reshape(&s)?)
}

/// Mean absolute difference of DFT amplitude spectra.
pub fn dft_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_pair("dft_loss", a, b)?;
    l1_distance(&amplitude_spectrum(a)?, &amplitude_spectrum(b)?)
}

// ---------------------------------------------------------------- SSIM / Sobel

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HfdConfig {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
    pub w_dft: f64,
    pub w_ssim: f64,
    pub w_sobel: f64,
}

impl Default for HfdConfig {
    fn default() -> Self {
        HfdConfig {
            window: 7,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
            w_dft: 1.0,
            w_ssim: 1.0,
            w_sobel: 1.0,
        }
    }
}

impl HfdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 || self.window == 0 {
            return Err(Error::Config(format!(
                "SSIM window must be odd, got {}",
                self.window
            )));
        }
        if !(self.c1 > 0.0 && self.c2 > 0.0 && self.sigma > 0.0) {
            return Err(Error::Config(
                "SSIM constants and sigma must be positive".into(),
            ));
        }
        if [self.w_dft, self.w_ssim, self.w_sobel]
            .iter()
            .any(|w| !(*w >= 0.0))
        {
            return Err(Error::Config(
                "high-frequency weights must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    fn gaussian_window(&self) -> Tensor {
        let r = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        let data = (0..self.window * self.window)
            .map(|k| g[k / self.window] * g[k % self.window] / (s * s))
            .collect();
        Tensor::new(data, &[1, 1, self.window, self.window]).expect("window dims")
    }
}

/// Mean local SSIM under a Gaussian window (valid positions only).
pub fn ssim(a: &Tensor, b: &Tensor, cfg: &HfdConfig) -> Result<Tensor> {
    let (_, _, h, w) = check_pair("ssim", a, b)?;
    if h < cfg.window || w < cfg.window {
        return Err(Error::Contract(format!(
            "{h}x{w} image smaller than the {0}x{0} SSIM window",
            cfg.window
        )));
    }
    let win = cfg.gaussian_window();
    let blur = |x: &Tensor| depthwise(x, &win, Conv2dSpec::default());
    let (mx, my) = (blur(a)?, blur(b)?);
    let (mxx, myy, mxy) = (mx.square()?, my.square()?, mx.mul(&my)?);
    let vx = blur(&a.square()?)?.sub(&mxx)?;
    let vy = blur(&b.square()?)?.sub(&myy)?;
    let cov = blur(&a.mul(b)?)?.sub(&mxy)?;
    let num = mxy
        .mul_scalar(2.0)?
        .add_scalar(cfg.c1)?
        .mul(&cov.mul_scalar(2.0)?.add_scalar(cfg.c2)?)?;
    let den = mxx
        .add(&myy)?
        .add_scalar(cfg.c1)?
        .mul(&vx.add(&vy)?.add_scalar(cfg.c2)?)?;
    Ok(num.div(&den)?.mean()?)
}

pub fn ssim_loss(a: &Tensor, b: &Tensor, cfg: &HfdConfig) -> Result<Tensor> {
    Ok(ssim(a, b, cfg)?.neg()?.add_scalar(1.0)?)
}

/// Per-channel Sobel gradient magnitude with edge replication, same size as the input.
pub fn sobel_magnitude(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 4 {
        return Err(Error::Contract(format!("sobel of {:?}", x.shape())));
    }
    let kx = Tensor::new(
        vec![-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0],
        &[1, 1, 3, 3],
    )?;
    let ky = Tensor::new(
        vec![-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0],
        &[1, 1, 3, 3],
    )?;
    let padded = x.pad_replicate(1, 1, 1, 1)?;
    let gx = depthwise(&padded, &kx, Conv2dSpec::default())?;
    let gy = depthwise(&padded, &ky, Conv2dSpec::default())?;
    Ok(gx
        .square()?
        .add(&gy.square()?)?
        .add_scalar(MAG_EPS)?
        .sqrt()?
        .add_scalar(-MAG_EPS.sqrt())?)
}

pub fn sobel_loss(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_pair("sobel_loss", a, b)?;
    l1_distance(&sobel_magnitude(a)?, &sobel_magnitude(b)?)
}

/// Weighted sum of the DFT, SSIM and Sobel terms; terms with zero weight are skipped.
pub fn hfd_loss(a: &Tensor, b: &Tensor, cfg: &HfdConfig) -> Result<Tensor> {
    check_pair("hfd_loss", a, b)?;
    let mut total = Tensor::scalar(0.0);
    if cfg.w_dft != 0.0 {
        total = total.add(&dft_loss(a, b)?.mul_scalar(cfg.w_dft)?)?;
    }
    if cfg.w_ssim != 0.0 {
        total = total.add(&ssim_loss(a, b, cfg)?.mul_scalar(cfg.w_ssim)?)?;
    }
    if cfg.w_sobel != 0.0 {
        total = total.add(&sobel_loss(a, b)?.mul_scalar(cfg.w_sobel)?)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(v: f64) -> Tensor {
        Tensor::full(&[1, 1, 9, 9], v)
    }

    #[test]
    fn ssim_of_constant_pairs() {
        let cfg = HfdConfig::default();
        let s = ssim(&constant(0.2), &constant(0.8), &cfg)
            .unwrap()
            .item()
            .unwrap();
        let want = (2.0 * 0.16 + cfg.c1) / (0.04 + 0.64 + cfg.c1);
        assert!((s - want).abs() < 1e-9 && (s - 0.4707).abs() < 1e-3);
        assert_eq!(
            ssim(&constant(0.3), &constant(0.3), &cfg)
                .unwrap()
                .item()
                .unwrap(),
            1.0
        );
    }

    #[test]
    fn sobel_of_ramp_and_constant() {
        let ramp = Tensor::new(
            (0..81).map(|i| 0.1 * (i % 9) as f64).collect(),
            &[1, 1, 9, 9],
        )
        .unwrap();
        let m = sobel_magnitude(&ramp).unwrap();
        assert!((m.data()[4 * 9 + 4] - 0.8).abs() < 1e-3);
        assert!(sobel_magnitude(&constant(0.4))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(
            sobel_loss(&constant(0.1), &constant(0.9))
                .unwrap()
                .item()
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn nce_single_location_and_closed_form() {
        let one = Tensor::new(vec![0.3, -0.2, 0.9], &[1, 1, 3]).unwrap();
        let set = |t: &Tensor| PatchFeatureSet {
            layers: vec![t.clone()],
            locations: vec![vec![0]],
            temperature: 0.07,
        };
        assert_eq!(
            patch_nce_loss(&set(&one), &set(&one))
                .unwrap()
                .item()
                .unwrap(),
            0.0
        );

        let keys = Tensor::new(
            vec![
                1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
            ],
            &[1, 4, 4],
        )
        .unwrap();
        let locs = vec![(0..4).collect::<Vec<_>>()];
        let fin = PatchFeatureSet {
            layers: vec![keys.clone()],
            locations: locs.clone(),
            temperature: 0.07,
        };
        let fout = PatchFeatureSet {
            layers: vec![keys],
            locations: locs,
            temperature: 0.07,
        };
        let got = patch_nce_loss(&fin, &fout).unwrap().item().unwrap();
        let e = (1.0f64 / 0.07).exp();
        let want = -(e / (e + 3.0)).ln();
        assert!((got - want).abs() < 1e-12 && (want - 1.87e-6).abs() < 1e-8);
    }

    #[test]
    fn mismatched_patch_sets_are_rejected() {
        let a = PatchFeatureSet {
            layers: vec![Tensor::zeros(&[1, 2, 3])],
            locations: vec![vec![0, 1]],
            temperature: 0.07,
        };
        let b = PatchFeatureSet {
            layers: vec![Tensor::zeros(&[1, 2, 3])],
            locations: vec![vec![0, 2]],
            temperature: 0.07,
        };
        assert!(matches!(patch_nce_loss(&a, &b), Err(Error::Contract(_))));
    }
}
