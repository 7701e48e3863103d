//! Full-reference image metrics and the two-sample energy distance.

use hazebridge_tensor::{no_grad, Tensor};

use crate::error::{Error, Result};
use crate::img::Image;
use crate::regularizers::{ssim, HfdConfig};

/// Reported for identical images, where the ratio is unbounded.
pub const PSNR_SENTINEL: f64 = 99.0;

/// Peak signal-to-noise ratio for unit peak; the flag marks the sentinel.
pub fn psnr_flagged(a: &Image, b: &Image) -> Result<(f64, bool)> {
    if !a.same_dims(b) {
        return Err(Error::Contract(format!(
            "psnr of {}x{}x{} and {}x{}x{}",
            a.channels, a.height, a.width, b.channels, b.height, b.width
        )));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len().max(1) as f64;
    if mse == 0.0 {
        return Ok((PSNR_SENTINEL, true));
    }
    Ok(((10.0 * (1.0 / mse).log10()).min(PSNR_SENTINEL), false))
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_flagged(a, b)?.0)
}

/// Window and constants of the evaluation SSIM (11×11 Gaussian, σ = 1.5, unit peak).
pub fn ssim_metric_config() -> HfdConfig {
    HfdConfig {
        window: 11,
        sigma: 1.5,
        c1: 0.01 * 0.01,
        c2: 0.03 * 0.03,
        ..HfdConfig::default()
    }
}

/// Mean SSIM over channels and valid window positions.
pub fn ssim_image(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::Contract("ssim of differently sized images".into()));
    }
    let _g = no_grad();
    let mut cfg = ssim_metric_config();
    cfg.window = cfg.window.min(a.height).min(a.width);
    if cfg.window % 2 == 0 {
        cfg.window -= 1;
    }
    Ok(ssim(&a.to_tensor(), &b.to_tensor(), &cfg)?.item()?)
}

fn mean_pair_distance(a: &[f64], b: &[f64], d: usize) -> f64 {
    let (n, m) = (a.len() / d, b.len() / d);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let s: f64 = (0..d).map(|k| (a[i * d + k] - b[j * d + k]).powi(2)).sum();
            total += s.sqrt();
        }
    }
    total / (n * m) as f64
}

/// `2E‖X − Y‖ − E‖X − X'‖ − E‖Y − Y'‖` as a V-statistic,
/// so it is nonnegative and exactly 0 for identical sets.
pub fn energy_distance(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.ndim() != 2
        || y.ndim() != 2
        || x.shape()[1] != y.shape()[1]
        || x.shape()[0] < 2
        || y.shape()[0] < 2
    {
        return Err(Error::Contract(format!(
            "energy distance of {:?} and {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let d = x.shape()[1];
    let cross = mean_pair_distance(x.data(), y.data(), d);
    let within_x = mean_pair_distance(x.data(), x.data(), d);
    let within_y = mean_pair_distance(y.data(), y.data(), d);
    Ok(2.0 * cross - within_x - within_y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let a = Image::filled(3, 4, 4, 0.5);
        assert_eq!(psnr_flagged(&a, &a).unwrap(), (99.0, true));
        let b = Image::filled(3, 4, 4, 0.6);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn identical_images_have_unit_ssim() {
        let a = Image::new(
            3,
            12,
            12,
            (0..432).map(|v| (v % 17) as f64 / 16.0).collect(),
        )
        .unwrap();
        assert_eq!(ssim_image(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn energy_distance_of_shifted_sets_is_positive() {
        let x = Tensor::new(vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0], &[3, 2]).unwrap();
        let y = x.add_scalar(3.0).unwrap();
        assert!(energy_distance(&x, &y).unwrap() > 1.0);
        assert!(energy_distance(&x, &x).unwrap().abs() < 1e-12);
    }
}
