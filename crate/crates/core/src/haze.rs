//! Atmospheric scattering synthesis, dark-channel-prior estimation, and the
//! physics-consistency loss used during training.

use hazebridge_tensor::Tensor;

use crate::error::{Error, Result};
use crate::img::Image;
use crate::nets::{PerceptualNet, Refiner};
use crate::regularizers::l1_distance;

/// Fixed constants of the dark-channel estimator.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcpParams {
    pub omega: f64,
    pub patch: usize,
    pub t_min: f64,
}

impl Default for DcpParams {
    fn default() -> Self {
        DcpParams {
            omega: 0.95,
            patch: 15,
            t_min: 0.1,
        }
    }
}

impl DcpParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.omega <= 1.0) {
            return Err(Error::Config(format!(
                "omega must lie in (0, 1], got {}",
                self.omega
            )));
        }
        if self.patch % 2 == 0 {
            return Err(Error::Config(format!(
                "dark-channel patch must be odd, got {}",
                self.patch
            )));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::Config(format!(
                "t_min must lie in (0, 1), got {}",
                self.t_min
            )));
        }
        Ok(())
    }
}

/// Scene parameters of a hazy observation.
#[derive(Debug, Clone, PartialEq)]
pub struct AsmParams {
    pub atmospheric_light: Vec<f64>,
    pub transmission: Image,
    pub omega: f64,
    pub patch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DcpResult {
    pub dehazed: Image,
    pub transmission: Image,
    pub atmospheric_light: Vec<f64>,
}

fn check_map(op: &'static str, img: &Image, map: &Image) -> Result<()> {
    if map.channels != 1 || map.height != img.height || map.width != img.width {
        return Err(Error::Contract(format!(
            "{op}: map {}x{}x{} does not match image {}x{}",
            map.channels, map.height, map.width, img.height, img.width
        )));
    }
    Ok(())
}

fn check_light(op: &'static str, img: &Image, a: &[f64]) -> Result<()> {
    if a.len() != img.channels {
        return Err(Error::Contract(format!(
            "{op}: {} light values for {} channels",
            a.len(),
            img.channels
        )));
    }
    Ok(())
}

/// `I = J·t + A·(1 − t)`, clamped to [0, 1].
pub fn apply_asm(j: &Image, t: &Image, a: &[f64]) -> Result<Image> {
    check_map("apply_asm", j, t)?;
    check_light("apply_asm", j, a)?;
    let mut out = j.clone();
    for (c, &ac) in a.iter().enumerate() {
        for (v, &tv) in out.plane_mut(c).iter_mut().zip(&t.data) {
            *v = (*v * tv + ac * (1.0 - tv)).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// Sliding-window minimum over the plane with edge replication (min is separable).
fn min_filter(plane: &[f64], h: usize, w: usize, patch: usize) -> Vec<f64> {
    let r = patch / 2;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            rows[y * w + x] = plane[y * w + lo..=y * w + hi]
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi)
                .map(|yy| rows[yy * w + x])
                .fold(f64::INFINITY, f64::min);
        }
    }
    out
}

/// Per-pixel minimum over channels, then over the `patch × patch` window.
pub fn dark_channel(img: &Image, patch: usize) -> Result<Image> {
    if patch % 2 == 0 {
        return Err(Error::Contract(format!(
            "dark channel patch must be odd, got {patch}"
        )));
    }
    if img.channels == 0 {
        return Err(Error::Contract(
            "dark channel of an image without channels".into(),
        ));
    }
    let channel_min: Vec<f64> = (0..img.pixels())
        .map(|p| {
            (0..img.channels)
                .map(|c| img.plane(c)[p])
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    Image::new(
        1,
        img.height,
        img.width,
        min_filter(&channel_min, img.height, img.width, patch),
    )
}

/// Mean colour of the brightest 0.1% (at least one) of dark-channel pixels;
/// ties go to the lower pixel index.
pub fn estimate_atmospheric_light(img: &Image, dark: &Image) -> Result<Vec<f64>> {
    check_map("estimate_atmospheric_light", img, dark)?;
    let n = img.pixels();
    if n == 0 {
        return Err(Error::Contract(
            "atmospheric light of an empty image".into(),
        ));
    }
    let k = ((n as f64) * 0.001).ceil().max(1.0) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&p, &q| dark.data[q].total_cmp(&dark.data[p]).then(p.cmp(&q)));
    Ok((0..img.channels)
        .map(|c| order[..k].iter().map(|&p| img.plane(c)[p]).sum::<f64>() / k as f64)
        .collect())
}

/// `t = 1 − ω·dark(I/A)`, clamped to `[t_min, 1]`.
pub fn estimate_transmission(
    img: &Image,
    a: &[f64],
    omega: f64,
    patch: usize,
    t_min: f64,
) -> Result<Image> {
    check_light("estimate_transmission", img, a)?;
    if let Some(bad) = a.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::Domain {
            op: "estimate_transmission",
            detail: format!("atmospheric light {bad} is not positive"),
        });
    }
    let mut normalized = img.clone();
    for (c, &ac) in a.iter().enumerate() {
        normalized.plane_mut(c).iter_mut().for_each(|v| *v /= ac);
    }
    let mut t = dark_channel(&normalized, patch)?;
    t.data
        .iter_mut()
        .for_each(|v| *v = (1.0 - omega * *v).clamp(t_min, 1.0));
    Ok(t)
}

/// Full dark-channel-prior dehazing: estimate `A` and `t`, then invert the scattering model.
pub fn dcp_dehaze(img: &Image, params: &DcpParams) -> Result<DcpResult> {
    params.validate()?;
    let dark = dark_channel(img, params.patch)?;
    let a = estimate_atmospheric_light(img, &dark)?;
    // A black image yields A = 0; any positive floor leaves (I − A) = 0 there.
    let a_safe: Vec<f64> = a.iter().map(|v| v.max(1e-6)).collect();
    let t = estimate_transmission(img, &a_safe, params.omega, params.patch, params.t_min)?;
    let mut j = img.clone();
    for (c, &ac) in a.iter().enumerate() {
        for (v, &tv) in j.plane_mut(c).iter_mut().zip(&t.data) {
            *v = ((*v - ac) / tv.max(params.t_min) + ac).clamp(0.0, 1.0);
        }
    }
    Ok(DcpResult {
        dehazed: j,
        transmission: t,
        atmospheric_light: a,
    })
}

/// Runs the refiner on a `(B, 1, H, W)` coarse transmission batch.
pub fn refine_transmission(t: &Tensor, refiner: &Refiner) -> Result<Tensor> {
    refiner.forward(t)
}

/// Distance between the hazy input and its re-hazed reconstruction
/// `J_gen·t_ref + A·(1 − t_ref)`: mean L1 plus the frozen perceptual distance.
/// `light` has shape `(B, C, 1, 1)`.
pub fn physical_prior_loss(
    hazy: &Tensor,
    generated: &Tensor,
    t_ref: &Tensor,
    light: &Tensor,
    perceptual: &PerceptualNet,
) -> Result<Tensor> {
    let rehazed = generated
        .mul(t_ref)?
        .add(&light.mul(&t_ref.neg()?.add_scalar(1.0)?)?)?;
    Ok(l1_distance(hazy, &rehazed)?.add(&perceptual.distance(hazy, &rehazed)?)?)
}
