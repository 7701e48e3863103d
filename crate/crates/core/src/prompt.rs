//! Haze-aware prompt learning against a frozen image encoder, and the
//! prompt-guidance loss used while training the bridge generator.

use hazebridge_tensor::optim::Adam;
use hazebridge_tensor::{no_grad, Conv2dSpec, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::img::Image;
use crate::regularizers::{l2_normalize, sobel_magnitude};
use crate::rng::substream;

/// Number of hand-crafted statistics the toy encoder computes before projection.
pub const STAT_FEATURES: usize = 16;
const HIST_BINS: usize = 8;
const SOFT_MIN_TEMPERATURE: f64 = 0.01;
const DARK_WINDOW: usize = 7;
const CONTRAST_EPS: f64 = 1e-8;

/// Frozen image encoder built from colour, dark-channel and edge statistics
/// followed by a fixed random projection. It has no trainable parameters.
#[derive(Debug, Clone)]
pub struct ToyEncoder {
    projection: Tensor,
    dim: usize,
}

impl ToyEncoder {
    pub const TAG: &'static str = "toy-stats-v1";

    pub fn new(seed: u64, dim: usize) -> ToyEncoder {
        let mut rng = substream(seed, &[0x656e_636f]);
        let scale = 1.0 / (STAT_FEATURES as f64).sqrt();
        let w = (0..STAT_FEATURES * dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect::<Vec<f64>>();
        ToyEncoder {
            projection: Tensor::new(w, &[STAT_FEATURES, dim]).expect("projection dims"),
            dim,
        }
    }

    pub fn tag(&self) -> &'static str {
        Self::TAG
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Centred statistics, shape `(B, 16)`: 3 channel means, 3 channel
    /// variances, an 8-bin soft histogram of the dark channel, mean Sobel
    /// magnitude and mean local contrast of the luminance.
    pub fn statistics(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Contract(format!(
                "encoder input must be (B, 3, H, W), got {s:?}"
            )));
        }
        let (b, h, w) = (s[0], s[2], s[3]);
        let hw = h * w;

        // Shifting by a per-channel reference pixel keeps variances of constant images exactly zero.
        let reference = Tensor::new(
            (0..b * 3).map(|k| x.data()[k * hw]).collect(),
            &[b, 3, 1, 1],
        )?;
        let shifted = x.sub(&reference)?;
        let means = x.mean_axes(&[2, 3], false)?;
        let m1 = shifted.mean_axes(&[2, 3], false)?;
        let vars = shifted
            .square()?
            .mean_axes(&[2, 3], false)?
            .sub(&m1.square()?)?;

        let dark = soft_dark_channel(x)?;
        let centres = Tensor::new(
            (0..HIST_BINS)
                .map(|k| (k as f64 + 0.5) / HIST_BINS as f64)
                .collect(),
            &[1, HIST_BINS, 1, 1],
        )?;
        let sigma = 1.0 / (2 * HIST_BINS) as f64;
        let weights = dark
            .sub(&centres)?
            .square()?
            .mul_scalar(-0.5 / (sigma * sigma))?
            .exp()?;
        let weights = weights.div(&weights.sum_axis(1, true)?.add_scalar(1e-12)?)?;
        let hist = weights.mean_axes(&[2, 3], false)?;

        let luma = x.mean_axis(1, true)?;
        let edges = sobel_magnitude(&luma)?
            .mean_axes(&[1, 2, 3], false)?
            .reshape(&[b, 1])?;
        let luma_ref = Tensor::new((0..b).map(|k| luma.data()[k * hw]).collect(), &[b, 1, 1, 1])?;
        let l = luma.sub(&luma_ref)?.pad_replicate(1, 1, 1, 1)?;
        let boxk = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let lm = l.conv2d(&boxk, None, Conv2dSpec::default())?;
        let lv = l
            .square()?
            .conv2d(&boxk, None, Conv2dSpec::default())?
            .sub(&lm.square()?)?;
        let contrast = lv
            .add_scalar(CONTRAST_EPS)?
            .sqrt()?
            .add_scalar(-CONTRAST_EPS.sqrt())?
            .mean_axes(&[1, 2, 3], false)?
            .reshape(&[b, 1])?;

        let stats = Tensor::concat(
            &[
                means.mul_scalar(2.0)?.add_scalar(-1.0)?,
                vars.mul_scalar(8.0)?,
                hist.mul_scalar(4.0)?.add_scalar(-0.5)?,
                edges.mul_scalar(2.0)?,
                contrast.mul_scalar(4.0)?,
            ],
            1,
        )?;
        Ok(stats)
    }

    /// `(B, d)` embeddings.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.statistics(x)?.matmul(&self.projection)?)
    }
}

/// Smooth dark channel: `−T log mean exp(−x/T)` over channels and a window,
/// with edge replication; approaches the hard min as `T → 0`.
pub fn soft_dark_channel(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let b = s[0];
    let per = x.numel() / b;
    let floor = Tensor::new(
        (0..b)
            .map(|k| {
                x.data()[k * per..(k + 1) * per]
                    .iter()
                    .copied()
                    .fold(f64::INFINITY, f64::min)
            })
            .collect(),
        &[b, 1, 1, 1],
    )?;
    let r = DARK_WINDOW / 2;
    let z = x
        .sub(&floor)?
        .mul_scalar(-1.0 / SOFT_MIN_TEMPERATURE)?
        .exp()?
        .pad_replicate(r, r, r, r)?;
    let kernel = Tensor::full(
        &[1, s[1], DARK_WINDOW, DARK_WINDOW],
        1.0 / (s[1] * DARK_WINDOW * DARK_WINDOW) as f64,
    );
    let m = z.conv2d(&kernel, None, Conv2dSpec::default())?;
    Ok(m.log()?.mul_scalar(-SOFT_MIN_TEMPERATURE)?.add(&floor)?)
}

/// Embedding of a single image.
pub fn encode_image(img: &Image, enc: &ToyEncoder) -> Result<Vec<f64>> {
    let _g = no_grad();
    Ok(enc.encode(&img.to_tensor())?.to_vec())
}

/// The learned prompt vector, stored directly in embedding space.
#[derive(Debug, Clone)]
pub struct PromptState {
    pub vector: Tensor,
    pub steps: usize,
    pub final_loss: f64,
    pub encoder_tag: String,
}

impl PromptState {
    pub fn random(seed: u64, dim: usize) -> PromptState {
        let mut rng = substream(seed, &[0x7072_6f6d]);
        let v = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        PromptState {
            vector: Tensor::param(v, &[dim]).expect("prompt dims"),
            steps: 0,
            final_loss: f64::NAN,
            encoder_tag: ToyEncoder::TAG.into(),
        }
    }

    fn unit(&self) -> Result<Tensor> {
        let d = self.vector.numel();
        Ok(l2_normalize(&self.vector.reshape(&[1, d])?)?.reshape(&[d, 1])?)
    }

    /// Cosine between each `(B, d)` embedding and the prompt, shape `(B, 1)`.
    pub fn cosine(&self, e: &Tensor) -> Result<Tensor> {
        Ok(l2_normalize(e)?.matmul(&self.unit()?)?)
    }
}

/// Two-way softmax `e^{cos(e_I,p)} / (e^{cos(e_I,p)} + e^{cos(e_O,p)})` per row.
pub fn prompt_probability_embedded(
    e_i: &Tensor,
    e_other: &Tensor,
    prompt: &PromptState,
) -> Result<Tensor> {
    let logits = Tensor::concat(&[prompt.cosine(e_i)?, prompt.cosine(e_other)?], 1)?;
    Ok(logits.softmax(1)?.narrow(1, 0, 1)?)
}

pub fn prompt_probability(
    img: &Image,
    other: &Image,
    prompt: &PromptState,
    enc: &ToyEncoder,
) -> Result<f64> {
    let _g = no_grad();
    let p = prompt_probability_embedded(
        &enc.encode(&img.to_tensor())?,
        &enc.encode(&other.to_tensor())?,
        prompt,
    )?;
    Ok(p.data()[0])
}

/// Fraction of rows `k` where the prompt prefers `hazy[k]` over `clear[k]`
/// (probability above one half).
pub fn prompt_accuracy(hazy: &Tensor, clear: &Tensor, prompt: &PromptState) -> Result<f64> {
    if hazy.shape() != clear.shape() || hazy.shape().first().copied().unwrap_or(0) == 0 {
        return Err(Error::Contract(format!(
            "prompt accuracy of {:?} and {:?}",
            hazy.shape(),
            clear.shape()
        )));
    }
    let _g = no_grad();
    let p = prompt_probability_embedded(hazy, clear, prompt)?;
    Ok(p.data().iter().filter(|&&v| v > 0.5).count() as f64 / p.numel() as f64)
}

const BCE_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy of probabilities `y_hat` against label `y`.
pub fn prompt_bce_loss(y: f64, y_hat: &Tensor) -> Result<Tensor> {
    let p = y_hat.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let pos = p.log()?.mul_scalar(y)?;
    let neg = p.neg()?.add_scalar(1.0)?.log()?.mul_scalar(1.0 - y)?;
    Ok(pos.add(&neg)?.neg()?.mean()?)
}

/// Which images contribute to the guidance loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceTerms {
    /// Cross-entropy on both the hazy (label 1) and dehazed (label 0) image.
    #[default]
    Both,
    /// Only the dehazed image's term.
    Dehazed,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub steps: usize,
    pub lr: f64,
    pub embed_dim: usize,
    pub loss_terms: GuidanceTerms,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            steps: 1500,
            lr: 1e-2,
            embed_dim: 32,
            loss_terms: GuidanceTerms::Both,
        }
    }
}

/// Embeddings of a list of images, computed once (the encoder is frozen).
pub fn embed_all(images: &[Image], enc: &ToyEncoder) -> Result<Tensor> {
    let _g = no_grad();
    let refs: Vec<&Image> = images.iter().collect();
    let mut parts = Vec::new();
    for chunk in refs.chunks(64) {
        parts.push(enc.encode(&Image::batch(chunk)?)?);
    }
    Ok(Tensor::concat(&parts, 0)?)
}

/// Trains only the prompt vector with one random (hazy, clear) pair per step:
/// label 1 for the hazy image, 0 for the clear one.
pub fn train_prompt(
    hazy: &[Image],
    clear: &[Image],
    enc: &ToyEncoder,
    cfg: &PromptConfig,
    seed: u64,
) -> Result<PromptState> {
    if hazy.is_empty() || clear.is_empty() {
        return Err(Error::Contract(
            "prompt training needs hazy and clear images".into(),
        ));
    }
    let eh = embed_all(hazy, enc)?;
    let ec = embed_all(clear, enc)?;
    train_prompt_embedded(&eh, &ec, cfg, seed)
}

pub fn train_prompt_embedded(
    eh: &Tensor,
    ec: &Tensor,
    cfg: &PromptConfig,
    seed: u64,
) -> Result<PromptState> {
    let mut state = PromptState::random(seed, eh.shape()[1]);
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999);
    let mut rng = substream(seed, &[0x7072_6f6d, 1]);
    for _ in 0..cfg.steps {
        let i = rng.random_range(0..eh.shape()[0]);
        let j = rng.random_range(0..ec.shape()[0]);
        let (h, c) = (eh.index_select(0, &[i])?, ec.index_select(0, &[j])?);
        let yh = prompt_probability_embedded(&h, &c, &state)?;
        let yc = prompt_probability_embedded(&c, &h, &state)?;
        let loss = prompt_bce_loss(1.0, &yh)?.add(&prompt_bce_loss(0.0, &yc)?)?;
        loss.backward()?;
        opt.step(vec![&mut state.vector])?;
        state.final_loss = loss.item()?;
        state.steps += 1;
    }
    Ok(state)
}

/// Guidance loss: the frozen prompt should score the hazy input as hazy and
/// the generator's output as clear. The hazy side is a constant, so gradients
/// reach only the dehazed batch.
pub fn prompt_guidance_loss(
    hazy: &Tensor,
    dehazed: &Tensor,
    prompt: &PromptState,
    enc: &ToyEncoder,
    terms: GuidanceTerms,
) -> Result<Tensor> {
    let eh = {
        let _g = no_grad();
        enc.encode(hazy)?
    };
    let ed = enc.encode(dehazed)?;
    let frozen = PromptState {
        vector: prompt.vector.detach(),
        ..prompt.clone()
    };
    let yd = prompt_probability_embedded(&ed, &eh, &frozen)?;
    let dehazed_term = prompt_bce_loss(0.0, &yd)?;
    match terms {
        GuidanceTerms::Dehazed => Ok(dehazed_term),
        GuidanceTerms::Both => {
            let yh = prompt_probability_embedded(&eh, &ed, &frozen)?;
            Ok(prompt_bce_loss(1.0, &yh)?.add(&dehazed_term)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_at_one_half_is_ln_two() {
        let half = Tensor::scalar(0.5);
        assert_eq!(
            prompt_bce_loss(1.0, &half).unwrap().item().unwrap(),
            std::f64::consts::LN_2
        );
        assert_eq!(
            prompt_bce_loss(0.0, &half).unwrap().item().unwrap(),
            std::f64::consts::LN_2
        );
        let p = Tensor::scalar(1.0f64.exp() / (1.0f64.exp() + (-1.0f64).exp()));
        assert!((prompt_bce_loss(1.0, &p).unwrap().item().unwrap() - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn probability_closed_forms() {
        let prompt = PromptState {
            vector: Tensor::new(vec![1.0, 0.0], &[2]).unwrap(),
            steps: 0,
            final_loss: 0.0,
            encoder_tag: "t".into(),
        };
        let a = Tensor::new(vec![3.0, 0.0], &[1, 2]).unwrap();
        let b = Tensor::new(vec![-2.0, 0.0], &[1, 2]).unwrap();
        let y = prompt_probability_embedded(&a, &b, &prompt).unwrap().data()[0];
        assert!((y - 0.8808).abs() < 1e-4);
        assert_eq!(
            prompt_probability_embedded(&a, &a, &prompt).unwrap().data()[0],
            0.5
        );
    }

    #[test]
    fn constant_image_statistics() {
        let enc = ToyEncoder::new(0, 32);
        let s = enc
            .statistics(&Tensor::full(&[1, 3, 16, 16], 0.37))
            .unwrap();
        let v = s.data();
        assert_eq!(&v[3..6], &[0.0; 3]);
        assert_eq!(v[14], 0.0);
        assert_eq!(v[15], 0.0);
    }

    #[test]
    fn zero_steps_keep_the_initial_prompt() {
        let e = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let cfg = PromptConfig {
            steps: 0,
            ..PromptConfig::default()
        };
        let p = train_prompt_embedded(&e, &e, &cfg, 4).unwrap();
        assert_eq!(p.vector.data(), PromptState::random(4, 2).vector.data());
    }
}
