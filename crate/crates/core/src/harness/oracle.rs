//! Property suites comparing the implementation with closed forms and
//! exhaustive references. Each check reports a measured value against a bound.

use hazebridge_tensor::{grad_check, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bridge::{bridge_posterior, markov_step, sub_bridge_posterior, BridgeSchedule};
use crate::error::Result;
use crate::harness::data::procedural_clear_image;
use crate::harness::metrics::psnr;
use crate::haze::{apply_asm, dcp_dehaze, physical_prior_loss, DcpParams};
use crate::img::Image;
use crate::nets::{
    EntropyCritic, Generator, GeneratorConfig, GlobalDiscriminator, PatchDiscriminator,
    PerceptualNet,
};
use crate::ot::{brute_force_ot, sinkhorn_scaled, Matrix, SinkhornOptions};
use crate::prompt::{prompt_guidance_loss, GuidanceTerms, PromptState, ToyEncoder};
use crate::regularizers::{
    dft_loss, gather_patches, hfd_loss, patch_nce_loss, sample_locations, sobel_loss, ssim,
    ssim_loss, HfdConfig,
};
use crate::rng::{substream, Sequential};
use crate::trainer::{lsgan_generator, sb_loss, total_loss, LossComponents, LossWeights};

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: String,
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
}

impl OracleCheck {
    /// Passes when `value < bound`.
    pub fn below(name: impl Into<String>, value: f64, bound: f64) -> OracleCheck {
        OracleCheck {
            name: name.into(),
            value,
            bound,
            passed: value < bound,
        }
    }

    pub fn exact(name: impl Into<String>, value: f64, expected: f64) -> OracleCheck {
        OracleCheck {
            name: name.into(),
            value,
            bound: expected,
            passed: value == expected,
        }
    }
}

impl std::fmt::Display for OracleCheck {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{verdict} {} value={:.6e} bound={:.6e}",
            self.name, self.value, self.bound
        )
    }
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

const START: f64 = 1.0;
const END: f64 = 3.0;

/// Chains driven by a predictor that always returns the true endpoint:
/// relative error of the sample mean and variance at each interior grid time.
pub fn bridge_marginals(
    samples: usize,
    intervals: usize,
    tau: f64,
    seed: u64,
) -> Result<Vec<OracleCheck>> {
    let schedule = BridgeSchedule::new(intervals, tau)?;
    let mut noise = Sequential(substream(seed, &[0x6d61_7267]));
    let x1 = Tensor::full(&[samples, 1], END);
    let mut x = Tensor::full(&[samples, 1], START);
    let mut checks = Vec::new();
    for j in 0..intervals {
        let (t, t_next) = (schedule.time(j), schedule.time(j + 1));
        x = markov_step(&x, &x1, t, t_next, tau, &mut noise)?;
        let (mean, var) = moments(x.data());
        let want_mean = t_next * END + (1.0 - t_next) * START;
        let want_var = t_next * (1.0 - t_next) * tau;
        if j + 1 == intervals {
            checks.push(OracleCheck::exact("bridge endpoint mean", mean, END));
            checks.push(OracleCheck::exact("bridge endpoint variance", var, 0.0));
        } else {
            checks.push(OracleCheck::below(
                format!("bridge mean rel err t={t_next:.2}"),
                (mean - want_mean).abs() / want_mean,
                0.01,
            ));
            checks.push(OracleCheck::below(
                format!("bridge variance rel err t={t_next:.2}"),
                (var - want_var).abs() / want_var,
                0.01,
            ));
        }
    }
    Ok(checks)
}

/// Sampling at `t` through an intermediate time `t_a` versus directly: relative
/// disagreement of the sample mean and standard deviation.
pub fn self_similarity(
    samples: usize,
    t_a: f64,
    t: f64,
    tau: f64,
    seed: u64,
) -> Result<Vec<OracleCheck>> {
    let mut noise = Sequential(substream(seed, &[0x7365_6c66]));
    let x0 = Tensor::full(&[samples, 1], START);
    let x1 = Tensor::full(&[samples, 1], END);
    let direct = bridge_posterior(&x0, &x1, t, tau)?.sample(&mut noise)?;
    let x_a = bridge_posterior(&x0, &x1, t_a, tau)?.sample(&mut noise)?;
    let staged = sub_bridge_posterior(&x_a, &x1, t, t_a, 1.0, tau)?.sample(&mut noise)?;
    let (md, vd) = moments(direct.data());
    let (ms, vs) = moments(staged.data());
    Ok(vec![
        OracleCheck::below(
            "self-similarity mean rel diff",
            (md - ms).abs() / md.abs(),
            0.01,
        ),
        OracleCheck::below(
            "self-similarity std rel diff",
            (vd.sqrt() - vs.sqrt()).abs() / vd.sqrt(),
            0.01,
        ),
    ])
}

/// Uniform-marginal point-cloud instances of size `n`: transport-cost gap of
/// Sinkhorn at `epsilon` to exhaustive search, and the Sinkhorn marginal violation.
pub fn ot_against_brute_force(
    sizes: &[usize],
    instances: usize,
    epsilon: f64,
    seed: u64,
) -> Result<Vec<OracleCheck>> {
    let mut rng = substream(seed, &[0x6f74]);
    let mut gap = 0.0f64;
    let mut violation = 0.0f64;
    for &n in sizes {
        for _ in 0..instances {
            let pts = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..n)
                    .map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
                    .collect()
            };
            let (xs, ys) = (pts(&mut rng), pts(&mut rng));
            let cost = Matrix::sq_euclidean(&xs, &ys);
            let u = vec![1.0 / n as f64; n];
            let exact = brute_force_ot(&cost, &u, &u)?;
            let run = sinkhorn_scaled(
                &cost,
                &u,
                &u,
                SinkhornOptions {
                    epsilon,
                    max_iter: 100_000,
                    tol: 1e-7,
                },
                1.0,
            )?;
            gap = gap.max((run.coupling.transport_cost(&cost) - exact.transport_cost(&cost)).abs());
            violation = violation.max(run.coupling.marginal_violation());
        }
    }
    Ok(vec![
        OracleCheck::below(
            format!("sinkhorn eps={epsilon:e} cost gap to exhaustive"),
            gap,
            1e-2,
        ),
        OracleCheck::below("sinkhorn marginal violation", violation, 1e-6),
    ])
}

/// Small networks and inputs on which every objective term is differentiated.
pub struct LossFixture {
    pub hazy: Tensor,
    pub x_t: Tensor,
    pub fake: Tensor,
    pub clear_like: Tensor,
    pub t_ref: Tensor,
    pub light: Tensor,
    pub generator: Generator,
    pub patch: PatchDiscriminator,
    pub global: GlobalDiscriminator,
    pub critic: EntropyCritic,
    pub encoder: ToyEncoder,
    pub perceptual: PerceptualNet,
    pub prompt: PromptState,
    pub locations: Vec<Vec<usize>>,
    pub hfd: HfdConfig,
}

impl LossFixture {
    pub const BATCH: usize = 2;
    pub const SIZE: usize = 8;

    pub fn new(seed: u64) -> Result<LossFixture> {
        let mut rng = substream(seed, &[0x6772_6164]);
        let (b, s) = (Self::BATCH, Self::SIZE);
        let mut image = |lo: f64, hi: f64, c: usize| -> Result<Tensor> {
            Ok(Tensor::new(
                (0..b * c * s * s)
                    .map(|_| rng.random_range(lo..hi))
                    .collect(),
                &[b, c, s, s],
            )?)
        };
        let hazy = image(0.3, 1.0, 3)?;
        let x_t = image(0.1, 0.9, 3)?;
        let fake = image(0.05, 0.95, 3)?;
        let clear_like = image(0.0, 1.0, 3)?;
        let t_ref = image(0.2, 1.0, 1)?;
        let light = Tensor::new(
            (0..b * 3).map(|_| rng.random_range(0.7..1.0)).collect(),
            &[b, 3, 1, 1],
        )?;
        let mut nets = ChaCha8Rng::seed_from_u64(seed);
        let generator = Generator::new(
            &mut nets,
            GeneratorConfig {
                base_channels: 4,
                width: 8,
                blocks: 1,
            },
        );
        let maps = generator.features(&x_t, 0.0)?;
        let locations = sample_locations(&mut nets, &maps, 6);
        Ok(LossFixture {
            patch: PatchDiscriminator::new(&mut nets),
            global: GlobalDiscriminator::new(&mut nets, 8),
            critic: EntropyCritic::new(&mut nets, 3 * s * s, 1, 8),
            encoder: ToyEncoder::new(seed, 8),
            perceptual: PerceptualNet::new(seed),
            prompt: PromptState::random(seed, 8),
            generator,
            locations,
            hfd: HfdConfig::default(),
            hazy,
            x_t,
            fake,
            clear_like,
            t_ref,
            light,
        })
    }

    pub const T: f64 = 0.4;
    pub const TAU: f64 = 0.5;

    pub fn adv(&self, fake: &Tensor) -> Result<Tensor> {
        let patch = lsgan_generator(&self.patch.forward(fake, Self::T)?)?;
        Ok(patch.add(&lsgan_generator(
            &self.global.forward(fake, &self.encoder)?,
        )?)?)
    }

    pub fn sb(&self, fake: &Tensor) -> Result<Tensor> {
        sb_loss(&self.x_t, fake, Self::T, Self::TAU, &self.critic)
    }

    pub fn prompt(&self, fake: &Tensor) -> Result<Tensor> {
        prompt_guidance_loss(
            &self.hazy,
            fake,
            &self.prompt,
            &self.encoder,
            GuidanceTerms::Both,
        )
    }

    pub fn nce(&self, fake: &Tensor) -> Result<Tensor> {
        let feats_in = self
            .generator
            .features(&self.x_t, 0.0)?
            .iter()
            .map(Tensor::detach)
            .collect::<Vec<_>>();
        let feats_out = self.generator.features(fake, 0.0)?;
        patch_nce_loss(
            &gather_patches(&feats_in, &self.locations, 0.07)?,
            &gather_patches(&feats_out, &self.locations, 0.07)?,
        )
    }

    pub fn phy(&self, fake: &Tensor) -> Result<Tensor> {
        physical_prior_loss(&self.hazy, fake, &self.t_ref, &self.light, &self.perceptual)
    }

    pub fn phy_transmission(&self, t_ref: &Tensor) -> Result<Tensor> {
        physical_prior_loss(&self.hazy, &self.fake, t_ref, &self.light, &self.perceptual)
    }

    pub fn hfd(&self, fake: &Tensor) -> Result<Tensor> {
        hfd_loss(fake, &self.clear_like, &self.hfd)
    }

    pub fn components(&self, fake: &Tensor) -> Result<LossComponents> {
        Ok(LossComponents {
            adv: self.adv(fake)?,
            sb: self.sb(fake)?,
            prompt: self.prompt(fake)?,
            nce: self.nce(fake)?,
            phy: self.phy(fake)?,
            hfd: self.hfd(fake)?,
        })
    }

    pub fn total(&self, fake: &Tensor) -> Result<Tensor> {
        total_loss(&self.components(fake)?, &LossWeights::default())
    }
}

pub const GRAD_EPS: f64 = 1e-6;

/// Largest relative gradient error of each objective term over `trials` fixtures.
pub fn loss_gradients(trials: usize, seed: u64) -> Result<Vec<OracleCheck>> {
    type Term = fn(&LossFixture, &Tensor) -> Result<Tensor>;
    let terms: [(&str, Term, bool); 8] = [
        ("adversarial", LossFixture::adv, false),
        ("bridge", LossFixture::sb, false),
        ("prompt", LossFixture::prompt, false),
        ("patch-nce", LossFixture::nce, false),
        ("physical prior (image)", LossFixture::phy, false),
        (
            "physical prior (transmission)",
            LossFixture::phy_transmission,
            true,
        ),
        ("high-frequency detail", LossFixture::hfd, false),
        ("total", LossFixture::total, false),
    ];
    let fixtures = (0..trials)
        .map(|k| LossFixture::new(seed.wrapping_add(k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut checks = Vec::new();
    for (name, term, on_transmission) in terms {
        let mut worst = 0.0f64;
        for fx in &fixtures {
            let x = if on_transmission { &fx.t_ref } else { &fx.fake };
            worst = worst.max(grad_check(
                |v| term(fx, v).map_err(to_tensor_error),
                x,
                GRAD_EPS,
            )?);
        }
        checks.push(OracleCheck::below(
            format!("grad check {name}"),
            worst,
            1e-4,
        ));
    }
    Ok(checks)
}

fn to_tensor_error(e: crate::Error) -> hazebridge_tensor::TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => hazebridge_tensor::TensorError::Contract(other.to_string()),
    }
}

/// Exact zeros of the detail losses at equal inputs, shift invariance of the
/// amplitude loss, and the constant-pair SSIM value.
pub fn regularizer_identities(seed: u64) -> Result<Vec<OracleCheck>> {
    let mut rng = substream(seed, &[0x6964]);
    let (b, c, s) = (2, 3, 16);
    let a = Tensor::new(
        (0..b * c * s * s)
            .map(|_| rng.random_range(0.0..1.0))
            .collect(),
        &[b, c, s, s],
    )?;
    let cfg = HfdConfig::default();
    let shift = 5;
    let mut shifted = vec![0.0; a.numel()];
    for p in 0..b * c {
        for y in 0..s {
            for x in 0..s {
                shifted[(p * s + (y + shift) % s) * s + (x + 2 * shift) % s] =
                    a.data()[(p * s + y) * s + x];
            }
        }
    }
    let shifted = Tensor::new(shifted, a.shape())?;
    let x = Tensor::full(&[1, 1, 8, 8], 0.2);
    let y = Tensor::full(&[1, 1, 8, 8], 0.8);
    Ok(vec![
        OracleCheck::exact("dft_loss(a, a)", dft_loss(&a, &a)?.item()?, 0.0),
        OracleCheck::exact("ssim_loss(a, a)", ssim_loss(&a, &a, &cfg)?.item()?, 0.0),
        OracleCheck::exact("sobel_loss(a, a)", sobel_loss(&a, &a)?.item()?, 0.0),
        OracleCheck::exact("hfd_loss(a, a)", hfd_loss(&a, &a, &cfg)?.item()?, 0.0),
        OracleCheck::below(
            "dft_loss of circular shift",
            dft_loss(&a, &shifted)?.item()?,
            1e-10,
        ),
        OracleCheck::below(
            "ssim constant pair |value - 0.4707|",
            (ssim(&x, &y, &cfg)?.item()? - 0.4707).abs(),
            1e-3,
        ),
    ])
}

/// Procedural scenes whose sky equals the atmospheric light and whose ground
/// pixels each have a zero channel, hazed with a uniform transmission in
/// `[0.6, 0.95]`: worst PSNR of the dark-channel restoration against the scene.
pub fn dcp_round_trip(instances: usize, size: usize, seed: u64) -> Result<OracleCheck> {
    let mut rng = substream(seed, &[0x6463_70]);
    let mut worst = f64::INFINITY;
    for _ in 0..instances {
        let light = rng.random_range(0.8..1.0);
        let t = rng.random_range(0.6..0.95);
        let mut scene = procedural_clear_image(&mut rng, size, size);
        for p in 0..scene.pixels() {
            if (0..3).all(|c| scene.plane(c)[p] > 0.0) {
                (0..3).for_each(|c| scene.plane_mut(c)[p] = light);
            }
        }
        let hazy = apply_asm(&scene, &Image::filled(1, size, size, t), &[light; 3])?;
        let restored = dcp_dehaze(&hazy, &DcpParams::default())?.dehazed;
        worst = worst.min(psnr(&restored, &scene)?);
    }
    Ok(OracleCheck {
        name: "dark-channel round trip worst PSNR (dB)".into(),
        value: worst,
        bound: 30.0,
        passed: worst >= 30.0,
    })
}
