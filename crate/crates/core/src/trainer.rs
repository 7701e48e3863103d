//! Bridge training: chain rollout to a random grid time, the transport and
//! entropy objective, least-squares adversarial losses, the weighted total,
//! one optimisation step, and arbitrary-NFE sampling.

use hazebridge_tensor::nn::Module;
use hazebridge_tensor::optim::Adam;
use hazebridge_tensor::{no_grad, Tensor};
use rand::Rng;

use crate::bridge::{markov_step, roll_chain, BridgeSchedule};
use crate::error::{Error, Result};
use crate::haze::{dcp_dehaze, physical_prior_loss, DcpParams};
use crate::img::Image;
use crate::nets::{
    EntropyCritic, Generator, GeneratorConfig, GlobalDiscriminator, PatchDiscriminator,
    PerceptualNet, PointDiscriminator, PointGenerator, Refiner,
};
use crate::prompt::{prompt_guidance_loss, GuidanceTerms, PromptState, ToyEncoder};
use crate::regularizers::{gather_patches, hfd_loss, patch_nce_loss, sample_locations, HfdConfig};
use crate::rng::{substream, NoiseStream, SampleStreams};

/// Stream tags separating the random draws of one step.
mod tag {
    pub const TIME: u64 = 1;
    pub const CHAIN: u64 = 2;
    pub const NCE: u64 = 3;
    pub const INFER: u64 = 4;
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_sb: f64,
    pub lambda_p: f64,
    pub lambda_nce: f64,
    pub lambda_phy: f64,
    pub lambda_hfd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_sb: 1.0,
            lambda_p: 1.0,
            lambda_nce: 1.0,
            lambda_phy: 0.5,
            lambda_hfd: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_sb,
            self.lambda_p,
            self.lambda_nce,
            self.lambda_phy,
            self.lambda_hfd,
        ];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative, got {all:?}"
            )));
        }
        Ok(())
    }
}

/// The six terms of the generator objective, each a scalar tensor.
#[derive(Debug, Clone)]
pub struct LossComponents {
    pub adv: Tensor,
    pub sb: Tensor,
    pub prompt: Tensor,
    pub nce: Tensor,
    pub phy: Tensor,
    pub hfd: Tensor,
}

/// `adv + λ_sb·sb + λ_p·prompt + λ_nce·nce + λ_phy·phy + λ_hfd·hfd`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<Tensor> {
    let mut total = c.adv.clone();
    for (term, weight) in [
        (&c.sb, w.lambda_sb),
        (&c.prompt, w.lambda_p),
        (&c.nce, w.lambda_nce),
        (&c.phy, w.lambda_phy),
        (&c.hfd, w.lambda_hfd),
    ] {
        total = total.add(&term.mul_scalar(weight)?)?;
    }
    Ok(total)
}

/// Contrastive lower bound on the dependence between bridge states and their
/// predicted endpoints: mean over `i` of `c(x_i, y_i) − log Σ_j c(x_i, y_j)`
/// plus `log B`. It lies in `[−∞, log B]` and is 0 when pairs are indistinguishable.
pub fn estimate_entropy(x_ti: &Tensor, x1_pred: &Tensor, critic: &EntropyCritic) -> Result<Tensor> {
    let b = x_ti.shape().first().copied().unwrap_or(0);
    if b < 2 {
        return Err(Error::Contract(format!(
            "entropy estimate needs at least 2 pairs, got {b}"
        )));
    }
    let s = critic.scores(x_ti, x1_pred)?;
    let eye = Tensor::new(
        (0..b * b)
            .map(|k| if k / b == k % b { 1.0 } else { 0.0 })
            .collect(),
        &[b, b],
    )?;
    let pos = s.mul(&eye)?.sum_axis(1, false)?;
    let lse = s.logsumexp(1, false)?;
    Ok(pos.sub(&lse)?.mean()?.add_scalar((b as f64).ln())?)
}

/// Mean squared displacement minus `2τ(1 − t)` times the entropy estimate;
/// returns the loss and the estimate.
pub fn sb_loss_parts(
    x_ti: &Tensor,
    x1_pred: &Tensor,
    t_i: f64,
    tau: f64,
    critic: &EntropyCritic,
) -> Result<(Tensor, Tensor)> {
    if x_ti.shape() != x1_pred.shape() {
        return Err(Error::Contract(format!(
            "sb_loss of {:?} and {:?}",
            x_ti.shape(),
            x1_pred.shape()
        )));
    }
    let transport = x_ti.sub(x1_pred)?.square()?.mean()?;
    let weight = 2.0 * tau * (1.0 - t_i);
    if weight == 0.0 {
        return Ok((transport, Tensor::scalar(0.0)));
    }
    let h = estimate_entropy(x_ti, x1_pred, critic)?;
    Ok((transport.sub(&h.mul_scalar(weight)?)?, h))
}

pub fn sb_loss(
    x_ti: &Tensor,
    x1_pred: &Tensor,
    t_i: f64,
    tau: f64,
    critic: &EntropyCritic,
) -> Result<Tensor> {
    Ok(sb_loss_parts(x_ti, x1_pred, t_i, tau, critic)?.0)
}

/// Least-squares critic loss: real logits toward 1, fake logits toward 0.
pub fn lsgan_critic(real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    Ok(real
        .add_scalar(-1.0)?
        .square()?
        .mean()?
        .add(&fake.square()?.mean()?)?)
}

/// Least-squares generator loss: fake logits toward the real target 1.
pub fn lsgan_generator(fake: &Tensor) -> Result<Tensor> {
    Ok(fake.add_scalar(-1.0)?.square()?.mean()?)
}

/// Discriminators of the image model.
pub struct ImageCritics<'a> {
    pub patch: &'a PatchDiscriminator,
    pub global: &'a GlobalDiscriminator,
    pub encoder: &'a ToyEncoder,
}

/// `(generator loss, discriminator loss)` summed over both discriminators; the
/// discriminator loss sees the fakes detached.
pub fn adversarial_losses(
    real: &Tensor,
    fake: &Tensor,
    t_i: f64,
    nets: &ImageCritics<'_>,
) -> Result<(Tensor, Tensor)> {
    let detached = fake.detach();
    let d_patch = lsgan_critic(
        &nets.patch.forward(real, t_i)?,
        &nets.patch.forward(&detached, t_i)?,
    )?;
    let d_global = lsgan_critic(
        &nets.global.forward(real, nets.encoder)?,
        &nets.global.forward(&detached, nets.encoder)?,
    )?;
    let g_patch = lsgan_generator(&nets.patch.forward(fake, t_i)?)?;
    let g_global = lsgan_generator(&nets.global.forward(fake, nets.encoder)?)?;
    Ok((g_patch.add(&g_global)?, d_patch.add(&d_global)?))
}

/// Chain length for `step`: uniform on `{0, …, n − 1}`.
pub fn time_index(seed: u64, step: u64, n: usize) -> usize {
    substream(seed, &[tag::TIME, step]).random_range(0..n)
}

/// Samples with `nfe` generator calls on a uniform re-discretization of [0, 1].
/// The last call's prediction is returned as is.
pub fn infer<F>(
    x0: &Tensor,
    nfe: usize,
    mut predict: F,
    schedule: &BridgeSchedule,
    noise: &mut dyn NoiseStream,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, f64) -> Result<Tensor>,
{
    if nfe < 1 || nfe > schedule.n_intervals() {
        return Err(Error::Contract(format!(
            "nfe must lie in 1..={}, got {nfe}",
            schedule.n_intervals()
        )));
    }
    let _g = no_grad();
    let grid = schedule.with_intervals(nfe)?;
    let mut x = x0.detach();
    for k in 0..nfe {
        let x1 = predict(&x, grid.time(k))?;
        if k + 1 == nfe {
            return Ok(x1);
        }
        x = markov_step(&x, &x1, grid.time(k), grid.time(k + 1), grid.tau(), noise)?;
    }
    unreachable!("loop returns on its last iteration")
}

/// Noise for inferring samples `first_sample..` of a dataset.
pub fn inference_noise(seed: u64, first_sample: u64) -> SampleStreams {
    SampleStreams::new(seed, tag::INFER, first_sample)
}

/// Scalar values of one step's losses, for logging.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub time_index: usize,
    pub total: f64,
    pub adv: f64,
    pub sb: f64,
    pub entropy: f64,
    pub prompt: f64,
    pub nce: f64,
    pub phy: f64,
    pub hfd: f64,
    pub d_loss: f64,
    pub critic_bound: f64,
}

impl StepReport {
    pub const COLUMNS: [&'static str; 12] = [
        "step",
        "time_index",
        "total",
        "adv",
        "sb",
        "entropy",
        "prompt",
        "nce",
        "phy",
        "hfd",
        "d_loss",
        "critic_bound",
    ];

    pub fn values(&self) -> [String; 12] {
        let f = |v: f64| format!("{v:e}");
        [
            self.step.to_string(),
            self.time_index.to_string(),
            f(self.total),
            f(self.adv),
            f(self.sb),
            f(self.entropy),
            f(self.prompt),
            f(self.nce),
            f(self.phy),
            f(self.hfd),
            f(self.d_loss),
            f(self.critic_bound),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> Adam {
        Adam::new(self.lr, self.beta1, self.beta2)
    }
}

/// Hyperparameters of the image model's training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageTrainConfig {
    pub weights: LossWeights,
    pub optim: OptimConfig,
    pub hfd: HfdConfig,
    pub dcp: DcpParams,
    pub generator: GeneratorConfig,
    pub nce_locations: usize,
    pub nce_temperature: f64,
    pub guidance: GuidanceTerms,
    pub embed_dim: usize,
    pub critic_hidden: usize,
    /// Height and width of training images.
    pub image_size: [usize; 2],
}

impl Default for ImageTrainConfig {
    fn default() -> Self {
        ImageTrainConfig {
            weights: LossWeights::default(),
            optim: OptimConfig::default(),
            hfd: HfdConfig::default(),
            dcp: DcpParams::default(),
            generator: GeneratorConfig::default(),
            nce_locations: 64,
            nce_temperature: 0.07,
            guidance: GuidanceTerms::Both,
            embed_dim: 32,
            critic_hidden: 32,
            image_size: [32, 32],
        }
    }
}

/// Per-image quantities from dark-channel dehazing of a hazy batch.
#[derive(Debug, Clone)]
pub struct HazePriors {
    /// `(B, 3, 1, 1)` atmospheric light.
    pub light: Tensor,
    /// `(B, 1, H, W)` coarse transmission.
    pub transmission: Tensor,
    /// `(B, 3, H, W)` dark-channel-prior restoration.
    pub dehazed: Tensor,
}

impl HazePriors {
    pub fn estimate(hazy: &Tensor, params: &DcpParams) -> Result<HazePriors> {
        let images = Image::unbatch(hazy)?;
        let mut light = Vec::new();
        let (mut trans, mut deh) = (Vec::new(), Vec::new());
        for img in &images {
            let r = dcp_dehaze(img, params)?;
            light.extend_from_slice(&r.atmospheric_light);
            trans.push(r.transmission);
            deh.push(r.dehazed);
        }
        let b = images.len();
        Ok(HazePriors {
            light: Tensor::new(light, &[b, images[0].channels, 1, 1])?,
            transmission: Image::batch(&trans.iter().collect::<Vec<_>>())?,
            dehazed: Image::batch(&deh.iter().collect::<Vec<_>>())?,
        })
    }
}

/// Everything the image model trains or consults.
pub struct ImageModels {
    pub generator: Generator,
    pub patch: PatchDiscriminator,
    pub global: GlobalDiscriminator,
    pub critic: EntropyCritic,
    pub refiner: Refiner,
    pub encoder: ToyEncoder,
    pub perceptual: PerceptualNet,
    pub prompt: PromptState,
}

/// Optimiser moments of every trained network.
pub struct Optimizers {
    pub generator: Adam,
    pub refiner: Adam,
    pub discriminator: Adam,
    pub critic: Adam,
}

impl Optimizers {
    pub fn new(cfg: &OptimConfig) -> Optimizers {
        Optimizers {
            generator: cfg.adam(),
            refiner: cfg.adam(),
            discriminator: cfg.adam(),
            critic: cfg.adam(),
        }
    }

    pub fn named(&self) -> [(&'static str, &Adam); 4] {
        [
            ("generator", &self.generator),
            ("refiner", &self.refiner),
            ("discriminator", &self.discriminator),
            ("critic", &self.critic),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Adam); 4] {
        [
            ("generator", &mut self.generator),
            ("refiner", &mut self.refiner),
            ("discriminator", &mut self.discriminator),
            ("critic", &mut self.critic),
        ]
    }
}

pub struct ImageTrainState {
    pub cfg: ImageTrainConfig,
    pub models: ImageModels,
    pub opt: Optimizers,
    pub step: u64,
    pub seed: u64,
}

fn zero_grads(ms: &[&dyn ModuleRef]) {
    for m in ms {
        m.clear();
    }
}

/// Object-safe view used to clear gradients on heterogeneous modules.
trait ModuleRef {
    fn clear(&self);
}

impl<M: Module> ModuleRef for M {
    fn clear(&self) {
        self.zero_grad();
    }
}

impl ImageTrainState {
    /// Fresh networks initialised from `seed`; `prompt` should already be trained.
    pub fn new(cfg: ImageTrainConfig, seed: u64, prompt: PromptState) -> ImageTrainState {
        let mut rng = substream(seed, &[0x696e_6974]);
        let encoder = ToyEncoder::new(seed, cfg.embed_dim);
        let [h, w] = cfg.image_size;
        let pool = (h.min(w) / 8).max(1);
        let models = ImageModels {
            generator: Generator::new(&mut rng, cfg.generator),
            patch: PatchDiscriminator::new(&mut rng),
            global: GlobalDiscriminator::new(&mut rng, cfg.embed_dim),
            critic: EntropyCritic::new(
                &mut rng,
                3 * (h / pool) * (w / pool),
                pool,
                cfg.critic_hidden,
            ),
            refiner: Refiner::new(&mut rng, cfg.dcp.t_min),
            encoder,
            perceptual: PerceptualNet::new(seed),
            prompt,
        };
        ImageTrainState {
            cfg,
            models,
            opt: Optimizers::new(&cfg.optim),
            step: 0,
            seed,
        }
    }

    pub fn predict(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.models.generator.forward(x, t)
    }

    /// Generator objective on a fixed batch at chain index `i`, without updating anything.
    pub fn components(
        &self,
        hazy: &Tensor,
        clear: &Tensor,
        x_t: &Tensor,
        t_i: f64,
        tau: f64,
        priors: &HazePriors,
        locations: &[Vec<usize>],
    ) -> Result<(LossComponents, Tensor, Tensor)> {
        let m = &self.models;
        let fake = m.generator.forward(x_t, t_i)?;
        let critics = ImageCritics {
            patch: &m.patch,
            global: &m.global,
            encoder: &m.encoder,
        };
        let (adv, _) = adversarial_losses(clear, &fake, t_i, &critics)?;
        let (sb, h) = sb_loss_parts(x_t, &fake, t_i, tau, &m.critic)?;
        let prompt = prompt_guidance_loss(hazy, &fake, &m.prompt, &m.encoder, self.cfg.guidance)?;
        let feats_in = {
            let _g = no_grad();
            m.generator.features(x_t, 0.0)?
        };
        let feats_out = m.generator.features(&fake, 0.0)?;
        let nce = patch_nce_loss(
            &gather_patches(&feats_in, locations, self.cfg.nce_temperature)?,
            &gather_patches(&feats_out, locations, self.cfg.nce_temperature)?,
        )?;
        let t_ref = m.refiner.forward(&priors.transmission)?;
        let phy = physical_prior_loss(hazy, &fake, &t_ref, &priors.light, &m.perceptual)?;
        let hfd = hfd_loss(&fake, &priors.dehazed, &self.cfg.hfd)?;
        Ok((
            LossComponents {
                adv,
                sb,
                prompt,
                nce,
                phy,
                hfd,
            },
            fake,
            h,
        ))
    }

    /// One update: discriminators, then generator and refiner, then the entropy critic.
    pub fn train_step(
        &mut self,
        hazy: &Tensor,
        clear: &Tensor,
        schedule: &BridgeSchedule,
    ) -> Result<StepReport> {
        let (seed, step) = (self.seed, self.step);
        let n = schedule.n_intervals();
        let i = time_index(seed, step, n);
        let t_i = schedule.time(i);
        let x_t = {
            let g = &self.models.generator;
            let mut noise = SampleStreams::new(seed, tag::CHAIN ^ (step << 8), 0);
            roll_chain(hazy, |x, t| g.forward(x, t), i, schedule, &mut noise)?
        };
        let priors = HazePriors::estimate(hazy, &self.cfg.dcp)?;

        // discriminators
        let fake = {
            let _g = no_grad();
            self.models.generator.forward(&x_t, t_i)?
        };
        let m = &mut self.models;
        zero_grads(&[&m.patch, &m.global]);
        let d_loss = lsgan_critic(&m.patch.forward(clear, t_i)?, &m.patch.forward(&fake, t_i)?)?
            .add(&lsgan_critic(
                &m.global.forward(clear, &m.encoder)?,
                &m.global.forward(&fake, &m.encoder)?,
            )?)?;
        d_loss.backward()?;
        let mut dparams = m.patch.params_mut();
        dparams.extend(m.global.params_mut());
        self.opt.discriminator.step(dparams)?;

        // generator and refiner
        let maps = {
            let _g = no_grad();
            self.models.generator.features(&x_t, 0.0)?
        };
        let locations = sample_locations(
            &mut substream(seed, &[tag::NCE, step]),
            &maps,
            self.cfg.nce_locations,
        );
        let (c, fake, h) =
            self.components(hazy, clear, &x_t, t_i, schedule.tau(), &priors, &locations)?;
        let total = total_loss(&c, &self.cfg.weights)?;
        let m = &mut self.models;
        zero_grads(&[&m.generator, &m.refiner]);
        total.backward()?;
        self.opt.generator.step(m.generator.params_mut())?;
        self.opt.refiner.step(m.refiner.params_mut())?;

        // entropy critic
        zero_grads(&[&m.critic]);
        let bound = estimate_entropy(&x_t, &fake.detach(), &m.critic)?;
        bound.neg()?.backward()?;
        self.opt.critic.step(m.critic.params_mut())?;

        self.step += 1;
        let v = |t: &Tensor| t.item().map_err(Error::from);
        Ok(StepReport {
            step,
            time_index: i,
            total: v(&total)?,
            adv: v(&c.adv)?,
            sb: v(&c.sb)?,
            entropy: v(&h)?,
            prompt: v(&c.prompt)?,
            nce: v(&c.nce)?,
            phy: v(&c.phy)?,
            hfd: v(&c.hfd)?,
            d_loss: v(&d_loss)?,
            critic_bound: v(&bound)?,
        })
    }

    /// Named tensors for every trained network and the prompt.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let m = &self.models;
        let mut out = Vec::new();
        for (prefix, module) in [
            ("generator", &m.generator as &dyn DynModule),
            ("patch", &m.patch),
            ("global", &m.global),
            ("critic", &m.critic),
            ("refiner", &m.refiner),
        ] {
            out.extend(
                module
                    .state_dyn()
                    .into_iter()
                    .map(|(n, t)| (format!("{prefix}.{n}"), t)),
            );
        }
        out.push(("prompt.vector".into(), m.prompt.vector.detach()));
        out
    }
}

/// Object-safe access to parameter state across network types.
pub(crate) trait DynModule {
    fn state_dyn(&self) -> Vec<(String, Tensor)>;
    fn load_dyn(&mut self, state: &std::collections::HashMap<String, Tensor>) -> Result<()>;
}

impl<M: Module> DynModule for M {
    fn state_dyn(&self) -> Vec<(String, Tensor)> {
        self.state()
    }

    fn load_dyn(&mut self, state: &std::collections::HashMap<String, Tensor>) -> Result<()> {
        Ok(self.load_state(state)?)
    }
}

/// Networks of the 2-D point-cloud model.
pub struct PointModels {
    pub generator: PointGenerator,
    pub discriminator: PointDiscriminator,
    pub critic: EntropyCritic,
}

pub struct PointTrainState {
    pub weights: LossWeights,
    pub models: PointModels,
    pub opt: Optimizers,
    pub step: u64,
    pub seed: u64,
}

impl PointTrainState {
    pub fn new(
        weights: LossWeights,
        optim: OptimConfig,
        seed: u64,
        hidden: usize,
        critic_hidden: usize,
    ) -> PointTrainState {
        let mut rng = substream(seed, &[0x696e_6974]);
        let models = PointModels {
            generator: PointGenerator::new(&mut rng, hidden),
            discriminator: PointDiscriminator::new(&mut rng, hidden),
            critic: EntropyCritic::new(&mut rng, 2, 1, critic_hidden),
        };
        PointTrainState {
            weights,
            models,
            opt: Optimizers::new(&optim),
            step: 0,
            seed,
        }
    }

    pub fn predict(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.models.generator.forward(x, t)
    }

    /// One update of discriminator, generator and critic. Only the adversarial
    /// and bridge terms apply to point clouds.
    pub fn train_step(
        &mut self,
        source: &Tensor,
        target: &Tensor,
        schedule: &BridgeSchedule,
    ) -> Result<StepReport> {
        let (seed, step) = (self.seed, self.step);
        let i = time_index(seed, step, schedule.n_intervals());
        let t_i = schedule.time(i);
        let x_t = {
            let g = &self.models.generator;
            let mut noise = SampleStreams::new(seed, tag::CHAIN ^ (step << 8), 0);
            roll_chain(source, |x, t| g.forward(x, t), i, schedule, &mut noise)?
        };
        let m = &mut self.models;
        let fake = m.generator.forward(&x_t, t_i)?;

        zero_grads(&[&m.discriminator]);
        let d_loss = lsgan_critic(
            &m.discriminator.forward(target, t_i)?,
            &m.discriminator.forward(&fake.detach(), t_i)?,
        )?;
        d_loss.backward()?;
        self.opt.discriminator.step(m.discriminator.params_mut())?;

        let adv = lsgan_generator(&m.discriminator.forward(&fake, t_i)?)?;
        let (sb, h) = sb_loss_parts(&x_t, &fake, t_i, schedule.tau(), &m.critic)?;
        let total = adv.add(&sb.mul_scalar(self.weights.lambda_sb)?)?;
        zero_grads(&[&m.generator]);
        total.backward()?;
        self.opt.generator.step(m.generator.params_mut())?;

        zero_grads(&[&m.critic]);
        let bound = estimate_entropy(&x_t, &fake.detach(), &m.critic)?;
        bound.neg()?.backward()?;
        self.opt.critic.step(m.critic.params_mut())?;

        self.step += 1;
        Ok(StepReport {
            step,
            time_index: i,
            total: total.item()?,
            adv: adv.item()?,
            sb: sb.item()?,
            entropy: h.item()?,
            d_loss: d_loss.item()?,
            critic_bound: bound.item()?,
            ..StepReport::default()
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let m = &self.models;
        let mut out = Vec::new();
        for (prefix, module) in [
            ("generator", &m.generator as &dyn DynModule),
            ("discriminator", &m.discriminator),
            ("critic", &m.critic),
        ] {
            out.extend(
                module
                    .state_dyn()
                    .into_iter()
                    .map(|(n, t)| (format!("{prefix}.{n}"), t)),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn critic() -> EntropyCritic {
        EntropyCritic::new(&mut ChaCha8Rng::seed_from_u64(0), 2, 1, 8)
    }

    #[test]
    fn weighted_sum_of_components() {
        let s = |v: f64| Tensor::scalar(v);
        let c = LossComponents {
            adv: s(2.0),
            sb: s(1.0),
            prompt: s(1.0),
            nce: s(1.0),
            phy: s(2.0),
            hfd: s(2.0),
        };
        assert_eq!(
            total_loss(&c, &LossWeights::default())
                .unwrap()
                .item()
                .unwrap(),
            7.0
        );
        let zero = LossWeights {
            lambda_sb: 0.0,
            lambda_p: 0.0,
            lambda_nce: 0.0,
            lambda_phy: 0.0,
            lambda_hfd: 0.0,
        };
        assert_eq!(total_loss(&c, &zero).unwrap().item().unwrap(), 2.0);
    }

    #[test]
    fn sb_loss_special_cases() {
        let x = Tensor::new(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], &[3, 2]).unwrap();
        let y = x.add_scalar(0.5).unwrap();
        assert_eq!(
            sb_loss(&x, &x, 0.4, 0.0, &critic())
                .unwrap()
                .item()
                .unwrap(),
            0.0
        );
        let pure = sb_loss(&x, &y, 0.4, 0.0, &critic())
            .unwrap()
            .item()
            .unwrap();
        assert!((pure - 0.25).abs() < 1e-15);
        assert_eq!(
            sb_loss(&x, &y, 1.0, 5.0, &critic())
                .unwrap()
                .item()
                .unwrap(),
            pure
        );
    }

    #[test]
    fn entropy_bound_examples() {
        let same = Tensor::new(vec![0.3, -0.2].repeat(4), &[4, 2]).unwrap();
        assert_eq!(
            estimate_entropy(&same, &same, &critic())
                .unwrap()
                .item()
                .unwrap(),
            0.0
        );
        let one = Tensor::new(vec![0.3, -0.2], &[1, 2]).unwrap();
        assert!(estimate_entropy(&one, &one, &critic()).is_err());
    }

    #[test]
    fn lsgan_perfect_cases() {
        let ones = Tensor::ones(&[2, 1, 4, 4]);
        let zeros = Tensor::zeros(&[2, 1, 4, 4]);
        assert_eq!(lsgan_critic(&ones, &zeros).unwrap().item().unwrap(), 0.0);
        assert_eq!(lsgan_generator(&ones).unwrap().item().unwrap(), 0.0);
    }

    #[test]
    fn inference_call_counts() {
        let s = BridgeSchedule::new(5, 0.0).unwrap();
        let x0 = Tensor::new(vec![1.0, 2.0], &[1, 2]).unwrap();
        let mut calls = Vec::new();
        let out = infer(
            &x0,
            1,
            |x, t| {
                calls.push(t);
                x.mul_scalar(2.0).map_err(Error::from)
            },
            &s,
            &mut inference_noise(0, 0),
        )
        .unwrap();
        assert_eq!(calls, vec![0.0]);
        assert_eq!(out.data(), &[2.0, 4.0]);
        assert!(infer(&x0, 0, |x, _| Ok(x.clone()), &s, &mut inference_noise(0, 0)).is_err());
        assert!(infer(&x0, 6, |x, _| Ok(x.clone()), &s, &mut inference_noise(0, 0)).is_err());
    }
}
