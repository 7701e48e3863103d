//! Networks: the time-conditioned generators, the patch and global
//! discriminators, the entropy critic, the transmission refiner and the frozen
//! perceptual feature stack.

use hazebridge_tensor::nn::{prefixed, Conv2d, Linear, Module};
use hazebridge_tensor::{Conv2dSpec, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::prompt::ToyEncoder;
use crate::rng::substream;

/// Width of the sinusoidal time features.
pub const TIME_FEATURES: usize = 16;

/// Sinusoidal features of `t` at geometric frequencies 1..100, shape `(1, 16)`.
pub fn time_embedding(t: f64) -> Tensor {
    let half = TIME_FEATURES / 2;
    let mut v = Vec::with_capacity(TIME_FEATURES);
    for k in 0..half {
        let freq = 100f64.powf(k as f64 / (half - 1) as f64);
        v.push((freq * t).sin());
        v.push((freq * t).cos());
    }
    Tensor::new(v, &[1, TIME_FEATURES]).expect("embedding width")
}

/// `(1, C)` → `(1, C, 1, 1)` for adding to feature maps.
fn as_channel_bias(v: &Tensor) -> Result<Tensor> {
    let c = v.shape()[1];
    Ok(v.reshape(&[1, c, 1, 1])?)
}

fn named<'a>(parts: Vec<(&str, Vec<(String, &'a Tensor)>)>) -> Vec<(String, &'a Tensor)> {
    parts
        .into_iter()
        .flat_map(|(p, v)| prefixed(p, v))
        .collect()
}

/// Averages non-overlapping `k × k` blocks of every channel.
pub fn avg_pool(x: &Tensor, k: usize) -> Result<Tensor> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let kernel = Tensor::full(&[1, 1, k, k], 1.0 / (k * k) as f64);
    let y = x.reshape(&[b * c, 1, h, w])?.conv2d(
        &kernel,
        None,
        Conv2dSpec {
            stride: k,
            padding: 0,
        },
    )?;
    Ok(y.reshape(&[b, c, h / k, w / k])?)
}

/// Two-layer MLP mapping time features to a conditioning vector.
#[derive(Debug, Clone)]
pub struct TimeMlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl TimeMlp {
    pub fn new(rng: &mut ChaCha8Rng, width: usize) -> TimeMlp {
        TimeMlp {
            l1: Linear::new(rng, TIME_FEATURES, width),
            l2: Linear::new(rng, width, width),
        }
    }

    pub fn forward(&self, t: f64) -> Result<Tensor> {
        Ok(self
            .l2
            .forward(&self.l1.forward(&time_embedding(t))?.silu()?)?)
    }
}

impl Module for TimeMlp {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        named(vec![
            ("l1", self.l1.named_params()),
            ("l2", self.l2.named_params()),
        ])
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.l1.params_mut();
        v.extend(self.l2.params_mut());
        v
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub time: Linear,
}

impl ResBlock {
    fn new(rng: &mut ChaCha8Rng, ch: usize, cond: usize) -> ResBlock {
        ResBlock {
            conv1: Conv2d::new(rng, ch, ch, 3, 1, 1),
            conv2: Conv2d::new(rng, ch, ch, 3, 1, 1),
            time: Linear::new(rng, cond, ch),
        }
    }

    fn forward(&self, h: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let a = self
            .conv1
            .forward(&h.silu()?)?
            .add(&as_channel_bias(&self.time.forward(cond)?)?)?;
        Ok(h.add(&self.conv2.forward(&a.silu()?)?)?)
    }
}

impl Module for ResBlock {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        named(vec![
            ("conv1", self.conv1.named_params()),
            ("conv2", self.conv2.named_params()),
            ("time", self.time.named_params()),
        ])
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.conv1.params_mut();
        v.extend(self.conv2.params_mut());
        v.extend(self.time.params_mut());
        v
    }
}

/// Sizes of the image generator.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub base_channels: usize,
    pub width: usize,
    pub blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            base_channels: 16,
            width: 32,
            blocks: 6,
        }
    }
}

/// Residual encoder-decoder predicting the clean endpoint from a bridge state:
/// two stride-2 downsamplings, time-conditioned residual blocks at 1/4
/// resolution, and an upsampling path with additive skips. The output layer
/// starts at zero, so the untrained network is the identity map.
#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub stem: Conv2d,
    pub down1: Conv2d,
    pub down2: Conv2d,
    pub time: TimeMlp,
    pub blocks: Vec<ResBlock>,
    pub up1: Conv2d,
    pub up2: Conv2d,
    pub out: Conv2d,
}

impl Generator {
    pub fn new(rng: &mut ChaCha8Rng, cfg: GeneratorConfig) -> Generator {
        let (b, w) = (cfg.base_channels, cfg.width);
        Generator {
            cfg,
            stem: Conv2d::new(rng, 3, b, 3, 1, 1),
            down1: Conv2d::new(rng, b, w, 4, 2, 1),
            down2: Conv2d::new(rng, w, w, 4, 2, 1),
            time: TimeMlp::new(rng, w),
            blocks: (0..cfg.blocks).map(|_| ResBlock::new(rng, w, w)).collect(),
            up1: Conv2d::new(rng, w, w, 3, 1, 1),
            up2: Conv2d::new(rng, w, b, 3, 1, 1),
            out: Conv2d::zeros(b, 3, 3, 1, 1),
        }
    }

    fn check_input(x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(Error::Contract(format!(
                "generator input must be (B, 3, 4h, 4w), got {s:?}"
            )));
        }
        Ok(())
    }

    /// Predicted endpoint `x + f(x, t)`.
    pub fn forward(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        Self::check_input(x)?;
        let h0 = self.stem.forward(x)?.silu()?;
        let h1 = self.down1.forward(&h0)?.silu()?;
        let mut h = self.down2.forward(&h1)?.silu()?;
        let cond = self.time.forward(t)?;
        for blk in &self.blocks {
            h = blk.forward(&h, &cond)?;
        }
        let u1 = self
            .up1
            .forward(&h.upsample_nearest(2)?)?
            .silu()?
            .add(&h1)?;
        let u2 = self
            .up2
            .forward(&u1.upsample_nearest(2)?)?
            .silu()?
            .add(&h0)?;
        Ok(x.add(&self.out.forward(&u2)?)?)
    }

    /// Encoder activations used for patch correspondence: after the stem, after
    /// the first downsampling, and halfway through the residual blocks.
    pub fn features(&self, x: &Tensor, t: f64) -> Result<Vec<Tensor>> {
        Self::check_input(x)?;
        let h0 = self.stem.forward(x)?.silu()?;
        let h1 = self.down1.forward(&h0)?.silu()?;
        let mut h = self.down2.forward(&h1)?.silu()?;
        let cond = self.time.forward(t)?;
        for blk in &self.blocks[..self.blocks.len() / 2] {
            h = blk.forward(&h, &cond)?;
        }
        Ok(vec![h0, h1, h])
    }
}

impl Module for Generator {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = named(vec![
            ("stem", self.stem.named_params()),
            ("down1", self.down1.named_params()),
            ("down2", self.down2.named_params()),
            ("time", self.time.named_params()),
        ]);
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(prefixed(&format!("block{i}"), b.named_params()));
        }
        v.extend(named(vec![
            ("up1", self.up1.named_params()),
            ("up2", self.up2.named_params()),
            ("out", self.out.named_params()),
        ]));
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.stem.params_mut();
        v.extend(self.down1.params_mut());
        v.extend(self.down2.params_mut());
        v.extend(self.time.params_mut());
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.up1.params_mut());
        v.extend(self.up2.params_mut());
        v.extend(self.out.params_mut());
        v
    }
}

/// MLP over `[point, time features]` with a residual output for 2-D point clouds.
#[derive(Debug, Clone)]
pub struct PointGenerator {
    pub layers: Vec<Linear>,
}

impl PointGenerator {
    pub fn new(rng: &mut ChaCha8Rng, hidden: usize) -> PointGenerator {
        PointGenerator {
            layers: vec![
                Linear::new(rng, 2 + TIME_FEATURES, hidden),
                Linear::new(rng, hidden, hidden),
                Linear::new(rng, hidden, hidden),
                Linear::zeros(hidden, 2),
            ],
        }
    }

    pub fn forward(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        if x.ndim() != 2 || x.shape()[1] != 2 {
            return Err(Error::Contract(format!(
                "point generator input must be (B, 2), got {:?}",
                x.shape()
            )));
        }
        let h = with_time(x, t)?;
        Ok(x.add(&mlp(&self.layers, &h)?)?)
    }
}

/// Appends the time features of `t` to every row of `(B, D)` input.
fn with_time(x: &Tensor, t: f64) -> Result<Tensor> {
    let b = x.shape()[0];
    let e = time_embedding(t);
    let rows = Tensor::concat(&vec![e; b], 0)?;
    Ok(Tensor::concat(&[x.clone(), rows], 1)?)
}

fn mlp(layers: &[Linear], x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for (i, l) in layers.iter().enumerate() {
        h = l.forward(&h)?;
        if i + 1 < layers.len() {
            h = h.silu()?;
        }
    }
    Ok(h)
}

impl Module for PointGenerator {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        prefixed("layers", self.layers.named_params())
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.params_mut()
    }
}

/// Time-conditioned MLP critic for 2-D points.
#[derive(Debug, Clone)]
pub struct PointDiscriminator {
    pub layers: Vec<Linear>,
}

impl PointDiscriminator {
    pub fn new(rng: &mut ChaCha8Rng, hidden: usize) -> PointDiscriminator {
        PointDiscriminator {
            layers: vec![
                Linear::new(rng, 2 + TIME_FEATURES, hidden),
                Linear::new(rng, hidden, hidden),
                Linear::new(rng, hidden, 1),
            ],
        }
    }

    /// One logit per point, shape `(B, 1)`.
    pub fn forward(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        mlp(&self.layers, &with_time(x, t)?)
    }
}

impl Module for PointDiscriminator {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        prefixed("layers", self.layers.named_params())
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.params_mut()
    }
}

/// Three stride-2 `4×4` blocks and a `1×1` head: one logit per `~22 px` patch
/// (a 4×4 map for 32×32 input). Time enters as a bias after the first block.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    pub c1: Conv2d,
    pub c2: Conv2d,
    pub c3: Conv2d,
    pub head: Conv2d,
    pub time: Linear,
}

impl PatchDiscriminator {
    pub fn new(rng: &mut ChaCha8Rng) -> PatchDiscriminator {
        PatchDiscriminator {
            c1: Conv2d::new(rng, 3, 16, 4, 2, 1),
            c2: Conv2d::new(rng, 16, 32, 4, 2, 1),
            c3: Conv2d::new(rng, 32, 64, 4, 2, 1),
            head: Conv2d::new(rng, 64, 1, 1, 1, 0),
            time: Linear::new(rng, TIME_FEATURES, 16),
        }
    }

    /// Receptive field of one output logit, in input pixels.
    pub const RECEPTIVE_FIELD: usize = 22;
    /// Input displacement corresponding to one output cell.
    pub const STRIDE: usize = 8;

    pub fn forward(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let bias = as_channel_bias(&self.time.forward(&time_embedding(t))?)?;
        let h = self.c1.forward(x)?.add(&bias)?.silu()?;
        let h = self.c2.forward(&h)?.silu()?;
        let h = self.c3.forward(&h)?.silu()?;
        self.head.forward(&h).map_err(Error::from)
    }
}

impl Module for PatchDiscriminator {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        named(vec![
            ("c1", self.c1.named_params()),
            ("c2", self.c2.named_params()),
            ("c3", self.c3.named_params()),
            ("head", self.head.named_params()),
            ("time", self.time.named_params()),
        ])
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.c1.params_mut();
        v.extend(self.c2.params_mut());
        v.extend(self.c3.params_mut());
        v.extend(self.head.params_mut());
        v.extend(self.time.params_mut());
        v
    }
}

/// Trainable linear head on the frozen image encoder's embedding.
#[derive(Debug, Clone)]
pub struct GlobalDiscriminator {
    pub head: Linear,
}

impl GlobalDiscriminator {
    pub fn new(rng: &mut ChaCha8Rng, embed_dim: usize) -> GlobalDiscriminator {
        GlobalDiscriminator {
            head: Linear::new(rng, embed_dim, 1),
        }
    }

    /// One logit per image, shape `(B, 1)`.
    pub fn forward(&self, x: &Tensor, encoder: &ToyEncoder) -> Result<Tensor> {
        self.forward_embedding(&encoder.encode(x)?)
    }

    pub fn forward_embedding(&self, e: &Tensor) -> Result<Tensor> {
        Ok(self.head.forward(e)?)
    }
}

impl Module for GlobalDiscriminator {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        prefixed("head", self.head.named_params())
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.head.params_mut()
    }
}

/// Pair critic `c(x, y) = w·silu(A x + B y + b) + w0`, evaluated on every
/// in-batch pair at once. Images are average-pooled before the first layer.
#[derive(Debug, Clone)]
pub struct EntropyCritic {
    pub pool: usize,
    pub wx: Linear,
    pub wy: Linear,
    pub out: Linear,
}

impl EntropyCritic {
    pub fn new(
        rng: &mut ChaCha8Rng,
        input_dim: usize,
        pool: usize,
        hidden: usize,
    ) -> EntropyCritic {
        let mut wy = Linear::new(rng, input_dim, hidden);
        wy.bias = Tensor::zeros(&[hidden]).with_requires_grad(true);
        EntropyCritic {
            pool,
            wx: Linear::new(rng, input_dim, hidden),
            wy,
            out: Linear::new(rng, hidden, 1),
        }
    }

    fn flatten(&self, x: &Tensor) -> Result<Tensor> {
        let x = if x.ndim() == 4 && self.pool > 1 {
            avg_pool(x, self.pool)?
        } else {
            x.clone()
        };
        let b = x.shape()[0];
        Ok(x.reshape(&[b, x.numel() / b])?)
    }

    /// `(B, B)` matrix of scores `c(x_i, y_j)`.
    pub fn scores(&self, x: &Tensor, y: &Tensor) -> Result<Tensor> {
        let (fx, fy) = (self.flatten(x)?, self.flatten(y)?);
        let b = fx.shape()[0];
        if fy.shape()[0] != b {
            return Err(Error::Contract("critic needs equally sized batches".into()));
        }
        let hx = self.wx.forward(&fx)?;
        let hy = self.wy.forward(&fy)?;
        Ok(hx
            .pairwise_silu_dot(&hy, &self.out.weight)?
            .add(&self.out.bias)?)
    }
}

impl Module for EntropyCritic {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        named(vec![
            ("wx", self.wx.named_params()),
            ("wy", self.wy.named_params()),
            ("out", self.out.named_params()),
        ])
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.wx.params_mut();
        v.extend(self.wy.params_mut());
        v.extend(self.out.params_mut());
        v
    }
}

/// Small encoder-decoder refining a coarse transmission map. The coarse map
/// enters the output sigmoid through a logit skip and the last layer starts at
/// zero, so the untrained refiner returns its input.
#[derive(Debug, Clone)]
pub struct Refiner {
    pub t_min: f64,
    pub c0: Conv2d,
    pub c1: Conv2d,
    pub c2: Conv2d,
    pub c3: Conv2d,
    pub out: Conv2d,
}

impl Refiner {
    pub fn new(rng: &mut ChaCha8Rng, t_min: f64) -> Refiner {
        Refiner {
            t_min,
            c0: Conv2d::new(rng, 1, 8, 3, 1, 1),
            c1: Conv2d::new(rng, 8, 16, 4, 2, 1),
            c2: Conv2d::new(rng, 16, 16, 3, 1, 1),
            c3: Conv2d::new(rng, 16, 8, 3, 1, 1),
            out: Conv2d::zeros(8, 1, 3, 1, 1),
        }
    }

    /// Refined map in `[t_min, 1]`, same shape as the `(B, 1, H, W)` input.
    pub fn forward(&self, t: &Tensor) -> Result<Tensor> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 1 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::Contract(format!(
                "refiner input must be (B, 1, 2h, 2w), got {s:?}"
            )));
        }
        let span = 1.0 - self.t_min;
        let skip: Vec<f64> = t
            .data()
            .iter()
            .map(|v| {
                let u = ((v - self.t_min) / span).clamp(1e-3, 1.0 - 1e-3);
                (u / (1.0 - u)).ln()
            })
            .collect();
        let skip = Tensor::new(skip, s)?;
        let h0 = self.c0.forward(t)?.silu()?;
        let h1 = self.c1.forward(&h0)?.silu()?;
        let h2 = self.c2.forward(&h1)?.silu()?;
        let u = self
            .c3
            .forward(&h2.upsample_nearest(2)?)?
            .silu()?
            .add(&h0)?;
        let logit = self.out.forward(&u)?.add(&skip)?;
        Ok(logit.sigmoid()?.mul_scalar(span)?.add_scalar(self.t_min)?)
    }
}

impl Module for Refiner {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        named(vec![
            ("c0", self.c0.named_params()),
            ("c1", self.c1.named_params()),
            ("c2", self.c2.named_params()),
            ("c3", self.c3.named_params()),
            ("out", self.out.named_params()),
        ])
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.c0.params_mut();
        v.extend(self.c1.params_mut());
        v.extend(self.c2.params_mut());
        v.extend(self.c3.params_mut());
        v.extend(self.out.params_mut());
        v
    }
}

/// Frozen random three-stage convolutional features standing in for a learned
/// perceptual metric. Weights are fixed by the seed and never trained.
#[derive(Debug, Clone)]
pub struct PerceptualNet {
    stages: Vec<(Tensor, Tensor, Conv2dSpec)>,
}

impl PerceptualNet {
    pub fn new(seed: u64) -> PerceptualNet {
        let mut rng = substream(seed, &[0x7065_7263]);
        let mut stage = |cin: usize, cout: usize, k: usize, stride: usize, pad: usize| {
            let bound = (6.0 / (cin * k * k) as f64).sqrt();
            let w = (0..cout * cin * k * k)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let b = (0..cout).map(|_| rng.random_range(-0.1..0.1)).collect();
            (
                Tensor::new(w, &[cout, cin, k, k]).expect("weight dims"),
                Tensor::new(b, &[cout]).expect("bias dims"),
                Conv2dSpec {
                    stride,
                    padding: pad,
                },
            )
        };
        PerceptualNet {
            stages: vec![
                stage(3, 8, 3, 1, 1),
                stage(8, 16, 4, 2, 1),
                stage(16, 32, 4, 2, 1),
            ],
        }
    }

    /// Sum over stages of the mean squared difference of channel-normalized features.
    pub fn distance(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::Contract(format!(
                "perceptual distance of {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let unit = |f: &Tensor| -> Result<Tensor> {
            Ok(f.div(&f.square()?.sum_axis(1, true)?.add_scalar(1e-10)?.sqrt()?)?)
        };
        let (mut fa, mut fb) = (a.clone(), b.clone());
        let mut total = Tensor::scalar(0.0);
        for (w, bias, spec) in &self.stages {
            fa = fa.conv2d(w, Some(bias), *spec)?.silu()?;
            fb = fb.conv2d(w, Some(bias), *spec)?.silu()?;
            let d = unit(&fa)?
                .sub(&unit(&fb)?)?
                .square()?
                .sum_axis(1, false)?
                .mean()?;
            total = total.add(&d)?;
        }
        Ok(total)
    }
}
