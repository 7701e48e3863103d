//! Synthetic datasets: procedural clear scenes, hazed through the scattering
//! model, and named 2-D point clouds.

use std::f64::consts::PI;
use std::path::Path;

use hazebridge_tensor::Tensor;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::haze::apply_asm;
use crate::img::Image;
use crate::rng::substream;

use super::io::read_dir_images;

/// Clear scene: a bright grey sky band over fully saturated coloured regions,
/// so every ground pixel has a zero channel.
pub fn procedural_clear_image<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Image {
    let mut img = Image::filled(3, height, width, 0.0);
    let sky_rows = (height as f64 * rng.random_range(0.18..0.32)).round() as usize;
    let sky_top = rng.random_range(0.88..1.0);
    let sky_bottom = sky_top - rng.random_range(0.0..0.06);
    let background = (rng.random_range(0.0..1.0), rng.random_range(0.35..0.75));
    let shapes: Vec<_> = (0..rng.random_range(4..9))
        .map(|_| {
            let cy = rng.random_range(sky_rows as f64..height as f64);
            let cx = rng.random_range(0.0..width as f64);
            let ry = rng.random_range(2.0..height as f64 / 3.0);
            let rx = rng.random_range(2.0..width as f64 / 3.0);
            let ellipse = rng.random_bool(0.5);
            (
                (cy, cx, ry, rx, ellipse),
                (rng.random_range(0.0..1.0), rng.random_range(0.2..1.0)),
            )
        })
        .collect();
    let shade = (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15));
    for y in 0..height {
        for x in 0..width {
            let rgb = if y < sky_rows {
                let f = y as f64 / sky_rows.max(1) as f64;
                let v = sky_top + (sky_bottom - sky_top) * f;
                [v, v, v]
            } else {
                let mut colour = background;
                for &((cy, cx, ry, rx, ellipse), c) in &shapes {
                    let (dy, dx) = ((y as f64 - cy) / ry, (x as f64 - cx) / rx);
                    let inside = if ellipse {
                        dy * dy + dx * dx <= 1.0
                    } else {
                        dy.abs() <= 1.0 && dx.abs() <= 1.0
                    };
                    if inside {
                        colour = c;
                    }
                }
                let gain = 1.0
                    + shade.0 * (y as f64 / height as f64 - 0.5)
                    + shade.1 * (x as f64 / width as f64 - 0.5);
                saturated(colour.0, (colour.1 * gain).clamp(0.0, 1.0))
            };
            for (c, v) in rgb.into_iter().enumerate() {
                img.plane_mut(c)[y * width + x] = v;
            }
        }
    }
    img
}

/// Fully saturated colour of hue `h ∈ [0, 1)` and value `v`.
fn saturated(h: f64, v: f64) -> [f64; 3] {
    let sector = (h * 6.0).floor() as usize % 6;
    let f = h * 6.0 - (h * 6.0).floor();
    let (rise, fall) = (v * f, v * (1.0 - f));
    match sector {
        0 => [v, rise, 0.0],
        1 => [fall, v, 0.0],
        2 => [0.0, v, rise],
        3 => [0.0, fall, v],
        4 => [rise, 0.0, v],
        _ => [v, 0.0, fall],
    }
}

/// Smooth field in `(0, 1]`: 4×4 uniform noise around `mean`, bilinearly
/// upsampled with corners aligned.
pub fn smooth_transmission<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    mean: f64,
    amplitude: f64,
) -> Image {
    const G: usize = 4;
    let grid: Vec<f64> = (0..G * G).map(|_| rng.random_range(-1.0..1.0)).collect();
    let coord = |p: usize, n: usize| {
        if n > 1 {
            p as f64 * (G - 1) as f64 / (n - 1) as f64
        } else {
            0.0
        }
    };
    let mut t = Image::filled(1, height, width, 0.0);
    for y in 0..height {
        let gy = coord(y, height);
        let (y0, fy) = (
            (gy.floor() as usize).min(G - 2),
            gy - (gy.floor() as usize).min(G - 2) as f64,
        );
        for x in 0..width {
            let gx = coord(x, width);
            let (x0, fx) = (
                (gx.floor() as usize).min(G - 2),
                gx - (gx.floor() as usize).min(G - 2) as f64,
            );
            let at = |r: usize, c: usize| grid[r * G + c];
            let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
            let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
            let n = top * (1.0 - fy) + bottom * fy;
            t.data[y * width + x] = (mean + amplitude * n).clamp(0.05, 1.0);
        }
    }
    t
}

/// Haze parameters drawn for one synthetic image.
#[derive(Debug, Clone, PartialEq)]
pub struct HazeDraw {
    pub light: f64,
    pub transmission_mean: f64,
}

/// Hazy and clear training sets built from different source images, plus
/// ground truth for held-out hazy images when known.
#[derive(Debug, Clone)]
pub struct UnpairedDataset {
    pub hazy: Vec<Image>,
    /// Source index of each hazy image; for directories, its position in the listing.
    pub hazy_sources: Vec<usize>,
    pub clear: Vec<Image>,
    pub clear_sources: Vec<usize>,
    /// Held-out hazy inputs with their haze-free sources.
    pub test_hazy: Vec<Image>,
    pub test_truth: Vec<Image>,
    pub test_sources: Vec<usize>,
    pub test_draws: Vec<HazeDraw>,
    /// Set when hazy and clear images come from disjoint sources.
    pub unpaired: bool,
}

fn check_range(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0] > 0.0 && r[0] <= r[1] && r[1] <= 1.0) {
        return Err(Error::Config(format!(
            "{name} must satisfy 0 < lo <= hi <= 1, got {r:?}"
        )));
    }
    Ok(())
}

/// Halves `clear_images` (shuffled), hazes the first half and keeps the second
/// as the clear pool. The last `test_count` hazed images are held out together
/// with their sources.
pub fn synth_haze_dataset(
    clear_images: &[Image],
    light_range: [f64; 2],
    transmission_range: [f64; 2],
    test_count: usize,
    seed: u64,
) -> Result<UnpairedDataset> {
    check_range("light range", light_range)?;
    check_range("transmission range", transmission_range)?;
    let half = clear_images.len() / 2;
    if half < 1 || test_count >= half {
        return Err(Error::Config(format!(
            "{} clear images cannot provide {test_count} test pairs and a training half",
            clear_images.len()
        )));
    }
    let mut rng = substream(seed, &[0x6861_7a65]);
    let order = sample(&mut rng, clear_images.len(), clear_images.len()).into_vec();
    let (hazed_src, clear_src) = order.split_at(half);
    let mut hazed = Vec::with_capacity(half);
    let mut draws = Vec::with_capacity(half);
    for &s in hazed_src {
        let j = &clear_images[s];
        let light = rng.random_range(light_range[0]..=light_range[1]);
        let mean = rng.random_range(transmission_range[0]..=transmission_range[1]);
        let amplitude = if transmission_range[0] == transmission_range[1] {
            0.0
        } else {
            0.15
        };
        let t = smooth_transmission(&mut rng, j.height, j.width, mean, amplitude);
        hazed.push(apply_asm(j, &t, &vec![light; j.channels])?);
        draws.push(HazeDraw {
            light,
            transmission_mean: mean,
        });
    }
    let train = half - test_count;
    let test_hazy = hazed.split_off(train);
    Ok(UnpairedDataset {
        hazy: hazed,
        hazy_sources: hazed_src[..train].to_vec(),
        clear: clear_src.iter().map(|&s| clear_images[s].clone()).collect(),
        clear_sources: clear_src.to_vec(),
        test_hazy,
        test_truth: hazed_src[train..]
            .iter()
            .map(|&s| clear_images[s].clone())
            .collect(),
        test_sources: hazed_src[train..].to_vec(),
        test_draws: draws.split_off(train),
        unpaired: true,
    })
}

/// `count` procedural scenes of `size × size`.
pub fn procedural_images(count: usize, size: usize, seed: u64) -> Vec<Image> {
    (0..count)
        .map(|k| procedural_clear_image(&mut substream(seed, &[0x7363_656e, k as u64]), size, size))
        .collect()
}

impl UnpairedDataset {
    /// Real unpaired folders: no ground truth, and sources are distinct files.
    pub fn from_dirs(hazy_dir: &Path, clear_dir: &Path) -> Result<UnpairedDataset> {
        let hazy: Vec<Image> = read_dir_images(hazy_dir)?
            .into_iter()
            .map(|(_, i)| i)
            .collect();
        let clear: Vec<Image> = read_dir_images(clear_dir)?
            .into_iter()
            .map(|(_, i)| i)
            .collect();
        if hazy.is_empty() || clear.is_empty() {
            return Err(Error::Config(
                "image directories must both contain images".into(),
            ));
        }
        if let Some(bad) = hazy.iter().chain(&clear).find(|i| !i.same_dims(&hazy[0])) {
            return Err(Error::Config(format!(
                "all training images must share one size; found {}x{} and {}x{}",
                hazy[0].height, hazy[0].width, bad.height, bad.width
            )));
        }
        let n = hazy.len();
        Ok(UnpairedDataset {
            hazy_sources: (0..n).collect(),
            clear_sources: (n..n + clear.len()).collect(),
            hazy,
            clear,
            test_hazy: Vec::new(),
            test_truth: Vec::new(),
            test_sources: Vec::new(),
            test_draws: Vec::new(),
            unpaired: true,
        })
    }

    /// Independent draws of hazy and clear indices for one step. Errors if a
    /// hazy image would meet its own source.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        batch: usize,
    ) -> Result<(Vec<usize>, Vec<usize>)> {
        let h: Vec<usize> = (0..batch)
            .map(|_| rng.random_range(0..self.hazy.len()))
            .collect();
        let c: Vec<usize> = (0..batch)
            .map(|_| rng.random_range(0..self.clear.len()))
            .collect();
        if let Some(k) = (0..batch).find(|&k| self.hazy_sources[h[k]] == self.clear_sources[c[k]]) {
            return Err(Error::Contract(format!(
                "batch pairs hazy image {} with its own source",
                h[k]
            )));
        }
        Ok((h, c))
    }

    pub fn hazy_batch(&self, idx: &[usize]) -> Result<Tensor> {
        Image::batch(&idx.iter().map(|&i| &self.hazy[i]).collect::<Vec<_>>())
    }

    pub fn clear_batch(&self, idx: &[usize]) -> Result<Tensor> {
        Image::batch(&idx.iter().map(|&i| &self.clear[i]).collect::<Vec<_>>())
    }
}

/// Named 2-D distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PointCloud {
    TwoMoons,
    Ring,
    Gaussians,
}

impl PointCloud {
    pub const RING_RADIUS: f64 = 1.5;

    pub fn name(self) -> &'static str {
        match self {
            PointCloud::TwoMoons => "two-moons",
            PointCloud::Ring => "ring",
            PointCloud::Gaussians => "gaussians",
        }
    }
}

impl std::str::FromStr for PointCloud {
    type Err = Error;

    fn from_str(s: &str) -> Result<PointCloud> {
        match s {
            "two-moons" => Ok(PointCloud::TwoMoons),
            "ring" => Ok(PointCloud::Ring),
            "gaussians" => Ok(PointCloud::Gaussians),
            other => Err(Error::Config(format!(
                "unknown point cloud `{other}` (two-moons, ring, gaussians)"
            ))),
        }
    }
}

/// `n` points as an `(n, 2)` tensor.
pub fn toy2d_dataset(cloud: PointCloud, n: usize, seed: u64) -> Result<Tensor> {
    if n < 100 {
        return Err(Error::Config(format!(
            "point clouds need at least 100 points, got {n}"
        )));
    }
    let mut rng = substream(seed, &[0x746f_7932, cloud as u64]);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut pts = Vec::with_capacity(2 * n);
    for k in 0..n {
        let (x, y) = match cloud {
            PointCloud::TwoMoons => {
                let a = rng.random_range(0.0..PI);
                let (x, y) = if k % 2 == 0 {
                    (a.cos(), a.sin())
                } else {
                    (1.0 - a.cos(), 0.5 - a.sin())
                };
                (
                    x - 0.5 + 0.05 * noise.sample(&mut rng),
                    y - 0.25 + 0.05 * noise.sample(&mut rng),
                )
            }
            PointCloud::Ring => {
                let a = rng.random_range(0.0..2.0 * PI);
                let r = PointCloud::RING_RADIUS + 0.05 * noise.sample(&mut rng);
                (r * a.cos(), r * a.sin())
            }
            PointCloud::Gaussians => {
                let a = 2.0 * PI * rng.random_range(0..8) as f64 / 8.0;
                (
                    2.0 * a.cos() + 0.1 * noise.sample(&mut rng),
                    2.0 * a.sin() + 0.1 * noise.sample(&mut rng),
                )
            }
        };
        pts.push(x);
        pts.push(y);
    }
    Ok(Tensor::new(pts, &[n, 2])?)
}

/// Random subset of rows of an `(n, d)` tensor.
pub fn sample_rows<R: Rng + ?Sized>(rng: &mut R, points: &Tensor, count: usize) -> Result<Tensor> {
    let idx: Vec<usize> = (0..count)
        .map(|_| rng.random_range(0..points.shape()[0]))
        .collect();
    Ok(points.index_select(0, &idx)?)
}
