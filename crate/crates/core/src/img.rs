use hazebridge_tensor::Tensor;

use crate::error::{Error, Result};

/// Planar (channel, row, column) image with values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Image> {
        if data.len() != channels * height * width {
            return Err(Error::Contract(format!(
                "{channels}x{height}x{width} image from {} values",
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Image {
        Image {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.pixels()..(c + 1) * self.pixels()]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let p = self.pixels();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn clamped(mut self) -> Image {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        (self.channels, self.height, self.width) == (other.channels, other.height, other.width)
    }

    /// `(1, C, H, W)` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.data.clone(),
            &[1, self.channels, self.height, self.width],
        )
        .expect("dims match data")
    }

    /// Stacks same-sized images into a `(B, C, H, W)` tensor.
    pub fn batch(images: &[&Image]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Contract("empty image batch".into()))?;
        if images.iter().any(|im| !im.same_dims(first)) {
            return Err(Error::Contract(
                "images in a batch must share dimensions".into(),
            ));
        }
        let data = images
            .iter()
            .flat_map(|im| im.data.iter().copied())
            .collect();
        Ok(Tensor::new(
            data,
            &[images.len(), first.channels, first.height, first.width],
        )?)
    }

    /// Splits a `(B, C, H, W)` tensor back into images.
    pub fn unbatch(t: &Tensor) -> Result<Vec<Image>> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::Contract(format!(
                "expected a (B, C, H, W) tensor, got {s:?}"
            )));
        }
        let per = s[1] * s[2] * s[3];
        Ok(t.data()
            .chunks(per)
            .map(|d| Image {
                channels: s[1],
                height: s[2],
                width: s[3],
                data: d.to_vec(),
            })
            .collect())
    }
}
