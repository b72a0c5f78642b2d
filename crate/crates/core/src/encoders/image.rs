use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Graph, Var};
use crate::error::{Error, Result};
use crate::imaging::{Image, CHANNELS};
use crate::params::{uniform, Bound, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageEncoderConfig {
    pub height: usize,
    pub width: usize,
    /// Output channels of each conv block; the last one is the feature size F.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 32,
            channels: vec![16, 32, 64, 128],
            kernel: 3,
            stride: 2,
        }
    }
}

impl ImageEncoderConfig {
    pub fn feature_dim(&self) -> usize {
        self.channels.last().copied().unwrap_or(CHANNELS)
    }
}

/// A batch of images flattened to `[N*H*W, 3]`.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub data: Array2<f64>,
}

impl ImageBatch {
    pub fn from_images(images: &[Image]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidInput("empty image batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut flat = Vec::with_capacity(images.len() * h * w * CHANNELS);
        for (i, img) in images.iter().enumerate() {
            if (img.height, img.width) != (h, w) {
                return Err(Error::Shape(format!(
                    "image {i} is {}x{}, batch expects {h}x{w}",
                    img.height, img.width
                )));
            }
            flat.extend_from_slice(&img.pixels);
        }
        let data = Array2::from_shape_vec((images.len() * h * w, CHANNELS), flat)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self {
            count: images.len(),
            height: h,
            width: w,
            data,
        })
    }
}

/// Stack of stride-2 conv + ReLU blocks followed by global average pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    pub cfg: ImageEncoderConfig,
}

impl ImageEncoder {
    pub fn new(cfg: ImageEncoderConfig) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.kernel == 0 || cfg.stride == 0 {
            return Err(Error::Config("image encoder needs at least one conv block".into()));
        }
        Ok(Self { cfg })
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim()
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        let mut p = ParamSet::new();
        let mut cin = CHANNELS;
        for (i, &cout) in self.cfg.channels.iter().enumerate() {
            let fan_in = self.cfg.kernel * self.cfg.kernel * cin;
            let bound = (6.0 / fan_in as f64).sqrt();
            p.push(format!("conv{i}.weight"), uniform(rng, fan_in, cout, bound), true);
            p.push(format!("conv{i}.bias"), Array2::zeros((1, cout)), false);
            cin = cout;
        }
        p
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, prefix: &str, batch: &ImageBatch) -> Result<Var> {
        if (batch.height, batch.width) != (self.cfg.height, self.cfg.width) {
            return Err(Error::Shape(format!(
                "encoder expects {}x{} images, got {}x{}",
                self.cfg.height, self.cfg.width, batch.height, batch.width
            )));
        }
        let mut x = g.leaf(batch.data.clone());
        let (mut h, mut w, mut cin) = (batch.height, batch.width, CHANNELS);
        let pad = self.cfg.kernel / 2;
        for (i, &cout) in self.cfg.channels.iter().enumerate() {
            let geom = ConvGeom {
                batch: batch.count,
                height: h,
                width: w,
                in_channels: cin,
                out_channels: cout,
                kernel: self.cfg.kernel,
                stride: self.cfg.stride,
                pad,
            };
            let wv = p.var(&format!("{prefix}conv{i}.weight"));
            let bv = p.var(&format!("{prefix}conv{i}.bias"));
            let y = g.conv2d(x, wv, bv, geom);
            x = g.relu(y);
            h = geom.out_height();
            w = geom.out_width();
            cin = cout;
        }
        Ok(g.global_avg_pool(x, batch.count))
    }
}
