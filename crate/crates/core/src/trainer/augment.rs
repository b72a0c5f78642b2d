use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, CHANNELS};
use crate::trainer::config::AugmentationConfig;

/// Flip probability of the light policy.
pub const LIGHT_FLIP_P: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Two independent crop/flip/jitter/grayscale views.
    HeavySsl,
    /// One view: horizontal flip with p = 0.5, then normalisation.
    LightItc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub kind: PolicyKind,
    pub params: AugmentationConfig,
}

impl AugmentationPolicy {
    pub fn heavy(params: AugmentationConfig) -> Self {
        Self {
            kind: PolicyKind::HeavySsl,
            params,
        }
    }

    pub fn light() -> Self {
        Self {
            kind: PolicyKind::LightItc,
            params: AugmentationConfig::default(),
        }
    }
}

/// Normalised views of `image`: two for heavy, one for light.
pub fn augment(image: &Image, policy: &AugmentationPolicy, rng: &mut impl Rng) -> Result<Vec<Image>> {
    if !image.in_unit_range() {
        return Err(Error::InvalidInput("augment expects pixels in [0, 1]".into()));
    }
    Ok(match policy.kind {
        PolicyKind::HeavySsl => {
            let a = heavy_view(image, &policy.params, rng);
            let b = heavy_view(image, &policy.params, rng);
            vec![a.normalized(), b.normalized()]
        }
        PolicyKind::LightItc => {
            let flip = rng.gen_bool(LIGHT_FLIP_P);
            vec![light_view(image, flip)]
        }
    })
}

/// Deterministic light view: optional flip, then normalisation.
pub fn light_view(image: &Image, flip: bool) -> Image {
    if flip {
        image.hflip().normalized()
    } else {
        image.normalized()
    }
}

/// One heavy view in `[0, 1]`, before normalisation.
pub fn heavy_view(image: &Image, p: &AugmentationConfig, rng: &mut impl Rng) -> Image {
    let (h, w) = (image.height as f64, image.width as f64);
    let scale = rng.gen_range(p.crop_scale_min..=p.crop_scale_max);
    let log_ratio = rng.gen_range(p.crop_ratio_min.ln()..=p.crop_ratio_max.ln());
    let ratio = log_ratio.exp();
    let ch = (h * (scale * ratio).sqrt()).min(h);
    let cw = (w * (scale / ratio).sqrt()).min(w);
    let top = rng.gen_range(0.0..=h - ch);
    let left = rng.gen_range(0.0..=w - cw);
    let mut out = image.crop_resize(top, left, ch, cw, image.height, image.width);

    if rng.gen_bool(p.flip_p) {
        out = out.hflip();
    }
    if rng.gen_bool(p.jitter_p) {
        let b = 1.0 + rng.gen_range(-p.brightness..=p.brightness);
        let c = 1.0 + rng.gen_range(-p.contrast..=p.contrast);
        let s = 1.0 + rng.gen_range(-p.saturation..=p.saturation);
        out = color_jitter(&out, b, c, s);
    }
    if rng.gen_bool(p.grayscale_p) {
        out = out.grayscale();
    }
    out
}

/// Brightness scale, contrast about the mean luma, saturation about the
/// per-pixel luma; result clipped to `[0, 1]`.
fn color_jitter(image: &Image, brightness: f64, contrast: f64, saturation: f64) -> Image {
    let mut out = image.clone();
    for v in out.pixels.iter_mut() {
        *v = (*v * brightness).clamp(0.0, 1.0);
    }
    let n = (out.height * out.width) as f64;
    let mut mean = 0.0;
    for y in 0..out.height {
        for x in 0..out.width {
            mean += out.luma(y, x);
        }
    }
    mean /= n;
    for v in out.pixels.iter_mut() {
        *v = (mean + (*v - mean) * contrast).clamp(0.0, 1.0);
    }
    for px in out.pixels.chunks_exact_mut(CHANNELS) {
        let l = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        for v in px.iter_mut() {
            *v = (l + (*v - l) * saturation).clamp(0.0, 1.0);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn card() -> Image {
        let mut im = Image::filled(16, 8, [0.2, 0.4, 0.6]);
        im.fill_rect(0, 8, 0, 4, [0.9, 0.1, 0.1]);
        im
    }

    #[test]
    fn light_no_flip_is_normalised_identity() {
        assert_eq!(light_view(&card(), false), card().normalized());
    }

    #[test]
    fn double_flip_is_identity() {
        assert_eq!(card().hflip().hflip(), card());
    }

    #[test]
    fn heavy_is_deterministic_given_seed() {
        let policy = AugmentationPolicy::heavy(AugmentationConfig::default());
        let a = augment(&card(), &policy, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = augment(&card(), &policy, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn light_yields_one_view_and_heavy_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let views = augment(&card(), &AugmentationPolicy::light(), &mut rng).unwrap();
        assert_eq!(views.len(), 1);
        for _ in 0..20 {
            assert!(heavy_view(&card(), &AugmentationConfig::default(), &mut rng).in_unit_range());
        }
        let bad = Image::filled(2, 2, [1.5, 0.0, 0.0]);
        assert!(augment(&bad, &AugmentationPolicy::light(), &mut rng).is_err());
    }
}
