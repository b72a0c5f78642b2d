//! Image/text encoders, projection heads and momentum (query/key) pairs.

mod head;
mod image;
mod text;
pub mod tokenizer;

use ndarray::Array2;
use rand::Rng;

pub use head::ProjectionHead;
pub use image::{ImageBatch, ImageEncoder, ImageEncoderConfig};
pub use text::{TextEncoder, TextEncoderConfig};
pub use tokenizer::Tokenizer;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::params::{momentum_update, Bound, ParamSet};

/// Trainable query parameters and their momentum-updated key copy.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderPair {
    pub query: ParamSet,
    pub key: ParamSet,
    pub momentum: f64,
}

impl EncoderPair {
    /// Key parameters start as an exact copy of the query parameters.
    pub fn new(query: ParamSet, momentum: f64) -> Result<Self> {
        Self::from_parts(query.clone(), query, momentum)
    }

    pub fn from_parts(query: ParamSet, key: ParamSet, momentum: f64) -> Result<Self> {
        if !query.same_layout(&key) {
            return Err(Error::Shape("query and key parameters differ in shape".into()));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidInput(format!("momentum {momentum} outside [0, 1]")));
        }
        Ok(Self {
            query,
            key,
            momentum,
        })
    }

    /// `θ_k ← m·θ_k + (1−m)·θ_q`.
    pub fn momentum_update(&mut self) -> Result<()> {
        momentum_update(&mut self.key, &self.query, self.momentum)
    }
}

impl ImageEncoder {
    /// Features for `[0, 1]` images after channel normalisation.
    pub fn encode(&self, params: &ParamSet, images: &[Image]) -> Result<Array2<f64>> {
        if let Some(i) = images.iter().position(|im| !im.in_unit_range()) {
            return Err(Error::InvalidInput(format!("image {i} has pixels outside [0, 1]")));
        }
        let normalized: Vec<Image> = images.iter().map(Image::normalized).collect();
        let batch = ImageBatch::from_images(&normalized)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let f = self.forward(&mut g, &bound, "", &batch)?;
        Ok(g.value(f).clone())
    }
}

impl TextEncoder {
    pub fn encode(&self, params: &ParamSet, ids: &[Vec<u32>]) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let f = self.forward(&mut g, &bound, "", ids)?;
        Ok(g.value(f).clone())
    }
}

/// Image encoder plus its SSL and image-text projection heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTower {
    pub encoder: ImageEncoder,
    pub ssl_head: ProjectionHead,
    pub itc_head: ProjectionHead,
}

impl ImageTower {
    pub fn new(cfg: ImageEncoderConfig, embed_dim: usize) -> Result<Self> {
        let encoder = ImageEncoder::new(cfg)?;
        let f = encoder.feature_dim();
        Ok(Self {
            encoder,
            ssl_head: ProjectionHead::new(f, embed_dim),
            itc_head: ProjectionHead::new(f, embed_dim),
        })
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        let mut p = ParamSet::new();
        p.extend_prefixed("encoder", self.encoder.init(rng));
        p.extend_prefixed("ssl_head", self.ssl_head.init(rng));
        p.extend_prefixed("itc_head", self.itc_head.init(rng));
        p
    }

    pub fn features(&self, g: &mut Graph, p: &Bound, batch: &ImageBatch) -> Result<Var> {
        self.encoder.forward(g, p, "encoder.", batch)
    }

    pub fn ssl_projection(&self, g: &mut Graph, p: &Bound, features: Var) -> Var {
        self.ssl_head.forward(g, p, "ssl_head.", features)
    }

    pub fn itc_projection(&self, g: &mut Graph, p: &Bound, features: Var) -> Var {
        self.itc_head.forward(g, p, "itc_head.", features)
    }
}

/// Text encoder plus its image-text projection head.
#[derive(Debug, Clone, PartialEq)]
pub struct TextTower {
    pub encoder: TextEncoder,
    pub head: ProjectionHead,
}

impl TextTower {
    pub fn new(cfg: TextEncoderConfig, vocab_size: usize, embed_dim: usize) -> Result<Self> {
        let encoder = TextEncoder::new(cfg, vocab_size)?;
        let f = encoder.feature_dim();
        Ok(Self {
            encoder,
            head: ProjectionHead::new(f, embed_dim),
        })
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        let mut p = ParamSet::new();
        p.extend_prefixed("encoder", self.encoder.init(rng));
        p.extend_prefixed("head", self.head.init(rng));
        p
    }

    pub fn features(&self, g: &mut Graph, p: &Bound, ids: &[Vec<u32>]) -> Result<Var> {
        self.encoder.forward(g, p, "encoder.", ids)
    }

    pub fn projection(&self, g: &mut Graph, p: &Bound, features: Var) -> Var {
        self.head.forward(g, p, "head.", features)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_image_cfg() -> ImageEncoderConfig {
        ImageEncoderConfig {
            height: 8,
            width: 6,
            channels: vec![4, 6],
            kernel: 3,
            stride: 2,
        }
    }

    fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Image {
        Image::new(h, w, (0..h * w * 3).map(|_| rng.gen_range(0.05..0.95)).collect()).unwrap()
    }

    #[test]
    fn zero_final_layer_gives_zero_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = ImageEncoder::new(small_image_cfg()).unwrap();
        let mut p = enc.init(&mut rng);
        p.get_mut("conv1.weight").unwrap().fill(0.0);
        let imgs = vec![Image::filled(8, 6, [0.0; 3]); 2];
        let f = enc.encode(&p, &imgs).unwrap();
        assert!(f.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn duplicated_images_give_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = ImageEncoder::new(small_image_cfg()).unwrap();
        let p = enc.init(&mut rng);
        let img = random_image(&mut rng, 8, 6);
        let f = enc.encode(&p, &[img.clone(), img]).unwrap();
        assert_eq!(f.row(0), f.row(1));
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn image_shape_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = ImageEncoder::new(small_image_cfg()).unwrap();
        let p = enc.init(&mut rng);
        assert!(enc.encode(&p, &[Image::filled(4, 4, [0.5; 3])]).is_err());
        assert!(enc.encode(&p, &[Image::filled(8, 6, [1.5; 3])]).is_err());
    }

    #[test]
    fn pixel_perturbation_matches_analytic_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = ImageEncoder::new(small_image_cfg()).unwrap();
        let p = enc.init(&mut rng);
        let img = random_image(&mut rng, 8, 6);
        let probe: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let functional = |img: &Image| -> f64 {
            let f = enc.encode(&p, std::slice::from_ref(img)).unwrap();
            f.row(0).iter().zip(&probe).map(|(a, b)| a * b).sum()
        };

        let batch = ImageBatch::from_images(&[img.normalized()]).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let x = g.leaf(batch.data.clone());
        // Rebuild the forward from the explicit input leaf.
        let f = {
            let mut cur = x;
            let (mut h, mut w, mut cin) = (8, 6, 3);
            for (i, &cout) in enc.cfg.channels.iter().enumerate() {
                let geom = crate::autograd::ConvGeom {
                    batch: 1,
                    height: h,
                    width: w,
                    in_channels: cin,
                    out_channels: cout,
                    kernel: 3,
                    stride: 2,
                    pad: 1,
                };
                let y = g.conv2d(cur, bound.var(&format!("conv{i}.weight")), bound.var(&format!("conv{i}.bias")), geom);
                cur = g.relu(y);
                h = geom.out_height();
                w = geom.out_width();
                cin = cout;
            }
            g.global_avg_pool(cur, 1)
        };
        let seed = Array2::from_shape_vec((1, 6), probe.clone()).unwrap();
        let grads = g.backward(vec![(f, seed)]);
        let dx = grads.get(x).unwrap();

        let h = 1e-3;
        for &(y, xx, c) in &[(0usize, 0usize, 0usize), (3, 2, 1), (7, 5, 2), (4, 4, 0)] {
            let mut plus = img.clone();
            let mut minus = img.clone();
            let idx = (y * 6 + xx) * 3 + c;
            plus.pixels[idx] += h;
            minus.pixels[idx] -= h;
            let fd = (functional(&plus) - functional(&minus)) / (2.0 * h);
            // Normalisation scales the pixel by 1/std.
            let analytic = dx[[y * 6 + xx, c]] / crate::imaging::NORM_STD[c];
            let rel = (fd - analytic).abs() / analytic.abs().max(1e-8);
            assert!(rel < 1e-4 || (fd - analytic).abs() < 1e-10, "pixel ({y},{xx},{c}): fd {fd} vs {analytic}");
        }
    }

    fn small_text() -> (TextEncoder, ParamSet, Tokenizer) {
        let tok = Tokenizer::from_corpus(["a man in a red shirt", "a woman with blue pants"], 16).unwrap();
        let cfg = TextEncoderConfig {
            hidden: 8,
            layers: 2,
            heads: 2,
            ffn: 16,
            max_length: 16,
        };
        let enc = TextEncoder::new(cfg, tok.vocab_size()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = enc.init(&mut rng);
        (enc, p, tok)
    }

    #[test]
    fn text_padding_invariance() {
        let (enc, p, tok) = small_text();
        let long = tok.tokenize("a man in a red shirt").unwrap();
        let short = Tokenizer::from_tokens(tok.tokens().to_vec(), 10)
            .unwrap()
            .tokenize("a man in a red shirt")
            .unwrap();
        let a = enc.encode(&p, &[long.clone()]).unwrap();
        let b = enc.encode(&p, &[short]).unwrap();
        assert_eq!(a, b);
        // Batched with a shorter sequence: the longer row is unaffected.
        let other = tok.tokenize("a woman").unwrap();
        let c = enc.encode(&p, &[long, other]).unwrap();
        assert_eq!(c.row(0), a.row(0));
    }

    #[test]
    fn text_duplicates_give_identical_rows() {
        let (enc, p, tok) = small_text();
        let ids = tok.tokenize("a woman with blue pants").unwrap();
        let f = enc.encode(&p, &[ids.clone(), ids]).unwrap();
        assert_eq!(f.row(0), f.row(1));
    }

    #[test]
    fn text_embedding_gradient_matches_finite_differences() {
        let (enc, p, tok) = small_text();
        let ids = vec![
            tok.tokenize("a man in a red shirt").unwrap(),
            tok.tokenize("a woman with blue pants").unwrap(),
        ];
        let probe = Array2::from_shape_fn((2, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).sin());
        let objective = |p: &ParamSet| -> f64 { (&enc.encode(p, &ids).unwrap() * &probe).sum() };

        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let f = enc.forward(&mut g, &bound, "", &ids).unwrap();
        let mut grads = g.backward(vec![(f, probe.clone())]);
        let all = bound.grads(&mut grads, &p);
        let emb_idx = p.iter().position(|e| e.name == "token_embedding").unwrap();
        let dtable = &all[emb_idx];

        let h = 1e-4;
        let red = tok.id("red") as usize;
        for col in [0, 3, 7] {
            let mut plus = p.clone();
            let mut minus = p.clone();
            plus.get_mut("token_embedding").unwrap()[[red, col]] += h;
            minus.get_mut("token_embedding").unwrap()[[red, col]] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let an = dtable[[red, col]];
            assert!((fd - an).abs() / an.abs().max(1e-6) < 1e-4, "col {col}: {fd} vs {an}");
        }
    }

    #[test]
    fn projection_rows_are_unit_norm() {
        let head = ProjectionHead::new(2, 2);
        let mut p = ParamSet::new();
        p.push("weight", Array2::eye(2), true);
        p.push("bias", Array2::zeros((1, 2)), false);
        let out = head.project_and_normalize(&p, &array![[3.0, 4.0]]).unwrap();
        assert!((out[[0, 0]] - 0.6).abs() < 1e-15 && (out[[0, 1]] - 0.8).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = ProjectionHead::new(5, 3);
        let p = head.init(&mut rng);
        let x = crate::params::uniform(&mut rng, 4, 5, 1.0);
        let y = head.project_and_normalize(&p, &x).unwrap();
        for row in y.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        let y3 = head.project_and_normalize(&p, &x.mapv(|v| v * 3.0)).unwrap();
        for (a, b) in y.iter().zip(y3.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_projection_is_an_error() {
        let head = ProjectionHead::new(2, 2);
        let mut p = ParamSet::new();
        p.push("weight", Array2::zeros((2, 2)), true);
        p.push("bias", Array2::zeros((1, 2)), false);
        assert!(head.project_and_normalize(&p, &array![[1.0, 1.0]]).is_err());
    }

    fn pair(q: f64, k: f64, m: f64) -> EncoderPair {
        let mut qp = ParamSet::new();
        qp.push("w", Array2::from_elem((2, 3), q), true);
        let mut kp = ParamSet::new();
        kp.push("w", Array2::from_elem((2, 3), k), true);
        EncoderPair::from_parts(qp, kp, m).unwrap()
    }

    #[test]
    fn momentum_identity_copy_and_blend() {
        let mut p = pair(1.0, 0.3, 1.0);
        p.momentum_update().unwrap();
        assert!(p.key.get("w").unwrap().iter().all(|v| *v == 0.3));

        let mut p = pair(0.7, 0.3, 0.0);
        p.momentum_update().unwrap();
        assert_eq!(p.key, p.query);

        let mut p = pair(1.0, 0.0, 0.9);
        p.momentum_update().unwrap();
        assert!(p.key.get("w").unwrap().iter().all(|v| (v - 0.1).abs() < 1e-15));
    }

    #[test]
    fn mismatched_pair_rejected() {
        let mut q = ParamSet::new();
        q.push("w", Array2::zeros((2, 2)), true);
        let mut k = ParamSet::new();
        k.push("w", Array2::zeros((2, 3)), true);
        assert!(EncoderPair::from_parts(q, k, 0.5).is_err());
    }
}
