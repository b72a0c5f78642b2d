//! Pre-training state, the six-phase training step and the epoch loop.
//!
//! Step order: augment, encode (query with tape, key without), losses
//! against queue snapshots, backward and AdamW, momentum updates, enqueue.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod optim;

use std::io::Write;
use std::path::Path;

use log::warn;
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::Dataset;
use crate::encoders::{EncoderPair, ImageBatch, ImageTower, TextTower, Tokenizer};
use crate::error::{Error, Result};
use crate::imaging::{FileImageLoader, Image, ImageLoader};
use crate::losses::{
    attribute_logits, clamp_tau_prime, itc_terms_masked, loss_coefficients, mac_term, same_instance_mask,
    ssl_contrastive_masked, total_loss,
    AttributeClassifier, Branch, LossBreakdown, LossParts, LossWeights,
};
use crate::memory::NegativeQueue;
use crate::mining::AttributeVocabulary;
use crate::params::{Bound, ParamSet};

pub use augment::{augment, heavy_view, light_view, AugmentationPolicy, PolicyKind};
pub use checkpoint::{inspect_checkpoint, load_checkpoint, save_checkpoint, CheckpointInfo, FORMAT_VERSION};
pub use config::{AugmentationConfig, TokenizerConfig, TrainConfig};
pub use optim::{clip_global_norm, global_norm, lr_at_step, AdamW};

/// Rows per forward pass when embedding outside training.
const EMBED_CHUNK: usize = 64;

/// A sample decoded and tokenised for training.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    /// Pixels in `[0, 1]` at the encoder resolution.
    pub image: Image,
    /// `None` for caption-less samples.
    pub tokens: Option<Vec<u32>>,
    pub labels: Option<Vec<u8>>,
    /// Dataset position; the identity used by instance-level masking.
    pub instance: i64,
}

/// Decodes, resizes and tokenises every sample of `ds`.
pub fn prepare_dataset(
    ds: &Dataset,
    cfg: &TrainConfig,
    tokenizer: &Tokenizer,
    loader: &dyn ImageLoader,
) -> Result<Vec<PreparedSample>> {
    let (h, w) = (cfg.image_encoder.height, cfg.image_encoder.width);
    ds.samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let image = ds.image(i, loader, h, w)?;
            if !image.in_unit_range() {
                return Err(Error::InvalidInput(format!("sample {i} has pixels outside [0, 1]")));
            }
            let tokens = match s.caption.as_deref() {
                Some(c) if s.has_caption() => Some(tokenizer.tokenize(c)?),
                _ => None,
            };
            Ok(PreparedSample {
                image,
                tokens,
                labels: s.attributes.clone(),
                instance: i as i64,
            })
        })
        .collect()
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_ssl: f64,
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub l_mac_hard: f64,
    pub l_mac_soft: f64,
    pub total: f64,
    /// Temperature used by this step's image-text terms.
    pub tau_prime: f64,
    pub lr: f64,
}

impl StepRecord {
    fn new(step: u64, b: &LossBreakdown, tau_prime: f64, lr: f64) -> Self {
        Self {
            step,
            l_ssl: b.l_ssl,
            l_i2t: b.l_i2t,
            l_t2i: b.l_t2i,
            l_mac_hard: b.l_mac_hard,
            l_mac_soft: b.l_mac_soft,
            total: b.total,
            tau_prime,
            lr,
        }
    }

    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            l_ssl: self.l_ssl,
            l_i2t: self.l_i2t,
            l_t2i: self.l_t2i,
            l_mac_hard: self.l_mac_hard,
            l_mac_soft: self.l_mac_soft,
            total: self.total,
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serialises")
    }
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub tokenizer: Tokenizer,
    pub vocabulary: Option<AttributeVocabulary>,
    pub image_tower: ImageTower,
    pub text_tower: TextTower,
    pub image: EncoderPair,
    pub text: EncoderPair,
    pub classifier: AttributeClassifier,
    pub ssl_queue: NegativeQueue,
    pub itc_image_queue: NegativeQueue,
    pub itc_text_queue: NegativeQueue,
    pub tau_prime: f64,
    pub optimizer: AdamW,
    /// Number of completed steps.
    pub step: u64,
    pub steps_per_epoch: u64,
    /// Augmentation randomness.
    pub rng: ChaCha8Rng,
}

struct ImageOut {
    ssl: Option<Var>,
    itc_pre: Option<Var>,
    itc: Option<Var>,
}

struct TextOut {
    pre: Var,
    normed: Var,
}

impl TrainState {
    pub fn new(config: TrainConfig, tokenizer: Tokenizer, vocabulary: Option<AttributeVocabulary>) -> Result<Self> {
        config.validate()?;
        if tokenizer.max_length() != config.tokenizer.max_length {
            return Err(Error::Config(format!(
                "tokenizer max_length {} differs from config {}",
                tokenizer.max_length(),
                config.tokenizer.max_length
            )));
        }
        match &vocabulary {
            Some(v) if v.len() != config.m => {
                return Err(Error::Config(format!(
                    "vocabulary has {} attributes, config expects m = {}",
                    v.len(),
                    config.m
                )))
            }
            None if config.toggles.mac => {
                return Err(Error::Config("attribute loss enabled but no attribute vocabulary given".into()))
            }
            _ => {}
        }
        let image_tower = ImageTower::new(config.image_encoder.clone(), config.d)?;
        let text_tower = TextTower::new(config.text_encoder.clone(), tokenizer.vocab_size(), config.d)?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let image = EncoderPair::new(image_tower.init(&mut init), config.momentum_m)?;
        let text = EncoderPair::new(text_tower.init(&mut init), config.momentum_m)?;
        let classifier = AttributeClassifier::new(config.m, config.d, config.momentum_m, &mut init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let mut state = Self {
            ssl_queue: NegativeQueue::new(config.k, config.d)?,
            itc_image_queue: NegativeQueue::new(config.k, config.d)?,
            itc_text_queue: NegativeQueue::new(config.k, config.d)?,
            tau_prime: config.tau_prime_init,
            optimizer: AdamW::new(&[], config.weight_decay),
            step: 0,
            steps_per_epoch: 1,
            rng,
            config,
            tokenizer,
            vocabulary,
            image_tower,
            text_tower,
            image,
            text,
            classifier,
        };
        state.optimizer = AdamW::new(&state.trainable_shapes(), state.config.weight_decay);
        Ok(state)
    }

    /// Names of the optimised tensors, in optimizer slot order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (prefix, set) in self.trainable_sets() {
            names.extend(set.iter().map(|p| format!("{prefix}.{}", p.name)));
        }
        names.push("tau_prime".into());
        names
    }

    fn trainable_sets(&self) -> [(&'static str, &ParamSet); 3] {
        [
            ("image", &self.image.query),
            ("text", &self.text.query),
            ("classifier", &self.classifier.pair.query),
        ]
    }

    fn trainable_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes: Vec<(usize, usize)> = self
            .trainable_sets()
            .iter()
            .flat_map(|(_, s)| s.iter().map(|p| p.value.dim()).collect::<Vec<_>>())
            .collect();
        shapes.push((1, 1));
        shapes
    }

    pub fn steps_total(&self) -> u64 {
        self.config.epochs as u64 * self.steps_per_epoch
    }

    fn image_forward(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        images: &[Image],
        n_ssl: usize,
        n_cross: usize,
    ) -> Result<(ImageOut, Bound)> {
        let bound = params.bind(g);
        let batch = ImageBatch::from_images(images)?;
        let f = self.image_tower.features(g, &bound, &batch)?;
        let mut out = ImageOut {
            ssl: None,
            itc_pre: None,
            itc: None,
        };
        if n_ssl > 0 {
            let s = g.row_slice(f, 0, n_ssl);
            let p = self.image_tower.ssl_projection(g, &bound, s);
            out.ssl = Some(g.l2_normalize(p)?);
        }
        if n_cross > 0 {
            let s = g.row_slice(f, n_ssl, n_ssl + n_cross);
            let a = self.image_tower.itc_projection(g, &bound, s);
            out.itc_pre = Some(a);
            out.itc = Some(g.l2_normalize(a)?);
        }
        Ok((out, bound))
    }

    fn text_forward(&self, g: &mut Graph, params: &ParamSet, ids: &[Vec<u32>]) -> Result<(TextOut, Bound)> {
        let bound = params.bind(g);
        let f = self.text_tower.features(g, &bound, ids)?;
        let pre = self.text_tower.projection(g, &bound, f);
        let normed = g.l2_normalize(pre)?;
        Ok((TextOut { pre, normed }, bound))
    }

    /// Decodes a raw batch with the default file loader and trains on it.
    pub fn train_step(&mut self, batch: &[crate::data::CaptionedSample]) -> Result<StepRecord> {
        let ds = Dataset::new(batch.to_vec(), self.vocabulary.clone());
        let prepared = prepare_dataset(&ds, &self.config, &self.tokenizer, &FileImageLoader)?;
        let refs: Vec<&PreparedSample> = prepared.iter().collect();
        self.train_step_prepared(&refs)
    }

    pub fn train_step_prepared(&mut self, batch: &[&PreparedSample]) -> Result<StepRecord> {
        let b = batch.len();
        if b == 0 {
            return Err(Error::InvalidInput("empty training batch".into()));
        }
        if b > self.config.k {
            return Err(Error::InvalidInput(format!(
                "batch of {b} exceeds queue capacity {}",
                self.config.k
            )));
        }
        let toggles = self.config.toggles;
        let cross = toggles.itc || toggles.mac;
        let captioned: Vec<usize> = if cross {
            (0..b).filter(|&i| batch[i].tokens.is_some()).collect()
        } else {
            Vec::new()
        };
        if cross && captioned.len() < b {
            warn!(
                "step {}: {} caption-less samples excluded from image-text and attribute terms",
                self.step,
                b - captioned.len()
            );
        }
        if toggles.mac {
            if captioned.is_empty() {
                return Err(Error::InvalidInput("attribute loss enabled but batch has no attribute labels".into()));
            }
            if let Some(&i) = captioned.iter().find(|&&i| batch[i].labels.is_none()) {
                return Err(Error::InvalidInput(format!(
                    "attribute loss enabled but batch sample {i} has no attribute labels"
                )));
            }
        }
        let n_ssl = if toggles.ssl { b } else { 0 };
        let n_cross = captioned.len();
        if n_ssl + n_cross == 0 {
            return Err(Error::InvalidInput("batch has no sample usable by the enabled objectives".into()));
        }

        // (1) augment
        let heavy = AugmentationPolicy::heavy(self.config.augmentation.clone());
        let light = AugmentationPolicy::light();
        let mut q_views = Vec::with_capacity(n_ssl + n_cross);
        let mut k_views = Vec::with_capacity(n_ssl + n_cross);
        if toggles.ssl {
            for s in batch {
                let mut v = augment(&s.image, &heavy, &mut self.rng)?;
                k_views.push(v.pop().expect("two heavy views"));
                q_views.push(v.pop().expect("two heavy views"));
            }
        }
        for &i in &captioned {
            let v = augment(&batch[i].image, &light, &mut self.rng)?.remove(0);
            q_views.push(v.clone());
            k_views.push(v);
        }

        // (2) encode
        let mut gi = Graph::new();
        let (qi, bi) = self.image_forward(&mut gi, &self.image.query, &q_views, n_ssl, n_cross)?;
        let mut gk = Graph::new();
        let (ki, _) = self.image_forward(&mut gk, &self.image.key, &k_views, n_ssl, n_cross)?;
        let ids: Vec<Vec<u32>> = captioned
            .iter()
            .map(|&i| batch[i].tokens.clone().expect("captioned"))
            .collect();
        let mut gt = Graph::new();
        let mut gtk = Graph::new();
        let (qt, bt, kt) = if n_cross > 0 {
            let (qt, bt) = self.text_forward(&mut gt, &self.text.query, &ids)?;
            let (kt, _) = self.text_forward(&mut gtk, &self.text.key, &ids)?;
            (Some(qt), Some(bt), Some(kt))
        } else {
            (None, None, None)
        };

        // (3) losses
        let lw = LossWeights {
            tau_prime: self.tau_prime,
            ..self.config.loss_weights()
        };
        let coef = loss_coefficients(&lw, &toggles);
        let mut parts = LossParts::default();
        let mut img_seeds: Vec<(Var, Array2<f64>)> = Vec::new();
        let mut txt_seeds: Vec<(Var, Array2<f64>)> = Vec::new();
        let mut grad_tau = 0.0;
        let (m, d) = (self.config.m, self.config.d);
        let mut grad_w = Array2::<f64>::zeros((m, d));
        let mut grad_z = Array2::<f64>::zeros((1, m));

        let batch_ids: Vec<i64> = batch.iter().map(|s| s.instance).collect();
        let cross_ids: Vec<i64> = captioned.iter().map(|&i| batch[i].instance).collect();
        let mask_for = |q: &NegativeQueue, ids: &[i64]| {
            self.config
                .mask_same_instance
                .then(|| same_instance_mask(ids, &q.snapshot_ids()))
        };
        if let (Some(q), Some(k)) = (qi.ssl, ki.ssl) {
            if !self.ssl_queue.is_empty() {
                let negs = self.ssl_queue.snapshot();
                let keep = mask_for(&self.ssl_queue, &batch_ids);
                let term = ssl_contrastive_masked(
                    gi.value(q).view(),
                    gk.value(k).view(),
                    negs.view(),
                    keep.as_ref().map(|m| m.view()),
                    lw.tau,
                )?;
                parts.l_ssl = term.loss;
                img_seeds.push((q, term.grad_query * coef.ssl));
            }
        }
        if let (Some(qt), Some(kt)) = (&qt, &kt) {
            let (q_img, k_img) = (qi.itc.expect("cross views"), ki.itc.expect("cross views"));
            if toggles.itc && !self.itc_image_queue.is_empty() && !self.itc_text_queue.is_empty() {
                let neg_txt = self.itc_text_queue.snapshot();
                let neg_img = self.itc_image_queue.snapshot();
                let keep_txt = mask_for(&self.itc_text_queue, &cross_ids);
                let keep_img = mask_for(&self.itc_image_queue, &cross_ids);
                let terms = itc_terms_masked(
                    gi.value(q_img).view(),
                    gtk.value(kt.normed).view(),
                    gt.value(qt.normed).view(),
                    gk.value(k_img).view(),
                    neg_txt.view(),
                    neg_img.view(),
                    keep_txt.as_ref().map(|m| m.view()),
                    keep_img.as_ref().map(|m| m.view()),
                    self.tau_prime,
                )?;
                parts.l_i2t = terms.i2t.loss;
                parts.l_t2i = terms.t2i.loss;
                grad_tau += coef.itc * (terms.i2t.grad_temperature + terms.t2i.grad_temperature);
                img_seeds.push((q_img, terms.i2t.grad_query * coef.itc));
                txt_seeds.push((qt.normed, terms.t2i.grad_query * coef.itc));
            }
            if toggles.mac {
                let a_img = qi.itc_pre.expect("cross views");
                let weights = self
                    .vocabulary
                    .as_ref()
                    .ok_or_else(|| Error::Config("attribute loss enabled but no vocabulary".into()))?
                    .weights()
                    .to_vec();
                let y = label_matrix(captioned.iter().map(|&i| batch[i].labels.as_deref().expect("checked")), m)?;
                let (w_q, z_q) = (self.classifier.w_q(), self.classifier.z_q());
                let e_img = gi.value(a_img).view();
                let e_txt = gt.value(qt.pre).view();
                let mut add_mac = |term: crate::losses::MacTerm, c: f64| {
                    img_seeds.push((a_img, term.grad_emb_img * c));
                    txt_seeds.push((qt.pre, term.grad_emb_txt * c));
                    grad_w.scaled_add(c, &term.grad_weight);
                    grad_z.scaled_add(c, &term.grad_bias);
                };
                let hard = mac_term(w_q, z_q, e_img, e_txt, y.view(), y.view(), &weights)?;
                parts.l_mac_hard = hard.loss;
                add_mac(hard, coef.mac_hard);
                if toggles.soft_enabled() {
                    let k_img_pre = ki.itc_pre.expect("cross views");
                    let yhat_img = attribute_logits(&self.classifier, gk.value(k_img_pre).view(), Branch::Key)?;
                    let yhat_txt = attribute_logits(&self.classifier, gtk.value(kt.pre).view(), Branch::Key)?;
                    let soft = mac_term(w_q, z_q, e_img, e_txt, yhat_txt.view(), yhat_img.view(), &weights)?;
                    parts.l_mac_soft = soft.loss;
                    add_mac(soft, coef.mac_soft);
                }
            }
        }
        let breakdown = total_loss(&parts, &lw, &toggles)?;

        // (4) backward and update
        let mut grads = bi.grads(&mut gi.backward(img_seeds), &self.image.query);
        match &bt {
            Some(bt) => grads.extend(bt.grads(&mut gt.backward(txt_seeds), &self.text.query)),
            None => grads.extend(self.text.query.iter().map(|p| Array2::zeros(p.value.raw_dim()))),
        }
        grads.push(grad_w);
        grads.push(grad_z);
        grads.push(Array2::from_elem((1, 1), grad_tau));
        clip_global_norm(&mut grads, self.config.grad_clip);
        let lr = lr_at_step(&self.config, self.step, self.steps_per_epoch);
        let mut tau = Array2::from_elem((1, 1), self.tau_prime);
        {
            let mut slots: Vec<(&mut Array2<f64>, bool)> = Vec::with_capacity(grads.len());
            for set in [&mut self.image.query, &mut self.text.query, &mut self.classifier.pair.query] {
                for p in set.iter_mut() {
                    slots.push((&mut p.value, p.decay));
                }
            }
            slots.push((&mut tau, false));
            self.optimizer.step(&mut slots, &grads, lr)?;
        }
        let tau_used = self.tau_prime;
        self.tau_prime = clamp_tau_prime(tau[[0, 0]]);

        // (5) momentum
        self.image.momentum_update()?;
        self.text.momentum_update()?;
        self.classifier.momentum_update()?;

        // (6) enqueue
        if let Some(k) = ki.ssl {
            self.ssl_queue.enqueue_with_ids(gk.value(k).view(), &batch_ids)?;
        }
        if toggles.itc {
            if let (Some(k_img), Some(kt)) = (ki.itc, &kt) {
                self.itc_image_queue.enqueue_with_ids(gk.value(k_img).view(), &cross_ids)?;
                self.itc_text_queue.enqueue_with_ids(gtk.value(kt.normed).view(), &cross_ids)?;
            }
        }

        let record = StepRecord::new(self.step, &breakdown, tau_used, lr);
        self.step += 1;
        Ok(record)
    }

    /// Deterministic image embeddings: query encoder, image-text head, L2.
    pub fn embed_images(&self, images: &[Image]) -> Result<Array2<f64>> {
        let normalized: Vec<Image> = images.iter().map(|im| light_view(im, false)).collect();
        self.chunked_rows(normalized.len(), |lo, hi| {
            let mut g = Graph::new();
            let (out, _) = self.image_forward(&mut g, &self.image.query, &normalized[lo..hi], 0, hi - lo)?;
            Ok(g.value(out.itc.expect("cross rows")).clone())
        })
    }

    /// Deterministic text embeddings: query encoder, head, L2.
    pub fn embed_texts(&self, ids: &[Vec<u32>]) -> Result<Array2<f64>> {
        self.chunked_rows(ids.len(), |lo, hi| {
            let mut g = Graph::new();
            let (out, _) = self.text_forward(&mut g, &self.text.query, &ids[lo..hi])?;
            Ok(g.value(out.normed).clone())
        })
    }

    /// Query-classifier attribute probabilities for images.
    pub fn image_attribute_probs(&self, images: &[Image]) -> Result<Array2<f64>> {
        let normalized: Vec<Image> = images.iter().map(|im| light_view(im, false)).collect();
        self.chunked_rows(normalized.len(), |lo, hi| {
            let mut g = Graph::new();
            let (out, _) = self.image_forward(&mut g, &self.image.query, &normalized[lo..hi], 0, hi - lo)?;
            attribute_logits(&self.classifier, g.value(out.itc_pre.expect("cross rows")).view(), Branch::Query)
        })
    }

    fn chunked_rows(&self, n: usize, mut f: impl FnMut(usize, usize) -> Result<Array2<f64>>) -> Result<Array2<f64>> {
        if n == 0 {
            return Err(Error::InvalidInput("nothing to embed".into()));
        }
        let mut parts = Vec::new();
        let mut lo = 0;
        while lo < n {
            let hi = (lo + EMBED_CHUNK).min(n);
            parts.push(f(lo, hi)?);
            lo = hi;
        }
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|p| p.view()).collect();
        Ok(ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths"))
    }

    /// Fraction of images whose query view scores its own key view above
    /// the key views of every other image and every queued SSL negative.
    /// Image `i` is taken to be dataset instance `i`; with masking on, its
    /// own stale queue entries are not negatives.
    pub fn instance_accuracy(&self, images: &[Image], rng: &mut ChaCha8Rng) -> Result<f64> {
        if images.len() < 2 {
            return Err(Error::InvalidInput("instance accuracy needs at least two images".into()));
        }
        let heavy = AugmentationPolicy::heavy(self.config.augmentation.clone());
        let mut qv = Vec::with_capacity(images.len());
        let mut kv = Vec::with_capacity(images.len());
        for im in images {
            let mut v = augment(im, &heavy, rng)?;
            kv.push(v.pop().expect("two views"));
            qv.push(v.pop().expect("two views"));
        }
        let ssl = |params: &ParamSet, views: &[Image]| -> Result<Array2<f64>> {
            self.chunked_rows(views.len(), |lo, hi| {
                let mut g = Graph::new();
                let (out, _) = self.image_forward(&mut g, params, &views[lo..hi], hi - lo, 0)?;
                Ok(g.value(out.ssl.expect("ssl rows")).clone())
            })
        };
        let q = ssl(&self.image.query, &qv)?;
        let k = ssl(&self.image.key, &kv)?;
        let sim = q.dot(&k.t());
        let queued = q.dot(&self.ssl_queue.snapshot().t());
        let queued_ids = self.ssl_queue.snapshot_ids();
        let mask = self.config.mask_same_instance;
        let hits = (0..images.len())
            .filter(|&i| {
                let pos = sim[[i, i]];
                (0..images.len()).all(|j| j == i || pos > sim[[i, j]])
                    && queued_ids
                        .iter()
                        .enumerate()
                        .all(|(j, &id)| (mask && id == i as i64) || pos > queued[[i, j]])
            })
            .count();
        Ok(hits as f64 / images.len() as f64)
    }
}

fn label_matrix<'a>(rows: impl Iterator<Item = &'a [u8]>, m: usize) -> Result<Array2<f64>> {
    let rows: Vec<&[u8]> = rows.collect();
    let mut y = Array2::zeros((rows.len(), m));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != m {
            return Err(Error::Shape(format!("label vector has {} entries, expected {m}", r.len())));
        }
        for (j, &v) in r.iter().enumerate() {
            y[[i, j]] = f64::from(v);
        }
    }
    Ok(y)
}

/// Number of full batches per epoch; the last partial batch is dropped.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> Result<u64> {
    let spe = n / batch_size.max(1);
    if spe == 0 {
        return Err(Error::InvalidInput(format!(
            "dataset of {n} samples is smaller than one batch of {batch_size}"
        )));
    }
    Ok(spe as u64)
}

/// Sample order of `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 + epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains from `state.step` up to `until` (default: the end of the
/// schedule), writing one JSON line per step to `log`.
pub fn run_training(
    state: &mut TrainState,
    data: &[PreparedSample],
    until: Option<u64>,
    log: &mut dyn Write,
) -> Result<Vec<StepRecord>> {
    let bs = state.config.batch_size;
    let spe = steps_per_epoch(data.len(), bs)?;
    if state.step > 0 && state.steps_per_epoch != spe {
        return Err(Error::Config(format!(
            "state was trained with {} steps per epoch, data gives {spe}",
            state.steps_per_epoch
        )));
    }
    state.steps_per_epoch = spe;
    let end = until.unwrap_or(state.steps_total()).min(state.steps_total());
    let mut records = Vec::new();
    let mut cached: Option<(u64, Vec<usize>)> = None;
    while state.step < end {
        let epoch = state.step / spe;
        let pos = (state.step % spe) as usize;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            cached = Some((epoch, epoch_order(state.config.seed, epoch, data.len())));
        }
        let order = &cached.as_ref().expect("cached").1;
        let batch: Vec<&PreparedSample> = order[pos * bs..(pos + 1) * bs].iter().map(|&i| &data[i]).collect();
        let rec = state.train_step_prepared(&batch)?;
        writeln!(log, "{}", rec.to_json_line()).map_err(|e| Error::io("<training log>", e))?;
        records.push(rec);
    }
    Ok(records)
}

/// Reads a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse(format!("log line {}: {e}", i + 1)))
        })
        .collect()
}
