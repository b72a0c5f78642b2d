//! Procedural "pedestrian card" images with template captions.
//!
//! 32 cards cover every gender x upper colour x lower colour combination.
//! Gender is drawn as hair shape; garment cut and accessory vary with the
//! card index. Captions use 16 distinct noun/adjective tokens, none of which
//! appears in every caption.

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{CaptionedSample, Dataset};
use crate::error::Result;
use crate::imaging::Image;
use crate::mining::{build_vocabulary, label_sample, AttributeVocabulary, TaggerLexicon};

pub const CARD_HEIGHT: usize = 64;
pub const CARD_WIDTH: usize = 32;
pub const NUM_CARDS: usize = 32;

const GENDERS: [&str; 2] = ["man", "woman"];
const UPPER_COLORS: [(&str, [f64; 3]); 4] = [
    ("red", [0.85, 0.15, 0.15]),
    ("blue", [0.15, 0.3, 0.85]),
    ("green", [0.15, 0.7, 0.25]),
    ("yellow", [0.95, 0.85, 0.15]),
];
const LOWER_COLORS: [(&str, [f64; 3]); 4] = [
    ("black", [0.08, 0.08, 0.08]),
    ("white", [0.95, 0.95, 0.95]),
    ("brown", [0.5, 0.3, 0.12]),
    ("purple", [0.55, 0.2, 0.65]),
];
const UPPER_KINDS: [&str; 2] = ["shirt", "jacket"];
const LOWER_KINDS: [&str; 2] = ["pants", "shorts"];

const BACKGROUND: [f64; 3] = [0.55, 0.6, 0.55];
const SKIN: [f64; 3] = [0.9, 0.72, 0.6];
const HAIR: [f64; 3] = [0.2, 0.12, 0.05];
const BAG: [f64; 3] = [0.75, 0.6, 0.35];
const STRAP: [f64; 3] = [0.15, 0.15, 0.15];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Accessory {
    None,
    Bag,
    Backpack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CardSpec {
    pub gender: usize,
    pub upper_color: usize,
    pub lower_color: usize,
    pub upper_kind: usize,
    pub lower_kind: usize,
    pub accessory: Accessory,
}

/// The 32 distinct cards in a fixed order.
pub fn card_specs() -> Vec<CardSpec> {
    family_specs(0)
}

/// Held-out family: same colour grid, but every card swaps its garment cuts
/// and shifts its accessory, so no caption repeats a training caption.
pub fn heldout_card_specs() -> Vec<CardSpec> {
    family_specs(1)
}

fn family_specs(family: usize) -> Vec<CardSpec> {
    let mut out = Vec::with_capacity(NUM_CARDS);
    for gender in 0..2 {
        for upper_color in 0..4 {
            for lower_color in 0..4 {
                out.push(CardSpec {
                    gender,
                    upper_color,
                    lower_color,
                    upper_kind: (upper_color + lower_color + family) % 2,
                    lower_kind: (gender + lower_color / 2 + upper_color + family) % 2,
                    accessory: match (gender + upper_color + 2 * lower_color + family) % 3 {
                        0 => Accessory::None,
                        1 => Accessory::Bag,
                        _ => Accessory::Backpack,
                    },
                });
            }
        }
    }
    out
}

struct Canvas<'a> {
    image: &'a mut Image,
    dy: i64,
    dx: i64,
}

impl Canvas<'_> {
    fn rect(&mut self, y0: i64, y1: i64, x0: i64, x1: i64, rgb: [f64; 3]) {
        let clip = |v: i64, hi: usize| v.clamp(0, hi as i64) as usize;
        let (h, w) = (self.image.height, self.image.width);
        self.image.fill_rect(
            clip(y0 + self.dy, h),
            clip(y1 + self.dy, h),
            clip(x0 + self.dx, w),
            clip(x1 + self.dx, w),
            rgb,
        );
    }
}

fn tint(rgb: [f64; 3], rng: &mut Option<&mut ChaCha8Rng>, amount: f64) -> [f64; 3] {
    match rng {
        Some(r) => rgb.map(|c| (c + r.gen_range(-amount..=amount)).clamp(0.0, 1.0)),
        None => rgb,
    }
}

impl CardSpec {
    pub fn caption(&self) -> String {
        let mut c = format!(
            "a {} wearing a {} {} and {} {}",
            GENDERS[self.gender],
            UPPER_COLORS[self.upper_color].0,
            UPPER_KINDS[self.upper_kind],
            LOWER_COLORS[self.lower_color].0,
            LOWER_KINDS[self.lower_kind]
        );
        match self.accessory {
            Accessory::None => {}
            Accessory::Bag => c.push_str(" carrying a bag"),
            Accessory::Backpack => c.push_str(" with a backpack"),
        }
        c
    }

    /// Renders at 64x32; `jitter` shifts the figure and perturbs colours.
    pub fn render(&self, mut jitter: Option<&mut ChaCha8Rng>) -> Image {
        let (dy, dx) = match jitter.as_deref_mut() {
            Some(r) => (r.gen_range(-2..=2), r.gen_range(-2..=2)),
            None => (0, 0),
        };
        let mut image = Image::filled(CARD_HEIGHT, CARD_WIDTH, tint(BACKGROUND, &mut jitter, 0.05));
        let skin = tint(SKIN, &mut jitter, 0.04);
        let hair = tint(HAIR, &mut jitter, 0.03);
        let upper = tint(UPPER_COLORS[self.upper_color].1, &mut jitter, 0.04);
        let lower = tint(LOWER_COLORS[self.lower_color].1, &mut jitter, 0.04);
        let mut c = Canvas {
            image: &mut image,
            dy,
            dx,
        };

        // head and hair
        c.rect(5, 14, 12, 20, skin);
        c.rect(3, 6, 11, 21, hair);
        if self.gender == 1 {
            c.rect(6, 22, 9, 12, hair);
            c.rect(6, 22, 20, 23, hair);
        }
        // torso and arms
        c.rect(14, 34, 9, 23, upper);
        let sleeve_end = if self.upper_kind == 1 { 34 } else { 21 };
        c.rect(15, 34, 6, 9, skin);
        c.rect(15, 34, 23, 26, skin);
        c.rect(15, sleeve_end, 6, 9, upper);
        c.rect(15, sleeve_end, 23, 26, upper);
        if self.upper_kind == 1 {
            c.rect(14, 34, 15, 17, tint([0.1, 0.1, 0.1], &mut jitter, 0.03));
        }
        // legs
        let cloth_end = if self.lower_kind == 1 { 45 } else { 60 };
        c.rect(34, 60, 10, 15, skin);
        c.rect(34, 60, 17, 22, skin);
        c.rect(34, cloth_end, 10, 15, lower);
        c.rect(34, cloth_end, 17, 22, lower);
        c.rect(34, 40, 15, 17, lower);
        match self.accessory {
            Accessory::None => {}
            Accessory::Bag => c.rect(30, 40, 25, 30, tint(BAG, &mut jitter, 0.04)),
            Accessory::Backpack => {
                let strap = tint(STRAP, &mut jitter, 0.03);
                c.rect(14, 28, 11, 13, strap);
                c.rect(14, 28, 19, 21, strap);
            }
        }
        image
    }
}

/// One sample per card; `render_seed` adds rendering jitter.
/// `person_id` is the card index.
pub fn pedestrian_cards(render_seed: Option<u64>) -> Vec<CaptionedSample> {
    cards_from(&card_specs(), render_seed)
}

fn cards_from(specs: &[CardSpec], render_seed: Option<u64>) -> Vec<CaptionedSample> {
    let mut rng = render_seed.map(ChaCha8Rng::seed_from_u64);
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut s = CaptionedSample::from_pixels(spec.render(rng.as_mut())).with_caption(spec.caption());
            s.person_id = Some(i as i64);
            s
        })
        .collect()
}

/// Mines an `m`-token vocabulary from the captions and labels every sample.
pub fn mine_and_label(samples: &mut [CaptionedSample], m: usize) -> Result<AttributeVocabulary> {
    let lex = TaggerLexicon::bundled();
    let corpus: Vec<String> = samples.iter().filter_map(|s| s.caption.clone()).collect();
    let vocab = build_vocabulary(&corpus, m, &lex)?;
    for s in samples.iter_mut() {
        if let Some(c) = &s.caption {
            s.attributes = Some(label_sample(c, &vocab, &lex)?);
        }
    }
    Ok(vocab)
}

/// Labelled card dataset with an `m`-attribute mined vocabulary.
pub fn card_dataset(render_seed: Option<u64>, m: usize) -> Result<Dataset> {
    let mut samples = pedestrian_cards(render_seed);
    let vocab = mine_and_label(&mut samples, m)?;
    Ok(Dataset::new(samples, Some(vocab)))
}

/// Held-out cards labelled against a training `vocab`.
pub fn heldout_dataset(render_seed: Option<u64>, vocab: &AttributeVocabulary) -> Result<Dataset> {
    let lex = TaggerLexicon::bundled();
    let mut samples = cards_from(&heldout_card_specs(), render_seed);
    for s in samples.iter_mut() {
        let c = s.caption.clone().expect("cards are captioned");
        s.attributes = Some(label_sample(&c, vocab, &lex)?);
    }
    Ok(Dataset::new(samples, Some(vocab.clone())))
}

/// Flips `round(fraction * N * M)` distinct attribute bits chosen uniformly.
pub fn flip_attribute_bits(samples: &mut [CaptionedSample], fraction: f64, rng: &mut impl Rng) -> usize {
    let m = samples
        .iter()
        .find_map(|s| s.attributes.as_ref().map(Vec::len))
        .unwrap_or(0);
    let labelled: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].attributes.is_some()).collect();
    let total = labelled.len() * m;
    let count = ((fraction * total as f64).round() as usize).min(total);
    for flat in sample(rng, total, count).into_iter() {
        let (row, col) = (labelled[flat / m], flat % m);
        let bits = samples[row].attributes.as_mut().expect("labelled");
        bits[col] ^= 1;
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cards_are_distinct_and_captions_unique() {
        let cards = pedestrian_cards(None);
        assert_eq!(cards.len(), NUM_CARDS);
        let captions: std::collections::HashSet<_> = cards.iter().map(|c| c.caption.clone()).collect();
        assert_eq!(captions.len(), NUM_CARDS);
        for (i, a) in cards.iter().enumerate() {
            for b in &cards[i + 1..] {
                assert_ne!(a.image_ref, b.image_ref);
            }
        }
    }

    #[test]
    fn mining_yields_sixteen_non_constant_attributes() {
        let ds = card_dataset(None, 16).unwrap();
        let vocab = ds.vocabulary.as_ref().unwrap();
        assert_eq!(vocab.len(), 16);
        for j in 0..16 {
            let on = ds.samples.iter().filter(|s| s.attributes.as_ref().unwrap()[j] == 1).count();
            assert!(on > 0 && on < NUM_CARDS, "attribute {j} is constant");
        }
    }

    #[test]
    fn heldout_captions_are_new_but_in_vocabulary() {
        let train = card_dataset(None, 16).unwrap();
        let vocab = train.vocabulary.clone().unwrap();
        let held = heldout_dataset(None, &vocab).unwrap();
        let seen: std::collections::HashSet<_> = train.samples.iter().map(|s| s.caption.clone()).collect();
        assert!(held.samples.iter().all(|s| !seen.contains(&s.caption)));
        let tok = crate::encoders::Tokenizer::from_corpus(
            train.samples.iter().map(|s| s.caption.as_deref().unwrap()),
            16,
        )
        .unwrap();
        for s in &held.samples {
            let ids = tok.tokenize(s.caption.as_deref().unwrap()).unwrap();
            assert!(!ids.contains(&crate::encoders::tokenizer::UNK_ID), "{:?}", s.caption);
        }
    }

    #[test]
    fn jitter_is_seeded_and_pixels_stay_in_range() {
        let a = pedestrian_cards(Some(3));
        let b = pedestrian_cards(Some(3));
        let c = pedestrian_cards(Some(4));
        assert_eq!(a, b);
        assert_ne!(a, c);
        for s in &a {
            match &s.image_ref {
                crate::data::ImageRef::Pixels(im) => assert!(im.in_unit_range()),
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn flips_exact_count() {
        let mut ds = card_dataset(None, 16).unwrap();
        let before: Vec<Vec<u8>> = ds.samples.iter().map(|s| s.attributes.clone().unwrap()).collect();
        let n = flip_attribute_bits(&mut ds.samples, 0.25, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(n, 128);
        let changed: usize = ds
            .samples
            .iter()
            .zip(&before)
            .map(|(s, b)| s.attributes.as_ref().unwrap().iter().zip(b).filter(|(x, y)| x != y).count())
            .sum();
        assert_eq!(changed, 128);
    }
}
