//! Caption-driven attribute mining.
//!
//! Captions are tagged with a deterministic lexicon + suffix tagger, every
//! noun/adjective occurrence is counted, the `M` most frequent tokens form
//! the attribute vocabulary, and each caption becomes a multi-hot presence
//! vector over it. Externally tagged captions (`token/TAG` per token, one
//! caption per line) can be fed in place of the bundled tagger.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Part-of-speech tag assigned to a caption token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Tag {
    Noun,
    Adjective,
    Verb,
    Determiner,
    Preposition,
    Conjunction,
    Pronoun,
    Adverb,
    Numeral,
    Other,
}

impl Tag {
    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Noun => "noun",
            Tag::Adjective => "adj",
            Tag::Verb => "verb",
            Tag::Determiner => "det",
            Tag::Preposition => "prep",
            Tag::Conjunction => "conj",
            Tag::Pronoun => "pron",
            Tag::Adverb => "adv",
            Tag::Numeral => "num",
            Tag::Other => "other",
        }
    }

    /// Noun/adjective tags map onto the attribute part-of-speech classes.
    pub fn attribute_class(self) -> Option<PosClass> {
        match self {
            Tag::Noun => Some(PosClass::Noun),
            Tag::Adjective => Some(PosClass::Adjective),
            _ => None,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tag {
    type Err = Error;

    /// Accepts the short names above as well as Penn Treebank tags.
    fn from_str(s: &str) -> Result<Self> {
        let tag = match s {
            "noun" => Tag::Noun,
            "adj" => Tag::Adjective,
            "verb" => Tag::Verb,
            "det" => Tag::Determiner,
            "prep" => Tag::Preposition,
            "conj" => Tag::Conjunction,
            "pron" => Tag::Pronoun,
            "adv" => Tag::Adverb,
            "num" => Tag::Numeral,
            "other" => Tag::Other,
            "NN" | "NNS" | "NNP" | "NNPS" => Tag::Noun,
            "JJ" | "JJR" | "JJS" => Tag::Adjective,
            "VB" | "VBD" | "VBG" | "VBN" | "VBP" | "VBZ" | "MD" => Tag::Verb,
            "DT" | "PDT" | "WDT" | "PRP$" | "WP$" => Tag::Determiner,
            "IN" | "TO" => Tag::Preposition,
            "CC" => Tag::Conjunction,
            "PRP" | "WP" | "EX" => Tag::Pronoun,
            "RB" | "RBR" | "RBS" | "WRB" | "RP" => Tag::Adverb,
            "CD" => Tag::Numeral,
            _ if s.chars().all(|c| c.is_ascii_uppercase() || c.is_ascii_punctuation()) => Tag::Other,
            _ => return Err(Error::Parse(format!("unknown part-of-speech tag {s:?}"))),
        };
        Ok(tag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PosClass {
    Noun,
    Adjective,
}

impl PosClass {
    pub fn as_str(self) -> &'static str {
        match self {
            PosClass::Noun => "noun",
            PosClass::Adjective => "adj",
        }
    }
}

impl FromStr for PosClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noun" => Ok(PosClass::Noun),
            "adj" | "adjective" => Ok(PosClass::Adjective),
            _ => Err(Error::Parse(format!("unknown attribute class {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaggerLexicon {
    pub word_tags: HashMap<String, Tag>,
    /// Tried in order; first matching suffix wins.
    pub suffix_rules: Vec<(String, Tag)>,
    pub default_tag: Tag,
}

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "his", "her", "their", "its", "some",
    "any", "each", "every", "another", "no",
];
const PRONOUNS: &[&str] = &["he", "she", "it", "they", "him", "them", "who", "which", "someone"];
const PREPOSITIONS: &[&str] = &[
    "in", "on", "with", "of", "at", "by", "for", "from", "to", "into", "over", "under", "near",
    "across", "along", "around", "behind", "beside", "through", "without", "down", "up",
];
const CONJUNCTIONS: &[&str] = &["and", "or", "but", "while", "as"];
const VERBS: &[&str] = &[
    "is", "are", "was", "were", "be", "has", "have", "wears", "wear", "carries", "carry",
    "holds", "hold", "walks", "walk", "looks", "stands", "appears", "seems", "goes", "rides",
];
const ADVERBS: &[&str] = &["very", "slightly", "also", "too", "quite", "mostly"];
const NOUNS: &[&str] = &[
    "man", "woman", "person", "boy", "girl", "lady", "child", "shirt", "t-shirt", "jacket",
    "coat", "sweater", "hoodie", "dress", "skirt", "pants", "trousers", "jeans", "shorts",
    "shoes", "sneakers", "boots", "sandals", "hat", "cap", "bag", "backpack", "handbag", "purse",
    "hair", "glasses", "sunglasses", "umbrella", "top", "vest", "suit", "tie", "watch", "belt",
    "socks", "phone", "scarf", "bottle", "bicycle", "sleeves", "collar", "stripes", "logo",
    "mask", "ponytail", "street", "road",
];
const ADJECTIVES: &[&str] = &[
    "red", "blue", "green", "yellow", "black", "white", "gray", "grey", "brown", "pink",
    "purple", "orange", "dark", "light", "beige", "navy", "long", "short", "blond", "young",
    "old", "striped", "plaid", "casual", "tall", "small", "large", "big", "thin", "heavy",
    "bright", "tight", "loose", "sleeveless", "middle-aged", "formal", "dotted",
];
const NUMERALS: &[&str] = &["one", "two", "three", "four", "five"];

impl TaggerLexicon {
    /// Lexicon covering the pedestrian-caption domain.
    pub fn bundled() -> Self {
        let mut word_tags = HashMap::new();
        for (words, tag) in [
            (DETERMINERS, Tag::Determiner),
            (PRONOUNS, Tag::Pronoun),
            (PREPOSITIONS, Tag::Preposition),
            (CONJUNCTIONS, Tag::Conjunction),
            (VERBS, Tag::Verb),
            (ADVERBS, Tag::Adverb),
            (NOUNS, Tag::Noun),
            (ADJECTIVES, Tag::Adjective),
            (NUMERALS, Tag::Numeral),
        ] {
            for w in words {
                word_tags.insert((*w).to_string(), tag);
            }
        }
        let suffix_rules = [
            ("ly", Tag::Adverb),
            ("ing", Tag::Verb),
            ("ed", Tag::Verb),
            ("ous", Tag::Adjective),
            ("ful", Tag::Adjective),
            ("ive", Tag::Adjective),
            ("ish", Tag::Adjective),
            ("less", Tag::Adjective),
            ("able", Tag::Adjective),
            ("al", Tag::Adjective),
            ("ic", Tag::Adjective),
            ("s", Tag::Noun),
        ]
        .into_iter()
        .map(|(s, t)| (s.to_string(), t))
        .collect();
        Self {
            word_tags,
            suffix_rules,
            default_tag: Tag::Noun,
        }
    }

    pub fn lookup(&self, token: &str) -> Tag {
        if let Some(t) = self.word_tags.get(token) {
            return *t;
        }
        if token.chars().all(|c| c.is_ascii_digit()) {
            return Tag::Numeral;
        }
        self.suffix_rules
            .iter()
            .find(|(suffix, _)| token.len() > suffix.len() && token.ends_with(suffix.as_str()))
            .map(|(_, t)| *t)
            .unwrap_or(self.default_tag)
    }
}

impl Default for TaggerLexicon {
    fn default() -> Self {
        Self::bundled()
    }
}

/// Lowercases, splits on whitespace and strips leading/trailing punctuation.
pub fn normalize_tokens(caption: &str) -> Vec<String> {
    caption
        .split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn tag_caption(caption: &str, lex: &TaggerLexicon) -> Result<Vec<(String, Tag)>> {
    if caption.trim().is_empty() {
        return Err(Error::InvalidInput("cannot tag an empty caption".into()));
    }
    Ok(normalize_tokens(caption)
        .into_iter()
        .map(|t| {
            let tag = lex.lookup(&t);
            (t, tag)
        })
        .collect())
}

/// Parses one caption's worth of `token/TAG` pairs.
pub fn parse_tagged_line(line: &str, line_no: usize) -> Result<Vec<(String, Tag)>> {
    line.split_whitespace()
        .map(|pair| {
            let (tok, tag) = pair.rsplit_once('/').ok_or_else(|| {
                Error::Parse(format!("expected token/tag, got {pair:?} at line {line_no}"))
            })?;
            let tag = tag
                .parse::<Tag>()
                .map_err(|e| Error::Parse(format!("{e} at line {line_no}")))?;
            Ok((tok.to_lowercase(), tag))
        })
        .collect()
}

pub fn parse_tagged_captions(text: &str) -> Result<Vec<Vec<(String, Tag)>>> {
    text.lines()
        .enumerate()
        .map(|(i, l)| parse_tagged_line(l, i + 1))
        .collect()
}

pub fn load_tagged_captions(path: &Path) -> Result<Vec<Vec<(String, Tag)>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tagged_captions(&text)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabEntry {
    pub token: String,
    pub pos: PosClass,
    pub frequency: u64,
}

/// Ordered top-`M` attribute tokens with their imbalance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeVocabulary {
    entries: Vec<VocabEntry>,
    weights: Vec<f64>,
    index: HashMap<String, usize>,
}

impl AttributeVocabulary {
    pub fn new(entries: Vec<VocabEntry>, weights: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidInput("attribute vocabulary must be non-empty".into()));
        }
        if entries.len() != weights.len() {
            return Err(Error::Shape(format!(
                "{} vocabulary entries but {} weights",
                entries.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidInput(format!("attribute weight {w} is not positive")));
        }
        for pair in entries.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            let ordered = a.frequency > b.frequency || (a.frequency == b.frequency && a.token < b.token);
            if !ordered {
                return Err(Error::InvalidInput(format!(
                    "vocabulary not ordered by descending frequency then token at {:?}/{:?}",
                    a.token, b.token
                )));
            }
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.token.clone(), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary token {:?}", e.token)));
            }
        }
        Ok(Self {
            entries,
            weights,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.token.as_str())
    }

    /// `token<TAB>pos<TAB>frequency<TAB>weight` per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (e, w) in self.entries.iter().zip(&self.weights) {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", e.token, e.pos.as_str(), e.frequency, w));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut weights = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let fields: Vec<&str> = line.split('\t').collect();
            let [token, pos, freq, weight] = fields[..] else {
                return Err(Error::Parse(format!(
                    "vocabulary line {} needs 4 tab-separated fields",
                    i + 1
                )));
            };
            let bad = |what: &str| Error::Parse(format!("bad {what} at vocabulary line {}", i + 1));
            entries.push(VocabEntry {
                token: token.to_string(),
                pos: pos.parse()?,
                frequency: freq.parse().map_err(|_| bad("frequency"))?,
            });
            weights.push(weight.parse().map_err(|_| bad("weight"))?);
        }
        Self::new(entries, weights)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }
}

/// Occurrence counts of noun/adjective tokens over tagged captions.
pub fn count_attribute_tokens(tagged: &[Vec<(String, Tag)>]) -> HashMap<String, (u64, PosClass)> {
    let mut by_class: HashMap<String, [u64; 2]> = HashMap::new();
    for caption in tagged {
        for (tok, tag) in caption {
            if let Some(class) = tag.attribute_class() {
                let slot = by_class.entry(tok.clone()).or_default();
                slot[class as usize] += 1;
            }
        }
    }
    by_class
        .into_iter()
        .map(|(tok, [nouns, adjs])| {
            // A token tagged both ways keeps its majority class.
            let pos = if adjs > nouns { PosClass::Adjective } else { PosClass::Noun };
            (tok, (nouns + adjs, pos))
        })
        .collect()
}

pub fn build_vocabulary_from_tagged(tagged: &[Vec<(String, Tag)>], m: usize) -> Result<AttributeVocabulary> {
    if m == 0 {
        return Err(Error::InvalidInput("M must be at least 1".into()));
    }
    if tagged.is_empty() {
        return Err(Error::InvalidInput("caption corpus is empty".into()));
    }
    let counts = count_attribute_tokens(tagged);
    if counts.len() < m {
        return Err(Error::InvalidInput(format!(
            "only {} distinct noun/adjective tokens available, cannot select M={m}",
            counts.len()
        )));
    }
    let mut ranked: Vec<VocabEntry> = counts
        .into_iter()
        .map(|(token, (frequency, pos))| VocabEntry {
            token,
            pos,
            frequency,
        })
        .collect();
    ranked.sort_by(|a, b| b.frequency.cmp(&a.frequency).then_with(|| a.token.cmp(&b.token)));
    ranked.truncate(m);

    let provisional = AttributeVocabulary::new(ranked.clone(), vec![1.0; m])?;
    let labels: Vec<Vec<u8>> = tagged.iter().map(|t| label_tagged(t, &provisional)).collect();
    let weights = compute_attribute_weights(&labels)?;
    AttributeVocabulary::new(ranked, weights)
}

pub fn build_vocabulary(corpus: &[String], m: usize, lex: &TaggerLexicon) -> Result<AttributeVocabulary> {
    let tagged = corpus
        .iter()
        .map(|c| tag_caption(c, lex))
        .collect::<Result<Vec<_>>>()?;
    build_vocabulary_from_tagged(&tagged, m)
}

/// Presence vector of vocabulary tokens tagged as noun/adjective.
pub fn label_tagged(tagged: &[(String, Tag)], vocab: &AttributeVocabulary) -> Vec<u8> {
    let mut bits = vec![0u8; vocab.len()];
    for (tok, tag) in tagged {
        if tag.attribute_class().is_some() {
            if let Some(j) = vocab.index_of(tok) {
                bits[j] = 1;
            }
        }
    }
    bits
}

pub fn label_sample(caption: &str, vocab: &AttributeVocabulary, lex: &TaggerLexicon) -> Result<Vec<u8>> {
    Ok(label_tagged(&tag_caption(caption, lex)?, vocab))
}

pub const PREVALENCE_FLOOR: f64 = 1e-4;
pub const WEIGHT_MIN: f64 = 0.1;
pub const WEIGHT_MAX: f64 = 10.0;

/// Positive prevalence `r_j` of each attribute over the label set.
pub fn prevalence(labels: &[Vec<u8>]) -> Result<Vec<f64>> {
    let Some(first) = labels.first() else {
        return Err(Error::InvalidInput("need at least one label vector".into()));
    };
    let m = first.len();
    let mut counts = vec![0u64; m];
    for (i, l) in labels.iter().enumerate() {
        if l.len() != m {
            return Err(Error::Shape(format!(
                "label vector {i} has length {}, expected {m}",
                l.len()
            )));
        }
        for (c, b) in counts.iter_mut().zip(l) {
            *c += u64::from(*b);
        }
    }
    let n = labels.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// Inverse-square-root prevalence weights, mean-normalised then clipped.
///
/// `w_j = clip(sqrt(1 / max(r_j, 1e-4)) / Z, 0.1, 10)` where `Z` is the mean
/// of the unclipped `sqrt(1 / max(r_j, 1e-4))`.
pub fn compute_attribute_weights(labels: &[Vec<u8>]) -> Result<Vec<f64>> {
    let raw: Vec<f64> = prevalence(labels)?
        .into_iter()
        .map(|r| (1.0 / r.max(PREVALENCE_FLOOR)).sqrt())
        .collect();
    let z = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw
        .into_iter()
        .map(|v| (v / z).clamp(WEIGHT_MIN, WEIGHT_MAX))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex() -> TaggerLexicon {
        TaggerLexicon::bundled()
    }

    #[test]
    fn tags_reference_sentence() {
        let got = tag_caption("The woman wears a red dress.", &lex()).unwrap();
        let want = [
            ("the", Tag::Determiner),
            ("woman", Tag::Noun),
            ("wears", Tag::Verb),
            ("a", Tag::Determiner),
            ("red", Tag::Adjective),
            ("dress", Tag::Noun),
        ];
        assert_eq!(got.len(), want.len());
        for ((t, g), (wt, wg)) in got.iter().zip(want) {
            assert_eq!((t.as_str(), *g), (wt, wg));
        }
    }

    #[test]
    fn empty_caption_rejected() {
        assert!(tag_caption("", &lex()).is_err());
        assert!(tag_caption("   ", &lex()).is_err());
    }

    #[test]
    fn case_folding() {
        let got = tag_caption("RED Red red", &lex()).unwrap();
        assert!(got.iter().all(|(t, g)| t == "red" && *g == Tag::Adjective));
        assert_eq!(got.len(), 3);
    }

    #[test]
    fn lookup_is_total() {
        let l = lex();
        for tok in ["zzz", "quickly", "striding", "123", "x"] {
            let _ = l.lookup(tok);
        }
        assert_eq!(l.lookup("quickly"), Tag::Adverb);
        assert_eq!(l.lookup("glimmering"), Tag::Verb);
        assert_eq!(l.lookup("shirts"), Tag::Noun);
        assert_eq!(l.lookup("42"), Tag::Numeral);
        assert_eq!(l.lookup("zzz"), Tag::Noun);
    }

    #[test]
    fn penn_tags_parse() {
        let t = parse_tagged_line("the/DT red/JJ shirt/NN ./.", 1).unwrap();
        assert_eq!(t[1], ("red".to_string(), Tag::Adjective));
        assert_eq!(t[3].1, Tag::Other);
        assert!(parse_tagged_line("novalue", 1).is_err());
    }

    #[test]
    fn toy_corpus_top_two() {
        let corpus: Vec<String> = [
            "shirt shirt red",
            "shirt red hat",
            "shirt shirt red",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let v = build_vocabulary(&corpus, 2, &lex()).unwrap();
        let e = v.entries();
        assert_eq!((e[0].token.as_str(), e[0].frequency), ("shirt", 5));
        assert_eq!((e[1].token.as_str(), e[1].frequency), ("red", 3));
    }

    #[test]
    fn tie_break_is_lexicographic() {
        let corpus = vec!["hat bag".to_string(), "bag hat".to_string()];
        let v = build_vocabulary(&corpus, 2, &lex()).unwrap();
        assert_eq!(v.tokens().collect::<Vec<_>>(), ["bag", "hat"]);
    }

    #[test]
    fn too_few_tokens_reports_available() {
        let err = build_vocabulary(&["a red hat".to_string()], 3, &lex()).unwrap_err();
        assert!(err.to_string().contains("only 2 distinct"), "{err}");
    }

    #[test]
    fn presence_not_count_and_no_stemming() {
        let corpus = vec!["shirt shirt red".to_string(), "red shirt".to_string()];
        let v = build_vocabulary(&corpus, 2, &lex()).unwrap();
        let j_shirt = v.index_of("shirt").unwrap();
        let j_red = v.index_of("red").unwrap();
        let bits = label_sample("a red shirt and red shoes", &v, &lex()).unwrap();
        assert_eq!((bits[j_shirt], bits[j_red]), (1, 1));
        assert_eq!(label_sample("blue pants", &v, &lex()).unwrap(), vec![0, 0]);
        let bits = label_sample("two shirts", &v, &lex()).unwrap();
        assert_eq!(bits[j_shirt], 0);
    }

    #[test]
    fn weights_equal_prevalence_is_one() {
        let labels = vec![vec![1, 0, 1], vec![0, 1, 0]];
        // r = [0.5, 0.5, 0.5]
        let w = compute_attribute_weights(&labels).unwrap();
        assert!(w.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn weights_ratio_follows_sqrt_prevalence() {
        // r = [0.5, 0.125]
        let mut labels = vec![vec![0u8, 0u8]; 8];
        for l in labels.iter_mut().take(4) {
            l[0] = 1;
        }
        labels[0][1] = 1;
        let w = compute_attribute_weights(&labels).unwrap();
        assert!((w[1] / w[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn absent_attribute_hits_upper_clip() {
        let mut labels = vec![vec![1u8; 16]; 4];
        for l in labels.iter_mut().take(2) {
            l.iter_mut().for_each(|b| *b = 0);
        }
        for l in labels.iter_mut() {
            l[15] = 0;
        }
        let w = compute_attribute_weights(&labels).unwrap();
        assert_eq!(w[15], WEIGHT_MAX);
    }

    #[test]
    fn vocabulary_rejects_misordered_entries() {
        let e = vec![
            VocabEntry { token: "b".into(), pos: PosClass::Noun, frequency: 2 },
            VocabEntry { token: "a".into(), pos: PosClass::Noun, frequency: 2 },
        ];
        assert!(AttributeVocabulary::new(e, vec![1.0, 1.0]).is_err());
    }
}
