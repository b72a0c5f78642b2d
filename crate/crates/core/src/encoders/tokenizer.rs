use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mining::normalize_tokens;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const BOS_ID: u32 = 2;
pub const EOS_ID: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Word-level tokenizer with bos/eos framing and fixed-length padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    ids: HashMap<String, u32>,
    tokens: Vec<String>,
    max_length: usize,
}

impl Tokenizer {
    /// Builds the vocabulary from a caption corpus; words are ordered by
    /// descending frequency then lexicographically after the reserved ids.
    pub fn from_corpus<'a>(captions: impl IntoIterator<Item = &'a str>, max_length: usize) -> Result<Self> {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for c in captions {
            for t in normalize_tokens(c) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut words: Vec<(String, u64)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens, max_length)
    }

    /// `tokens[i]` receives id `i`; the first four must be the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>, max_length: usize) -> Result<Self> {
        if max_length < 2 {
            return Err(Error::Config(format!(
                "tokenizer max_length must be at least 2, got {max_length}"
            )));
        }
        if tokens.len() < SPECIALS.len() || tokens[..4].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::InvalidInput(
                "tokenizer vocabulary must start with <pad>, <unk>, <bos>, <eos>".into(),
            ));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::InvalidInput(format!("duplicate tokenizer entry {t:?}")));
            }
        }
        Ok(Self {
            ids,
            tokens,
            max_length,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn max_length(&self) -> usize {
        self.max_length
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `[bos, w1.., eos, pad..]`, exactly `max_length` ids.
    pub fn tokenize(&self, caption: &str) -> Result<Vec<u32>> {
        if caption.trim().is_empty() {
            return Err(Error::InvalidInput("cannot tokenize an empty caption".into()));
        }
        let words = normalize_tokens(caption);
        let keep = words.len().min(self.max_length - 2);
        let mut out = Vec::with_capacity(self.max_length);
        out.push(BOS_ID);
        out.extend(words[..keep].iter().map(|w| self.id(w)));
        out.push(EOS_ID);
        out.resize(self.max_length, PAD_ID);
        Ok(out)
    }

    /// `token<TAB>id` per line.
    pub fn to_tsv(&self) -> String {
        self.tokens
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str, max_length: usize) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("tokenizer line {} needs token<TAB>id", n + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad id at tokenizer line {}", n + 1)))?;
            pairs.push((id, tok.to_string()));
        }
        pairs.sort();
        if pairs.iter().enumerate().any(|(i, (id, _))| *id != i) {
            return Err(Error::Parse("tokenizer ids must be dense from 0".into()));
        }
        Self::from_tokens(pairs.into_iter().map(|(_, t)| t).collect(), max_length)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, max_length: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text, max_length)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok(max_length: usize) -> Tokenizer {
        Tokenizer::from_corpus(["red shirt", "red pants"], max_length).unwrap()
    }

    #[test]
    fn framing_and_padding() {
        let t = tok(6);
        let ids = t.tokenize("red shirt").unwrap();
        assert_eq!(ids, vec![BOS_ID, t.id("red"), t.id("shirt"), EOS_ID, PAD_ID, PAD_ID]);
    }

    #[test]
    fn truncation_keeps_eos_last() {
        let t = tok(4);
        let ids = t.tokenize("red shirt red pants red").unwrap();
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[3], EOS_ID);
        assert_eq!(&ids[..3], &[BOS_ID, t.id("red"), t.id("shirt")]);
    }

    #[test]
    fn unknown_maps_to_unk() {
        let t = tok(6);
        assert_eq!(t.tokenize("green shirt").unwrap()[1], UNK_ID);
    }

    #[test]
    fn tsv_round_trip() {
        let t = tok(8);
        assert_eq!(Tokenizer::from_tsv(&t.to_tsv(), 8).unwrap(), t);
    }

    #[test]
    fn empty_caption_rejected() {
        assert!(tok(6).tokenize(" ").is_err());
    }
}
