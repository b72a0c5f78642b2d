//! Binary checkpoint: magic, version, JSON metadata, named f64 tensors,
//! trailing SHA-256 of everything before it.
//!
//! ```text
//! "VALPATCK" | u32 version | u64 meta_len | meta JSON
//! | u32 count | { u32 name_len | name | u64 rows | u64 cols | f64 LE * rows*cols }*
//! | sha256
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::Tokenizer;
use crate::error::{Error, Result};
use crate::memory::NegativeQueue;
use crate::mining::AttributeVocabulary;
use crate::params::ParamSet;
use crate::trainer::config::{hex, TrainConfig};
use crate::trainer::TrainState;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"VALPATCK";
const DIGEST_LEN: usize = 32;

#[derive(Debug, Serialize, Deserialize)]
struct QueueMeta {
    write_ptr: usize,
    filled: usize,
    ids: Vec<i64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    config_hash: String,
    step: u64,
    steps_per_epoch: u64,
    rng_seed: String,
    rng_stream: u64,
    /// Decimal, since JSON numbers cannot carry a u128.
    rng_word_pos: String,
    optimizer_t: u64,
    tokenizer: Vec<String>,
    vocabulary: Option<String>,
    queues: BTreeMap<String, QueueMeta>,
}

/// Summary of a checkpoint without rebuilding the full state.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub format_version: u32,
    pub step: u64,
    pub config_hash: String,
    pub tau_prime: f64,
    pub tensors: Vec<(String, usize, usize)>,
    pub queue_fill: Vec<(String, usize)>,
}

fn queue_names(state: &TrainState) -> [(&'static str, &NegativeQueue); 3] {
    [
        ("ssl", &state.ssl_queue),
        ("itc_image", &state.itc_image_queue),
        ("itc_text", &state.itc_text_queue),
    ]
}

fn param_sets(state: &TrainState) -> [(&'static str, &ParamSet); 6] {
    [
        ("image.query", &state.image.query),
        ("image.key", &state.image.key),
        ("text.query", &state.text.query),
        ("text.key", &state.text.key),
        ("classifier.query", &state.classifier.pair.query),
        ("classifier.key", &state.classifier.pair.key),
    ]
}

pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let meta = Meta {
        config: state.config.clone(),
        config_hash: state.config.hash(),
        step: state.step,
        steps_per_epoch: state.steps_per_epoch,
        rng_seed: hex(&state.rng.get_seed()),
        rng_stream: state.rng.get_stream(),
        rng_word_pos: state.rng.get_word_pos().to_string(),
        optimizer_t: state.optimizer.t,
        tokenizer: state.tokenizer.tokens().to_vec(),
        vocabulary: state.vocabulary.as_ref().map(AttributeVocabulary::to_tsv),
        queues: queue_names(state)
            .iter()
            .map(|(n, q)| {
                (
                    n.to_string(),
                    QueueMeta {
                        write_ptr: q.write_ptr(),
                        filled: q.filled(),
                        ids: q.raw_ids().to_vec(),
                    },
                )
            })
            .collect(),
    };
    let mut tensors: Vec<(String, &Array2<f64>)> = Vec::new();
    for (prefix, set) in param_sets(state) {
        for p in set.iter() {
            tensors.push((format!("{prefix}.{}", p.name), &p.value));
        }
    }
    for (name, q) in queue_names(state) {
        tensors.push((format!("queue.{name}"), q.buffer()));
    }
    for (i, name) in state.trainable_names().iter().enumerate() {
        tensors.push((format!("adam.m.{name}"), &state.optimizer.m[i]));
        tensors.push((format!("adam.v.{name}"), &state.optimizer.v[i]));
    }
    let tau = Array2::from_elem((1, 1), state.tau_prime);
    tensors.push(("tau_prime".into(), &tau));

    let meta_json = serde_json::to_vec(&meta).expect("metadata serialises");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.ncols() as u64).to_le_bytes());
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state);
    let tmp = path.with_file_name(format!(
        "{}.tmp",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default()
    ));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt("checkpoint is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, v: u64) -> Result<usize> {
        usize::try_from(v).map_err(|_| Error::Corrupt("length field overflows".into()))
    }
}

struct Decoded {
    meta: Meta,
    tensors: Vec<(String, Array2<f64>)>,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Corrupt("not a checkpoint file (bad magic or truncated header)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    if bytes.len() < 12 + DIGEST_LEN {
        return Err(Error::Corrupt("checkpoint is truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Corrupt("checksum mismatch (truncated or modified file)".into()));
    }
    let mut c = Cursor { buf: body, pos: 12 };
    let meta_len = c.u64()?;
    let meta_len = c.len(meta_len)?;
    let meta: Meta = serde_json::from_slice(c.take(meta_len)?)
        .map_err(|e| Error::Corrupt(format!("checkpoint metadata: {e}")))?;
    let count = c.u32()?;
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = String::from_utf8(c.take(n)?.to_vec())
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
        let (r, k) = (c.u64()?, c.u64()?);
        let (rows, cols) = (c.len(r)?, c.len(k)?);
        let n_vals = rows
            .checked_mul(cols)
            .and_then(|v| v.checked_mul(8))
            .ok_or_else(|| Error::Corrupt(format!("tensor {name} size overflows")))?;
        let raw = c.take(n_vals)?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Array2::from_shape_vec((rows, cols), vals).expect("sized above");
        tensors.push((name, t));
    }
    if c.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes after tensors".into()));
    }
    if meta.config.hash() != meta.config_hash {
        return Err(Error::Corrupt("config hash does not match stored config".into()));
    }
    Ok(Decoded { meta, tensors })
}

fn fill(set: &mut ParamSet, prefix: &str, map: &mut HashMap<String, Array2<f64>>) -> Result<()> {
    for p in set.iter_mut() {
        let name = format!("{prefix}.{}", p.name);
        let t = map
            .remove(&name)
            .ok_or_else(|| Error::Corrupt(format!("missing tensor {name}")))?;
        if t.dim() != p.value.dim() {
            return Err(Error::Corrupt(format!(
                "tensor {name} is {:?}, model expects {:?}",
                t.dim(),
                p.value.dim()
            )));
        }
        p.value = t;
    }
    Ok(())
}

fn parse_seed(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Corrupt("bad RNG seed".into());
    if s.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(seed)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let Decoded { meta, tensors } = decode(bytes)?;
    let tokenizer = Tokenizer::from_tokens(meta.tokenizer, meta.config.tokenizer.max_length)?;
    let vocabulary = meta
        .vocabulary
        .as_deref()
        .map(AttributeVocabulary::from_tsv)
        .transpose()?;
    let mut state = TrainState::new(meta.config, tokenizer, vocabulary)?;
    let mut map: HashMap<String, Array2<f64>> = tensors.into_iter().collect();

    fill(&mut state.image.query, "image.query", &mut map)?;
    fill(&mut state.image.key, "image.key", &mut map)?;
    fill(&mut state.text.query, "text.query", &mut map)?;
    fill(&mut state.text.key, "text.key", &mut map)?;
    fill(&mut state.classifier.pair.query, "classifier.query", &mut map)?;
    fill(&mut state.classifier.pair.key, "classifier.key", &mut map)?;

    for (name, slot) in [
        ("ssl", &mut state.ssl_queue),
        ("itc_image", &mut state.itc_image_queue),
        ("itc_text", &mut state.itc_text_queue),
    ] {
        let q = meta
            .queues
            .get(name)
            .ok_or_else(|| Error::Corrupt(format!("missing queue metadata {name}")))?;
        let buf = map
            .remove(&format!("queue.{name}"))
            .ok_or_else(|| Error::Corrupt(format!("missing queue {name}")))?;
        if buf.dim() != slot.buffer().dim() {
            return Err(Error::Corrupt(format!("queue {name} has shape {:?}", buf.dim())));
        }
        *slot = NegativeQueue::from_parts(buf, q.ids.clone(), q.write_ptr, q.filled)
            .map_err(|e| Error::Corrupt(format!("queue {name}: {e}")))?;
    }

    for (i, name) in state.trainable_names().iter().enumerate() {
        for (kind, slot) in [("m", &mut state.optimizer.m[i]), ("v", &mut state.optimizer.v[i])] {
            let key = format!("adam.{kind}.{name}");
            let t = map
                .remove(&key)
                .ok_or_else(|| Error::Corrupt(format!("missing tensor {key}")))?;
            if t.dim() != slot.dim() {
                return Err(Error::Corrupt(format!("tensor {key} has shape {:?}", t.dim())));
            }
            *slot = t;
        }
    }
    state.optimizer.t = meta.optimizer_t;
    let tau = map
        .remove("tau_prime")
        .filter(|t| t.dim() == (1, 1))
        .ok_or_else(|| Error::Corrupt("missing tau_prime".into()))?;
    state.tau_prime = tau[[0, 0]];
    if let Some(extra) = map.keys().next() {
        return Err(Error::Corrupt(format!("unexpected tensor {extra}")));
    }

    state.step = meta.step;
    state.steps_per_epoch = meta.steps_per_epoch;
    let mut rng = ChaCha8Rng::from_seed(parse_seed(&meta.rng_seed)?);
    rng.set_stream(meta.rng_stream);
    rng.set_word_pos(
        meta.rng_word_pos
            .parse::<u128>()
            .map_err(|_| Error::Corrupt("bad RNG position".into()))?,
    );
    state.rng = rng;
    Ok(state)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Header, tensor table and queue fill levels, validated like a full load.
pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointInfo> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let Decoded { meta, tensors } = decode(&bytes)?;
    let tau_prime = tensors
        .iter()
        .find(|(n, _)| n == "tau_prime")
        .map(|(_, t)| t[[0, 0]])
        .ok_or_else(|| Error::Corrupt("missing tau_prime".into()))?;
    let mut queue_fill: Vec<(String, usize)> = meta.queues.iter().map(|(n, q)| (n.clone(), q.filled)).collect();
    queue_fill.sort();
    Ok(CheckpointInfo {
        format_version: FORMAT_VERSION,
        step: meta.step,
        config_hash: meta.config_hash,
        tau_prime,
        tensors: tensors.iter().map(|(n, t)| (n.clone(), t.nrows(), t.ncols())).collect(),
        queue_fill,
    })
}
