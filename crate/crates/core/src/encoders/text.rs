use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, SeqLayout, Var};
use crate::encoders::tokenizer::PAD_ID;
use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEncoderConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Positional table size; equals the tokenizer's `max_length`.
    pub max_length: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            layers: 2,
            heads: 4,
            ffn: 512,
            max_length: 64,
        }
    }
}

const LN_EPS: f64 = 1e-5;

/// Pre-norm transformer over token ids with masked mean pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    pub vocab_size: usize,
}

impl TextEncoder {
    pub fn new(cfg: TextEncoderConfig, vocab_size: usize) -> Result<Self> {
        if cfg.heads == 0 || cfg.hidden % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "text hidden size {} is not divisible by {} heads",
                cfg.hidden, cfg.heads
            )));
        }
        if cfg.max_length < 2 || vocab_size < 4 {
            return Err(Error::Config("text encoder needs max_length >= 2 and a vocabulary".into()));
        }
        Ok(Self { cfg, vocab_size })
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.hidden
    }

    pub fn init(&self, rng: &mut impl Rng) -> ParamSet {
        let h = self.cfg.hidden;
        let f = self.cfg.ffn;
        let mut p = ParamSet::new();
        p.push("token_embedding", uniform(rng, self.vocab_size, h, 0.1), true);
        p.push("position_embedding", uniform(rng, self.cfg.max_length, h, 0.02), false);
        let lin = |rng: &mut _, fan_in: usize, fan_out: usize| uniform(rng, fan_in, fan_out, (1.0 / fan_in as f64).sqrt());
        for l in 0..self.cfg.layers {
            let pre = format!("layer{l}");
            p.push(format!("{pre}.ln1.gamma"), Array2::ones((1, h)), false);
            p.push(format!("{pre}.ln1.beta"), Array2::zeros((1, h)), false);
            for name in ["q", "k", "v", "o"] {
                p.push(format!("{pre}.attn.{name}.weight"), lin(rng, h, h), true);
                p.push(format!("{pre}.attn.{name}.bias"), Array2::zeros((1, h)), false);
            }
            p.push(format!("{pre}.ln2.gamma"), Array2::ones((1, h)), false);
            p.push(format!("{pre}.ln2.beta"), Array2::zeros((1, h)), false);
            p.push(format!("{pre}.ffn.in.weight"), lin(rng, h, f), true);
            p.push(format!("{pre}.ffn.in.bias"), Array2::zeros((1, f)), false);
            p.push(format!("{pre}.ffn.out.weight"), lin(rng, f, h), true);
            p.push(format!("{pre}.ffn.out.bias"), Array2::zeros((1, h)), false);
        }
        p.push("ln_final.gamma", Array2::ones((1, h)), false);
        p.push("ln_final.beta", Array2::zeros((1, h)), false);
        p
    }

    /// Encodes padded id sequences into `[B, hidden]` features.
    ///
    /// Trailing positions that are padding in every sequence are dropped
    /// before the forward pass; pad positions never reach real positions
    /// through attention or pooling, so the result is unchanged.
    pub fn forward(&self, g: &mut Graph, p: &Bound, prefix: &str, ids: &[Vec<u32>]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::InvalidInput("empty token batch".into()));
        }
        let width = ids[0].len();
        for (i, seq) in ids.iter().enumerate() {
            if seq.len() != width || width > self.cfg.max_length {
                return Err(Error::Shape(format!(
                    "sequence {i} has length {}, expected {width} <= {}",
                    seq.len(),
                    self.cfg.max_length
                )));
            }
            if let Some(bad) = seq.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(Error::InvalidInput(format!("token id {bad} outside vocabulary")));
            }
            if seq.iter().all(|&t| t == PAD_ID) {
                return Err(Error::InvalidInput(format!("sequence {i} is entirely padding")));
            }
        }
        let len = ids
            .iter()
            .map(|s| s.iter().rposition(|&t| t != PAD_ID).map_or(0, |i| i + 1))
            .max()
            .unwrap_or(1);
        let batch = ids.len();
        let mut flat = Vec::with_capacity(batch * len);
        let mut valid = Vec::with_capacity(batch * len);
        for seq in ids {
            for &t in &seq[..len] {
                flat.push(t as usize);
                valid.push(t != PAD_ID);
            }
        }
        let layout = SeqLayout { batch, len, valid };
        let v = |name: &str| p.var(&format!("{prefix}{name}"));

        let tok = g.gather(v("token_embedding"), flat);
        let pos = g.row_slice(v("position_embedding"), 0, len);
        let mut x = g.add_tiled(tok, pos);
        for l in 0..self.cfg.layers {
            let pre = format!("layer{l}");
            let h = g.layer_norm(x, v(&format!("{pre}.ln1.gamma")), v(&format!("{pre}.ln1.beta")), LN_EPS);
            let proj = |g: &mut Graph, name: &str| {
                g.linear(
                    h,
                    v(&format!("{pre}.attn.{name}.weight")),
                    v(&format!("{pre}.attn.{name}.bias")),
                )
            };
            let q = proj(g, "q");
            let k = proj(g, "k");
            let val = proj(g, "v");
            let a = g.attention(q, k, val, self.cfg.heads, layout.clone());
            let o = g.linear(a, v(&format!("{pre}.attn.o.weight")), v(&format!("{pre}.attn.o.bias")));
            x = g.add(x, o);
            let h2 = g.layer_norm(x, v(&format!("{pre}.ln2.gamma")), v(&format!("{pre}.ln2.beta")), LN_EPS);
            let f = g.linear(h2, v(&format!("{pre}.ffn.in.weight")), v(&format!("{pre}.ffn.in.bias")));
            let f = g.gelu(f);
            let f = g.linear(f, v(&format!("{pre}.ffn.out.weight")), v(&format!("{pre}.ffn.out.bias")));
            x = g.add(x, f);
        }
        let x = g.layer_norm(x, v("ln_final.gamma"), v("ln_final.beta"), LN_EPS);
        Ok(g.masked_mean_pool(x, layout))
    }
}
