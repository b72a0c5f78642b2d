//! Minimal reverse-mode tape used by the desk-scale encoders.
//!
//! Every value on the tape is a 2-D `f64` matrix. Image activations are
//! stored as `[N*H*W, C]` (NHWC flattened) and token activations as
//! `[B*L, H]`; ops that need the spatial or sequence structure carry it
//! alongside. Evaluation is eager: each op computes its value when it is
//! pushed, and [`Graph::backward`] walks the nodes in reverse insertion
//! order.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial bookkeeping for a 2-D convolution over NHWC activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

/// Sequence bookkeeping shared by attention and pooling.
#[derive(Debug, Clone)]
pub struct SeqLayout {
    pub batch: usize,
    pub len: usize,
    /// `batch * len` flags, `true` for real (non-pad) positions.
    pub valid: Vec<bool>,
}

impl SeqLayout {
    fn valid_count(&self, b: usize) -> usize {
        self.valid[b * self.len..(b + 1) * self.len]
            .iter()
            .filter(|v| **v)
            .count()
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    AddTiled(Var, Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Array2<f64>,
    },
    GlobalAvgPool {
        x: Var,
        batch: usize,
        spatial: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: SeqLayout,
        probs: Vec<f64>,
    },
    MaskedMeanPool {
        x: Var,
        layout: SeqLayout,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    RowSlice {
        x: Var,
        start: usize,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn im2col(x: ArrayView2<f64>, g: &ConvGeom) -> Array2<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut cols = Array2::<f64>::zeros((g.batch * ho * wo, g.patch_len()));
    for n in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let r = (n * ho + oy) * wo + ox;
                let mut row = cols.row_mut(r);
                let row = row.as_slice_mut().expect("contiguous");
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = (n * g.height + iy as usize) * g.width + ix as usize;
                        let dst = (ky * g.kernel + kx) * g.in_channels;
                        for c in 0..g.in_channels {
                            row[dst + c] = x[[src, c]];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &Array2<f64>, g: &ConvGeom) -> Array2<f64> {
    let (ho, wo) = (g.out_height(), g.out_width());
    let mut dx = Array2::<f64>::zeros((g.batch * g.height * g.width, g.in_channels));
    for n in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let r = (n * ho + oy) * wo + ox;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = (n * g.height + iy as usize) * g.width + ix as usize;
                        let src = (ky * g.kernel + kx) * g.in_channels;
                        for c in 0..g.in_channels {
                            dx[[dst, c]] += dcols[[r, src + c]];
                        }
                    }
                }
            }
        }
    }
    dx
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `x [r, n] + b [1, n]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let out = self.value(x) + self.value(b);
        self.push(out, Op::AddBias(x, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// `x [B*L, H] + p [L, H]`, tiling `p` over the batch.
    pub fn add_tiled(&mut self, x: Var, p: Var) -> Var {
        let len = self.value(p).nrows();
        let mut out = self.value(x).clone();
        for mut chunk in out.axis_chunks_iter_mut(Axis(0), len) {
            chunk += self.value(p);
        }
        self.push(out, Op::AddTiled(x, p))
    }

    /// Affine map `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    /// Convolution over `x [N*H*W, C]` with `w [k*k*C, Co]` and `b [1, Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let cols = im2col(self.value(x).view(), &geom);
        let out = cols.dot(self.value(w)) + self.value(b);
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        )
    }

    /// Mean over the `spatial` rows belonging to each of `batch` images.
    pub fn global_avg_pool(&mut self, x: Var, batch: usize) -> Var {
        let xv = self.value(x);
        let spatial = xv.nrows() / batch;
        let mut out = Array2::<f64>::zeros((batch, xv.ncols()));
        for (n, chunk) in xv.axis_chunks_iter(Axis(0), spatial).enumerate() {
            out.row_mut(n).assign(&chunk.mean_axis(Axis(0)).expect("non-empty"));
        }
        self.push(
            out,
            Op::GlobalAvgPool {
                x,
                batch,
                spatial,
            },
        )
    }

    /// Row lookup `table[ids]`.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let tv = self.value(table);
        let mut out = Array2::<f64>::zeros((ids.len(), tv.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&tv.row(id));
        }
        self.push(out, Op::Gather { table, ids })
    }

    /// Multi-head scaled dot-product attention; pad keys are excluded.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: SeqLayout) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let hidden = qv.ncols();
        let dh = hidden / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let len = layout.len;
        let mut out = Array2::<f64>::zeros(qv.raw_dim());
        let mut probs = vec![0.0; layout.batch * heads * len * len];
        let mut scores = vec![0.0; len];
        for b in 0..layout.batch {
            let base = b * len;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..len {
                    let qi = qv.slice(s![base + i, cols.clone()]);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..len {
                        if layout.valid[base + j] {
                            let sc = qi.dot(&kv.slice(s![base + j, cols.clone()])) * scale;
                            scores[j] = sc;
                            max = max.max(sc);
                        }
                    }
                    let p = &mut probs[((b * heads + h) * len + i) * len..][..len];
                    let mut sum = 0.0;
                    for j in 0..len {
                        if layout.valid[base + j] {
                            p[j] = (scores[j] - max).exp();
                            sum += p[j];
                        }
                    }
                    for pj in p.iter_mut() {
                        *pj /= sum;
                    }
                    let mut o = out.slice_mut(s![base + i, cols.clone()]);
                    for j in 0..len {
                        if p[j] != 0.0 {
                            o.scaled_add(p[j], &vv.slice(s![base + j, cols.clone()]));
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            },
        )
    }

    /// Per-sequence mean over valid positions: `[B*L, H] -> [B, H]`.
    pub fn masked_mean_pool(&mut self, x: Var, layout: SeqLayout) -> Var {
        let xv = self.value(x);
        let mut out = Array2::<f64>::zeros((layout.batch, xv.ncols()));
        for b in 0..layout.batch {
            let count = layout.valid_count(b) as f64;
            let mut row = out.row_mut(b);
            for i in 0..layout.len {
                if layout.valid[b * layout.len + i] {
                    row += &xv.row(b * layout.len + i);
                }
            }
            row.mapv_inplace(|v| v / count);
        }
        self.push(out, Op::MaskedMeanPool { x, layout })
    }

    /// Row-wise L2 normalisation. Fails on an all-zero row.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "degenerate embedding: row {i} has norm {n}"
                )));
            }
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        Ok(self.push(out, Op::L2Normalize { x, norms }))
    }

    pub fn row_slice(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice(s![start..end, ..]).to_owned();
        self.push(out, Op::RowSlice { x, start })
    }

    /// Reverse pass seeded with `d(objective)/d(var)` for each seed.
    ///
    /// Only leaf gradients survive in the returned [`Grads`]; intermediate
    /// gradients are consumed as the pass proceeds.
    pub fn backward(&self, seeds: Vec<(Var, Array2<f64>)>) -> Grads {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let Some(top) = seeds.iter().map(|(v, _)| v.0).max() else {
            return Grads { grads };
        };
        for (v, g) in seeds {
            accumulate(&mut grads[v.0], g);
        }
        for i in (0..=top).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = dy.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&dy);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::AddBias(x, b) => {
                    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[b.0], db);
                    accumulate(&mut grads[x.0], dy);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], dy.clone());
                    accumulate(&mut grads[a.0], dy);
                }
                Op::AddTiled(x, p) => {
                    let len = self.value(*p).nrows();
                    let mut dp = Array2::<f64>::zeros((len, dy.ncols()));
                    for chunk in dy.axis_chunks_iter(Axis(0), len) {
                        dp += &chunk;
                    }
                    accumulate(&mut grads[p.0], dp);
                    accumulate(&mut grads[x.0], dy);
                }
                Op::Relu(x) => {
                    let mut dx = dy;
                    dx.zip_mut_with(self.value(*x), |d, &v| {
                        if v <= 0.0 {
                            *d = 0.0
                        }
                    });
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Gelu(x) => {
                    let mut dx = dy;
                    dx.zip_mut_with(self.value(*x), |d, &v| *d *= gelu_grad(v));
                    accumulate(&mut grads[x.0], dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let dgamma = (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &dy * self.value(*gamma);
                    let n = dxhat.ncols() as f64;
                    let mut dx = Array2::<f64>::zeros(dxhat.raw_dim());
                    for r in 0..dxhat.nrows() {
                        let dxr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let mean_d = dxr.sum() / n;
                        let mean_dx = dxr.dot(&xr) / n;
                        let mut out = dx.row_mut(r);
                        for c in 0..dxr.len() {
                            out[c] = rstd[r] * (dxr[c] - mean_d - xr[c] * mean_dx);
                        }
                    }
                    accumulate(&mut grads[gamma.0], dgamma);
                    accumulate(&mut grads[beta.0], dbeta);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let dw = cols.t().dot(&dy);
                    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dcols = dy.dot(&self.value(*w).t());
                    accumulate(&mut grads[w.0], dw);
                    accumulate(&mut grads[b.0], db);
                    accumulate(&mut grads[x.0], col2im(&dcols, geom));
                }
                Op::GlobalAvgPool { x, batch, spatial } => {
                    let mut dx = Array2::<f64>::zeros((batch * spatial, dy.ncols()));
                    let inv = 1.0 / *spatial as f64;
                    for (n, mut chunk) in dx.axis_chunks_iter_mut(Axis(0), *spatial).enumerate() {
                        let row = dy.row(n).mapv(|v| v * inv);
                        chunk += &row;
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Gather { table, ids } => {
                    let mut dt = Array2::<f64>::zeros(self.value(*table).raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = dt.row_mut(id);
                        row += &dy.row(r);
                    }
                    accumulate(&mut grads[table.0], dt);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    layout,
                    probs,
                } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *heads, layout, probs, &dy);
                    accumulate(&mut grads[q.0], dq);
                    accumulate(&mut grads[k.0], dk);
                    accumulate(&mut grads[v.0], dv);
                }
                Op::MaskedMeanPool { x, layout } => {
                    let mut dx = Array2::<f64>::zeros((layout.batch * layout.len, dy.ncols()));
                    for b in 0..layout.batch {
                        let inv = 1.0 / layout.valid_count(b) as f64;
                        for i in 0..layout.len {
                            if layout.valid[b * layout.len + i] {
                                dx.row_mut(b * layout.len + i).assign(&dy.row(b).mapv(|v| v * inv));
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let mut dx = dy;
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let yr = y.row(r);
                        let proj = yr.dot(&row);
                        row.scaled_add(-proj, &yr);
                        row.mapv_inplace(|v| v / norms[r]);
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::RowSlice { x, start } => {
                    let mut dx = Array2::<f64>::zeros(self.value(*x).raw_dim());
                    dx.slice_mut(s![*start..*start + dy.nrows(), ..]).assign(&dy);
                    accumulate(&mut grads[x.0], dx);
                }
            }
        }
        Grads { grads }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &SeqLayout,
        probs: &[f64],
        dy: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let hidden = qv.ncols();
        let dh = hidden / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let len = layout.len;
        let mut dq = Array2::<f64>::zeros(qv.raw_dim());
        let mut dk = Array2::<f64>::zeros(kv.raw_dim());
        let mut dv = Array2::<f64>::zeros(vv.raw_dim());
        let mut dp = vec![0.0; len];
        for b in 0..layout.batch {
            let base = b * len;
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..len {
                    let p = &probs[((b * heads + h) * len + i) * len..][..len];
                    let dout = dy.slice(s![base + i, cols.clone()]);
                    let mut weighted = 0.0;
                    for j in 0..len {
                        if p[j] != 0.0 {
                            dp[j] = dout.dot(&vv.slice(s![base + j, cols.clone()]));
                            weighted += p[j] * dp[j];
                            dv.slice_mut(s![base + j, cols.clone()]).scaled_add(p[j], &dout);
                        }
                    }
                    for j in 0..len {
                        if p[j] != 0.0 {
                            let ds = p[j] * (dp[j] - weighted) * scale;
                            dq.slice_mut(s![base + i, cols.clone()])
                                .scaled_add(ds, &kv.slice(s![base + j, cols.clone()]));
                            dk.slice_mut(s![base + j, cols.clone()])
                                .scaled_add(ds, &qv.slice(s![base + i, cols.clone()]));
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}
