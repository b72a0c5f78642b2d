//! Brute-force oracles. Each is written from the metric or loss definition
//! with plain loops and no calls into the library under test.
#![allow(dead_code)]

use std::collections::{HashMap, HashSet, VecDeque};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Mat {
    (0..n).map(|_| unit_vec(rng, d)).collect()
}

pub fn to_array(m: &Mat) -> ndarray::Array2<f64> {
    let d = m.first().map_or(0, Vec::len);
    ndarray::Array2::from_shape_fn((m.len(), d), |(i, j)| m[i][j])
}

/// Mean over rows of the (K+1)-way softmax cross-entropy with the positive
/// at index 0, computed without any log-sum-exp stabilisation.
pub fn softmax_ce(q: &Mat, pos: &Mat, negs: &Mat, t: f64) -> f64 {
    let mut total = 0.0;
    for (qi, ki) in q.iter().zip(pos) {
        let l0 = (dot(qi, ki) / t).exp();
        let denom: f64 = l0 + negs.iter().map(|n| (dot(qi, n) / t).exp()).sum::<f64>();
        total += -(l0 / denom).ln();
    }
    total / q.len() as f64
}

/// Batch mean of `Σ_j -w_j [t log p + (1 - t) log(1 - p)]`.
pub fn bce(p: &Mat, t: &Mat, w: &[f64]) -> f64 {
    let mut total = 0.0;
    for (pr, tr) in p.iter().zip(t) {
        for j in 0..w.len() {
            total += -w[j] * (tr[j] * pr[j].ln() + (1.0 - tr[j]) * (1.0 - pr[j]).ln());
        }
    }
    total / p.len() as f64
}

/// Ranks of `items` by descending score, ties by ascending index, computed
/// by counting how many items precede each one.
pub fn ranks_by_counting(scores: &[(usize, f64)]) -> Vec<(usize, usize)> {
    scores
        .iter()
        .map(|&(i, s)| {
            let before = scores
                .iter()
                .filter(|&&(j, t)| t > s || (t == s && j < i))
                .count();
            (i, before)
        })
        .collect()
}

/// `(mAP, CMC)` or `Err(queries without a valid match)`.
pub fn cmc_map_oracle(
    q: &Mat,
    q_ids: &[i64],
    q_cams: Option<&[i64]>,
    g: &Mat,
    g_ids: &[i64],
    g_cams: Option<&[i64]>,
    max_rank: usize,
    same_set: bool,
) -> Result<(f64, Vec<f64>), Vec<usize>> {
    let mut ap_sum = 0.0;
    let mut cmc = vec![0.0; max_rank];
    let mut missing = Vec::new();
    for qi in 0..q.len() {
        let valid: Vec<(usize, f64)> = (0..g.len())
            .filter(|&gi| !(same_set && gi == qi))
            .filter(|&gi| match (q_cams, g_cams) {
                (Some(qc), Some(gc)) => !(g_ids[gi] == q_ids[qi] && gc[gi] == qc[qi]),
                _ => true,
            })
            .map(|gi| (gi, dot(&q[qi], &g[gi])))
            .collect();
        let mut rel_ranks: Vec<usize> = ranks_by_counting(&valid)
            .into_iter()
            .filter(|&(gi, _)| g_ids[gi] == q_ids[qi])
            .map(|(_, r)| r + 1)
            .collect();
        rel_ranks.sort_unstable();
        if rel_ranks.is_empty() {
            missing.push(qi);
            continue;
        }
        let ap: f64 = rel_ranks
            .iter()
            .enumerate()
            .map(|(n, &r)| (n + 1) as f64 / r as f64)
            .sum::<f64>()
            / rel_ranks.len() as f64;
        ap_sum += ap;
        for (k, c) in cmc.iter_mut().enumerate() {
            if rel_ranks[0] <= k + 1 {
                *c += 1.0;
            }
        }
    }
    if !missing.is_empty() {
        return Err(missing);
    }
    let n = q.len() as f64;
    Ok((ap_sum / n, cmc.into_iter().map(|c| c / n).collect()))
}

/// `[mA, accuracy, precision, recall, f1]` from set definitions.
pub fn attribute_oracle(pred: &Mat, labels: &Mat, threshold: f64) -> [f64; 5] {
    let n = pred.len();
    let m = pred[0].len();
    let mut ma = 0.0;
    for j in 0..m {
        let pos: Vec<usize> = (0..n).filter(|&i| labels[i][j] == 1.0).collect();
        let neg: Vec<usize> = (0..n).filter(|&i| labels[i][j] == 0.0).collect();
        let tpr = if pos.is_empty() {
            1.0
        } else {
            pos.iter().filter(|&&i| pred[i][j] > threshold).count() as f64 / pos.len() as f64
        };
        let tnr = if neg.is_empty() {
            1.0
        } else {
            neg.iter().filter(|&&i| pred[i][j] <= threshold).count() as f64 / neg.len() as f64
        };
        ma += (tpr + tnr) / 2.0;
    }
    let (mut acc, mut prec, mut rec) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let p: HashSet<usize> = (0..m).filter(|&j| pred[i][j] > threshold).collect();
        let g: HashSet<usize> = (0..m).filter(|&j| labels[i][j] == 1.0).collect();
        let inter = p.intersection(&g).count() as f64;
        let union = p.union(&g).count() as f64;
        match (p.is_empty(), g.is_empty()) {
            (true, true) => {
                acc += 1.0;
                prec += 1.0;
                rec += 1.0;
            }
            (pe, ge) => {
                acc += inter / union;
                prec += if pe { 0.0 } else { inter / p.len() as f64 };
                rec += if ge { 0.0 } else { inter / g.len() as f64 };
            }
        }
    }
    let nf = n as f64;
    let (acc, prec, rec) = (acc / nf, prec / nf, rec / nf);
    let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
    [ma / m as f64, acc, prec, rec, f1]
}

pub fn topk_oracle(q: &Mat, q_ids: &[i64], g: &Mat, g_ids: &[i64], ks: &[usize]) -> Vec<f64> {
    let first: Vec<usize> = (0..q.len())
        .map(|qi| {
            let scored: Vec<(usize, f64)> = (0..g.len()).map(|gi| (gi, dot(&q[qi], &g[gi]))).collect();
            ranks_by_counting(&scored)
                .into_iter()
                .filter(|&(gi, _)| g_ids[gi] == q_ids[qi])
                .map(|(_, r)| r)
                .min()
                .expect("query id present in gallery")
        })
        .collect();
    ks.iter()
        .map(|&k| first.iter().filter(|&&r| r < k).count() as f64 / q.len() as f64)
        .collect()
}

/// Bounded FIFO replay: push back, evict from the front past `capacity`.
pub struct FifoOracle {
    pub capacity: usize,
    pub rows: VecDeque<(Vec<f64>, i64)>,
}

impl FifoOracle {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            rows: VecDeque::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>, id: i64) {
        self.rows.push_back((row, id));
        while self.rows.len() > self.capacity {
            self.rows.pop_front();
        }
    }
}

/// Top-`m` tokens by occurrence count, ties alphabetical.
pub fn vocab_oracle(token_lists: &[Vec<&str>], attribute_words: &HashSet<&str>, m: usize) -> Vec<(String, u64)> {
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for toks in token_lists {
        for t in toks {
            if attribute_words.contains(t) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut v: Vec<(String, u64)> = counts.into_iter().map(|(t, c)| (t.to_string(), c)).collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.truncate(m);
    v
}

/// `||a - n|| / max(||a||, ||n||, 1e-8)` over flattened tensors.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

/// Central differences of `f` at every coordinate of `x`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xs[i];
            xs[i] = orig + h;
            let up = f(&xs);
            xs[i] = orig - h;
            let down = f(&xs);
            xs[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
