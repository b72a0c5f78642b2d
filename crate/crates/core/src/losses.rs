//! Pre-training objectives and their analytic gradients.
//!
//! * instance-level contrast of two augmented views against a key queue,
//! * bidirectional image↔text contrast with a learnable temperature,
//! * weighted multi-attribute BCE with hard mined labels or with
//!   cross-modal soft labels from the momentum classifier,
//! * the weighted combination of all of the above.
//!
//! Every loss is the batch mean of its per-sample value. Gradients are
//! returned alongside the value so the trainer can seed the encoder tape
//! directly; keys, negatives and soft labels are treated as constants.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::EncoderPair;
use crate::error::{Error, Result};
use crate::memory::check_unit_rows;
use crate::params::{uniform, ParamSet};

pub const TAU_PRIME_MIN: f64 = 0.01;
pub const TAU_PRIME_MAX: f64 = 0.5;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Share of the soft-label term inside the attribute objective.
    pub alpha: f64,
    /// Weight of the image-text contrastive pair.
    pub beta: f64,
    /// Weight of the attribute objective.
    pub gamma: f64,
    /// Fixed temperature of the instance-level contrast.
    pub tau: f64,
    /// Current value of the learnable image-text temperature.
    pub tau_prime: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.5,
            gamma: 0.01,
            tau: 0.07,
            tau_prime: 0.07,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.beta >= 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::Config("beta and gamma must be non-negative".into()));
        }
        if !(self.tau > 0.0) || !(self.tau_prime > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        Ok(())
    }
}

pub fn clamp_tau_prime(t: f64) -> f64 {
    t.clamp(TAU_PRIME_MIN, TAU_PRIME_MAX)
}

/// Value and gradients of one InfoNCE term.
#[derive(Debug, Clone)]
pub struct ContrastiveTerm {
    pub loss: f64,
    /// d loss / d query, same shape as the query batch.
    pub grad_query: Array2<f64>,
    /// d loss / d temperature.
    pub grad_temperature: f64,
    /// Rows whose positive logit beats every negative logit.
    pub correct: usize,
}

/// Mean over rows of `-log softmax([q·k, q·n_1, .., q·n_K] / T)[0]`.
///
/// No unit-norm checks; see [`ssl_contrastive`] and [`itc_terms`] for the
/// validated entry points.
pub fn info_nce(
    query: ArrayView2<f64>,
    positive: ArrayView2<f64>,
    negatives: ArrayView2<f64>,
    temperature: f64,
) -> Result<ContrastiveTerm> {
    info_nce_masked(query, positive, negatives, None, temperature)
}

/// Builds a `B x K` mask that drops negatives sharing the query's instance.
/// Negative ids below zero are never dropped.
pub fn same_instance_mask(query_ids: &[i64], negative_ids: &[i64]) -> Array2<bool> {
    Array2::from_shape_fn((query_ids.len(), negative_ids.len()), |(i, j)| {
        negative_ids[j] < 0 || negative_ids[j] != query_ids[i]
    })
}

/// [`info_nce`] where `keep[[i, j]] == false` removes negative `j` from row `i`.
/// A row left with no negatives contributes zero loss and counts as correct.
pub fn info_nce_masked(
    query: ArrayView2<f64>,
    positive: ArrayView2<f64>,
    negatives: ArrayView2<f64>,
    keep: Option<ArrayView2<bool>>,
    temperature: f64,
) -> Result<ContrastiveTerm> {
    let (b, d) = query.dim();
    if b == 0 {
        return Err(Error::InvalidInput("empty query batch".into()));
    }
    if positive.dim() != (b, d) {
        return Err(Error::Shape(format!(
            "positives {:?} do not match queries {:?}",
            positive.dim(),
            (b, d)
        )));
    }
    if negatives.nrows() == 0 {
        return Err(Error::InvalidInput("at least one negative is required".into()));
    }
    if negatives.ncols() != d {
        return Err(Error::Shape(format!(
            "negatives are {}-d, queries are {d}-d",
            negatives.ncols()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidInput(format!("temperature {temperature} must be positive")));
    }
    if let Some(k) = keep {
        if k.dim() != (b, negatives.nrows()) {
            return Err(Error::Shape(format!(
                "mask {:?} does not match {b} queries x {} negatives",
                k.dim(),
                negatives.nrows()
            )));
        }
    }
    let kept = |i: usize, j: usize| keep.map_or(true, |k| k[[i, j]]);

    let inv_t = 1.0 / temperature;
    let neg_logits = query.dot(&negatives.t()) * inv_t;
    let mut coeff_neg = Array2::<f64>::zeros(neg_logits.raw_dim());
    let mut coeff_pos = vec![0.0; b];
    let mut loss = 0.0;
    let mut grad_t = 0.0;
    let mut correct = 0;
    for i in 0..b {
        let pos = query.row(i).dot(&positive.row(i)) * inv_t;
        let negs = neg_logits.row(i);
        let live = || negs.iter().enumerate().filter(|&(j, _)| kept(i, j)).map(|(_, &l)| l);
        let max_neg = live().fold(f64::NEG_INFINITY, f64::max);
        if pos > max_neg {
            correct += 1;
        }
        let max = pos.max(max_neg);
        let sum = (pos - max).exp() + live().map(|l| (l - max).exp()).sum::<f64>();
        let lse = max + sum.ln();
        loss += lse - pos;

        // d/dl_j of (lse - l_0) is p_j - [j == 0]; l_j = s_j / T.
        let p0 = (pos - lse).exp();
        coeff_pos[i] = p0 - 1.0;
        grad_t -= (p0 - 1.0) * pos * inv_t;
        for (j, &l) in negs.iter().enumerate() {
            if !kept(i, j) {
                continue;
            }
            let pj = (l - lse).exp();
            coeff_neg[[i, j]] = pj;
            grad_t -= pj * l * inv_t;
        }
    }
    let scale = inv_t / b as f64;
    let mut grad_query = coeff_neg.dot(&negatives);
    for (i, mut row) in grad_query.rows_mut().into_iter().enumerate() {
        row.scaled_add(coeff_pos[i], &positive.row(i));
        row.mapv_inplace(|v| v * scale);
    }
    Ok(ContrastiveTerm {
        loss: loss / b as f64,
        grad_query,
        grad_temperature: grad_t / b as f64,
        correct,
    })
}

/// Instance-level contrast of query views against momentum keys and the queue.
pub fn ssl_contrastive(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    negatives: ArrayView2<f64>,
    tau: f64,
) -> Result<ContrastiveTerm> {
    check_unit_rows("query", q)?;
    check_unit_rows("key", k)?;
    check_unit_rows("negative", negatives)?;
    info_nce(q, k, negatives, tau)
}

/// [`ssl_contrastive`] with a per-row negative mask.
pub fn ssl_contrastive_masked(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    negatives: ArrayView2<f64>,
    keep: Option<ArrayView2<bool>>,
    tau: f64,
) -> Result<ContrastiveTerm> {
    check_unit_rows("query", q)?;
    check_unit_rows("key", k)?;
    check_unit_rows("negative", negatives)?;
    info_nce_masked(q, k, negatives, keep, tau)
}

pub fn ssl_contrastive_loss(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    negatives: ArrayView2<f64>,
    tau: f64,
) -> Result<f64> {
    Ok(ssl_contrastive(q, k, negatives, tau)?.loss)
}

/// Image→text and text→image terms sharing the learnable temperature.
#[derive(Debug, Clone)]
pub struct ItcTerms {
    pub i2t: ContrastiveTerm,
    pub t2i: ContrastiveTerm,
}

#[allow(clippy::too_many_arguments)]
pub fn itc_terms(
    q_img: ArrayView2<f64>,
    k_txt: ArrayView2<f64>,
    q_txt: ArrayView2<f64>,
    k_img: ArrayView2<f64>,
    neg_txt: ArrayView2<f64>,
    neg_img: ArrayView2<f64>,
    tau_prime: f64,
) -> Result<ItcTerms> {
    itc_terms_masked(q_img, k_txt, q_txt, k_img, neg_txt, neg_img, None, None, tau_prime)
}

/// [`itc_terms`] with per-row masks over the text and image negatives.
#[allow(clippy::too_many_arguments)]
pub fn itc_terms_masked(
    q_img: ArrayView2<f64>,
    k_txt: ArrayView2<f64>,
    q_txt: ArrayView2<f64>,
    k_img: ArrayView2<f64>,
    neg_txt: ArrayView2<f64>,
    neg_img: ArrayView2<f64>,
    keep_txt: Option<ArrayView2<bool>>,
    keep_img: Option<ArrayView2<bool>>,
    tau_prime: f64,
) -> Result<ItcTerms> {
    for (name, m) in [
        ("image query", q_img),
        ("text key", k_txt),
        ("text query", q_txt),
        ("image key", k_img),
        ("text negative", neg_txt),
        ("image negative", neg_img),
    ] {
        check_unit_rows(name, m)?;
    }
    Ok(ItcTerms {
        i2t: info_nce_masked(q_img, k_txt, neg_txt, keep_txt, tau_prime)?,
        t2i: info_nce_masked(q_txt, k_img, neg_img, keep_img, tau_prime)?,
    })
}

/// `(l_i2t, l_t2i)`.
#[allow(clippy::too_many_arguments)]
pub fn itc_loss(
    q_img: ArrayView2<f64>,
    k_txt: ArrayView2<f64>,
    q_txt: ArrayView2<f64>,
    k_img: ArrayView2<f64>,
    neg_txt: ArrayView2<f64>,
    neg_img: ArrayView2<f64>,
    tau_prime: f64,
) -> Result<(f64, f64)> {
    let t = itc_terms(q_img, k_txt, q_txt, k_img, neg_txt, neg_img, tau_prime)?;
    Ok((t.i2t.loss, t.t2i.loss))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Query,
    Key,
}

/// Sigmoid attribute classifier `σ(W e + z)` with a momentum copy.
///
/// `weight` is `[M, D]`, `bias` is `[1, M]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeClassifier {
    pub pair: EncoderPair,
}

impl AttributeClassifier {
    pub fn new(num_attributes: usize, dim: usize, momentum: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut p = ParamSet::new();
        let bound = 1.0 / (dim as f64).sqrt();
        p.push("weight", uniform(rng, num_attributes, dim, bound), true);
        p.push("bias", Array2::zeros((1, num_attributes)), false);
        Ok(Self {
            pair: EncoderPair::new(p, momentum)?,
        })
    }

    pub fn from_matrices(weight: Array2<f64>, bias: Array2<f64>, momentum: f64) -> Result<Self> {
        if bias.dim() != (1, weight.nrows()) {
            return Err(Error::Shape(format!(
                "bias {:?} does not match {} attributes",
                bias.dim(),
                weight.nrows()
            )));
        }
        let mut p = ParamSet::new();
        p.push("weight", weight, true);
        p.push("bias", bias, false);
        Ok(Self {
            pair: EncoderPair::new(p, momentum)?,
        })
    }

    pub fn num_attributes(&self) -> usize {
        self.w_q().nrows()
    }

    pub fn dim(&self) -> usize {
        self.w_q().ncols()
    }

    pub fn w_q(&self) -> &Array2<f64> {
        self.pair.query.get("weight").expect("classifier weight")
    }

    pub fn z_q(&self) -> &Array2<f64> {
        self.pair.query.get("bias").expect("classifier bias")
    }

    pub fn w_k(&self) -> &Array2<f64> {
        self.pair.key.get("weight").expect("classifier weight")
    }

    pub fn z_k(&self) -> &Array2<f64> {
        self.pair.key.get("bias").expect("classifier bias")
    }

    pub fn momentum_update(&mut self) -> Result<()> {
        self.pair.momentum_update()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn affine_sigmoid(weight: &Array2<f64>, bias: &Array2<f64>, emb: ArrayView2<f64>) -> Result<Array2<f64>> {
    if emb.ncols() != weight.ncols() {
        return Err(Error::Shape(format!(
            "classifier expects {}-d embeddings, got {}",
            weight.ncols(),
            emb.ncols()
        )));
    }
    if emb.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite embedding".into()));
    }
    Ok((emb.dot(&weight.t()) + bias).mapv(sigmoid))
}

/// Per-attribute probabilities from the query or momentum branch.
pub fn attribute_logits(clf: &AttributeClassifier, emb: ArrayView2<f64>, which: Branch) -> Result<Array2<f64>> {
    match which {
        Branch::Query => affine_sigmoid(clf.w_q(), clf.z_q(), emb),
        Branch::Key => affine_sigmoid(clf.w_k(), clf.z_k(), emb),
    }
}

fn check_probs(what: &str, p: ArrayView2<f64>) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidInput(format!("{what} value {v} outside [0, 1]")));
    }
    Ok(())
}

fn check_mac_shapes(ps: &[(&str, ArrayView2<f64>)], w: &[f64]) -> Result<()> {
    let dim = ps[0].1.dim();
    for (name, p) in ps {
        if p.dim() != dim {
            return Err(Error::Shape(format!("{name} is {:?}, expected {dim:?}", p.dim())));
        }
        check_probs(name, *p)?;
    }
    if dim.1 != w.len() {
        return Err(Error::Shape(format!(
            "{} attribute weights for {} attributes",
            w.len(),
            dim.1
        )));
    }
    if dim.0 == 0 {
        return Err(Error::InvalidInput("empty attribute batch".into()));
    }
    if let Some(v) = w.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::InvalidInput(format!("attribute weight {v} must be positive")));
    }
    Ok(())
}

/// Batch mean of `-Σ_j w_j [t log p + (1 - t) log(1 - p)]` with clamped `p`.
fn weighted_bce(p: ArrayView2<f64>, target: ArrayView2<f64>, w: &[f64]) -> f64 {
    let mut total = 0.0;
    for (pr, tr) in p.rows().into_iter().zip(target.rows()) {
        for ((&pv, &tv), &wj) in pr.iter().zip(tr.iter()).zip(w) {
            let pc = pv.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total -= wj * (tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln());
        }
    }
    total / p.nrows() as f64
}

/// Hard-label attribute loss over both modalities.
pub fn mac_hard_loss(p_img: ArrayView2<f64>, p_txt: ArrayView2<f64>, y: ArrayView2<f64>, w: &[f64]) -> Result<f64> {
    check_mac_shapes(&[("image probabilities", p_img), ("text probabilities", p_txt), ("labels", y)], w)?;
    if let Some(v) = y.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::InvalidInput(format!("hard label {v} is not 0 or 1")));
    }
    Ok(weighted_bce(p_img, y, w) + weighted_bce(p_txt, y, w))
}

/// Soft-label attribute loss: text soft labels supervise image predictions
/// and image soft labels supervise text predictions.
pub fn mac_soft_loss(
    p_img: ArrayView2<f64>,
    p_txt: ArrayView2<f64>,
    yhat_img: ArrayView2<f64>,
    yhat_txt: ArrayView2<f64>,
    w: &[f64],
) -> Result<f64> {
    check_mac_shapes(
        &[
            ("image probabilities", p_img),
            ("text probabilities", p_txt),
            ("image soft labels", yhat_img),
            ("text soft labels", yhat_txt),
        ],
        w,
    )?;
    Ok(weighted_bce(p_img, yhat_txt, w) + weighted_bce(p_txt, yhat_img, w))
}

/// Attribute loss value with gradients w.r.t. classifier and embeddings.
#[derive(Debug, Clone)]
pub struct MacTerm {
    pub loss: f64,
    pub grad_weight: Array2<f64>,
    pub grad_bias: Array2<f64>,
    pub grad_emb_img: Array2<f64>,
    pub grad_emb_txt: Array2<f64>,
}

/// `BCE(σ(W e_img + z), t_img) + BCE(σ(W e_txt + z), t_txt)` through the
/// query classifier.
///
/// The gradient uses `d/da BCE(σ(a), t) = p - t`, which is exact whenever
/// the probability clamp is inactive.
pub fn mac_term(
    weight: &Array2<f64>,
    bias: &Array2<f64>,
    emb_img: ArrayView2<f64>,
    emb_txt: ArrayView2<f64>,
    target_img: ArrayView2<f64>,
    target_txt: ArrayView2<f64>,
    w: &[f64],
) -> Result<MacTerm> {
    let p_img = affine_sigmoid(weight, bias, emb_img)?;
    let p_txt = affine_sigmoid(weight, bias, emb_txt)?;
    check_mac_shapes(
        &[
            ("image probabilities", p_img.view()),
            ("text probabilities", p_txt.view()),
            ("image targets", target_img),
            ("text targets", target_txt),
        ],
        w,
    )?;
    let b = p_img.nrows() as f64;
    let loss = weighted_bce(p_img.view(), target_img, w) + weighted_bce(p_txt.view(), target_txt, w);
    let wrow = ndarray::Array1::from(w.to_vec());
    let d_img = (&p_img - &target_img) * &wrow / b;
    let d_txt = (&p_txt - &target_txt) * &wrow / b;
    let grad_weight = d_img.t().dot(&emb_img) + d_txt.t().dot(&emb_txt);
    let grad_bias = (d_img.sum_axis(Axis(0)) + d_txt.sum_axis(Axis(0))).insert_axis(Axis(0));
    Ok(MacTerm {
        loss,
        grad_weight,
        grad_bias,
        grad_emb_img: d_img.dot(weight),
        grad_emb_txt: d_txt.dot(weight),
    })
}

/// Which objectives participate in the combined loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossToggles {
    pub ssl: bool,
    pub itc: bool,
    pub mac: bool,
    /// With `mac` on but `mac_soft` off the attribute term is hard-only.
    pub mac_soft: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            ssl: true,
            itc: true,
            mac: true,
            mac_soft: true,
        }
    }
}

impl LossToggles {
    pub fn ssl_only() -> Self {
        Self {
            ssl: true,
            itc: false,
            mac: false,
            mac_soft: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ssl || self.itc || self.mac) {
            return Err(Error::Config("all objectives are disabled".into()));
        }
        Ok(())
    }

    pub fn soft_enabled(&self) -> bool {
        self.mac && self.mac_soft
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub l_ssl: f64,
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub l_mac_hard: f64,
    pub l_mac_soft: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ssl: f64,
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub l_mac_hard: f64,
    pub l_mac_soft: f64,
    pub total: f64,
}

/// Multipliers of each component in the total; disabled components get 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCoefficients {
    pub ssl: f64,
    pub itc: f64,
    pub mac_hard: f64,
    pub mac_soft: f64,
}

pub fn loss_coefficients(lw: &LossWeights, toggles: &LossToggles) -> LossCoefficients {
    let alpha = if toggles.mac_soft { lw.alpha } else { 0.0 };
    LossCoefficients {
        ssl: if toggles.ssl { 1.0 } else { 0.0 },
        itc: if toggles.itc { lw.beta } else { 0.0 },
        mac_hard: if toggles.mac { lw.gamma * (1.0 - alpha) } else { 0.0 },
        mac_soft: if toggles.soft_enabled() { lw.gamma * alpha } else { 0.0 },
    }
}

/// `L_I + β(L_I2T + L_T2I) + γ((1−α)L_A^H + αL_A^S)`; disabled parts are 0.
pub fn total_loss(parts: &LossParts, lw: &LossWeights, toggles: &LossToggles) -> Result<LossBreakdown> {
    toggles.validate()?;
    let pick = |on: bool, v: f64| if on { v } else { 0.0 };
    let out = LossBreakdown {
        l_ssl: pick(toggles.ssl, parts.l_ssl),
        l_i2t: pick(toggles.itc, parts.l_i2t),
        l_t2i: pick(toggles.itc, parts.l_t2i),
        l_mac_hard: pick(toggles.mac, parts.l_mac_hard),
        l_mac_soft: pick(toggles.soft_enabled(), parts.l_mac_soft),
        total: 0.0,
    };
    for (name, v) in [
        ("l_ssl", out.l_ssl),
        ("l_i2t", out.l_i2t),
        ("l_t2i", out.l_t2i),
        ("l_mac_hard", out.l_mac_hard),
        ("l_mac_soft", out.l_mac_soft),
    ] {
        if !v.is_finite() {
            return Err(Error::InvalidInput(format!("{name} is not finite")));
        }
    }
    let alpha = if toggles.mac_soft { lw.alpha } else { 0.0 };
    let ssl = out.l_ssl;
    let itc = if toggles.itc { lw.beta * (out.l_i2t + out.l_t2i) } else { 0.0 };
    let mac = if toggles.mac {
        lw.gamma * ((1.0 - alpha) * out.l_mac_hard + alpha * out.l_mac_soft)
    } else {
        0.0
    };
    Ok(LossBreakdown {
        total: ssl + itc + mac,
        ..out
    })
}
