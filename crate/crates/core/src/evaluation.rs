//! Retrieval and attribute-recognition metrics over embedding sets.
//!
//! Rankings sort by descending cosine similarity; ties go to the lower
//! gallery index.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, MetricReport, MetricTask};
use crate::error::{Error, Result};
use crate::imaging::ImageLoader;
use crate::memory::check_unit_rows;
use crate::trainer::TrainState;

const EMB_MAGIC: &[u8; 8] = b"VALPATEM";
pub const EMBEDDING_FORMAT_VERSION: u32 = 1;
const FLAG_CAMERAS: u32 = 1;

/// Unit-norm embeddings with identity and optional camera labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    embeddings: Array2<f64>,
    ids: Vec<i64>,
    camera_ids: Option<Vec<i64>>,
}

impl EmbeddingSet {
    pub fn new(embeddings: Array2<f64>, ids: Vec<i64>, camera_ids: Option<Vec<i64>>) -> Result<Self> {
        let n = embeddings.nrows();
        if ids.len() != n {
            return Err(Error::Shape(format!("{} ids for {n} embeddings", ids.len())));
        }
        if let Some(c) = &camera_ids {
            if c.len() != n {
                return Err(Error::Shape(format!("{} camera ids for {n} embeddings", c.len())));
            }
        }
        check_unit_rows("embedding", embeddings.view())?;
        Ok(Self {
            embeddings,
            ids,
            camera_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn embeddings(&self) -> &Array2<f64> {
        &self.embeddings
    }

    pub fn ids(&self) -> &[i64] {
        &self.ids
    }

    pub fn camera_ids(&self) -> Option<&[i64]> {
        self.camera_ids.as_deref()
    }

    /// `"VALPATEM" | u32 version | u64 N | u64 D | u32 flags | f64 N*D | i64 N | [i64 N]`, little endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.embeddings.len() * 8 + self.ids.len() * 16);
        out.extend_from_slice(EMB_MAGIC);
        out.extend_from_slice(&EMBEDDING_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        let flags = if self.camera_ids.is_some() { FLAG_CAMERAS } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        for v in self.embeddings.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        for c in self.camera_ids.iter().flatten() {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Corrupt(format!("embedding file: {m}"));
        if bytes.len() < 32 || &bytes[..8] != EMB_MAGIC {
            return Err(corrupt("bad magic or truncated header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(8);
        if version != EMBEDDING_FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                supported: EMBEDDING_FORMAT_VERSION,
            });
        }
        let (n, d, flags) = (u64_at(12) as usize, u64_at(20) as usize, u32_at(28));
        if flags & !FLAG_CAMERAS != 0 {
            return Err(corrupt("unknown flags"));
        }
        let cams = flags & FLAG_CAMERAS != 0;
        let expected = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_add(n * if cams { 2 } else { 1 }))
            .and_then(|words| words.checked_mul(8))
            .and_then(|b| b.checked_add(32))
            .ok_or_else(|| corrupt("size overflow"))?;
        if bytes.len() != expected {
            return Err(corrupt(&format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let mut words = bytes[32..].chunks_exact(8);
        let mut next = || words.next().expect("length checked").try_into().expect("8 bytes");
        let emb: Vec<f64> = (0..n * d).map(|_| f64::from_le_bytes(next())).collect();
        let ids: Vec<i64> = (0..n).map(|_| i64::from_le_bytes(next())).collect();
        let camera_ids = cams.then(|| (0..n).map(|_| i64::from_le_bytes(next())).collect());
        let embeddings = Array2::from_shape_vec((n, d), emb).expect("sized above");
        Self::new(embeddings, ids, camera_ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "text" => Ok(Modality::Text),
            other => Err(Error::InvalidInput(format!("unknown modality {other:?} (image|text)"))),
        }
    }
}

/// Query-branch embeddings of every sample, in dataset order.
///
/// Ids default to the sample index when `person_id` is absent; camera ids
/// are kept only when every sample has one.
pub fn embed_dataset(state: &TrainState, ds: &Dataset, modality: Modality, loader: &dyn ImageLoader) -> Result<EmbeddingSet> {
    if ds.is_empty() {
        return Err(Error::InvalidInput("dataset is empty".into()));
    }
    let embeddings = match modality {
        Modality::Image => {
            let prepared = prepare_images(state, ds, loader)?;
            state.embed_images(&prepared)?
        }
        Modality::Text => {
            let ids = ds
                .samples
                .iter()
                .enumerate()
                .map(|(i, s)| match s.caption.as_deref() {
                    Some(c) if s.has_caption() => state.tokenizer.tokenize(c),
                    _ => Err(Error::InvalidInput(format!("sample {i} has no caption to embed"))),
                })
                .collect::<Result<Vec<_>>>()?;
            state.embed_texts(&ids)?
        }
    };
    let ids = ds
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| s.person_id.unwrap_or(i as i64))
        .collect();
    let cams: Option<Vec<i64>> = ds.samples.iter().map(|s| s.camera_id).collect();
    EmbeddingSet::new(embeddings, ids, cams)
}

/// Resized `[0, 1]` images of every sample.
pub fn prepare_images(state: &TrainState, ds: &Dataset, loader: &dyn ImageLoader) -> Result<Vec<crate::imaging::Image>> {
    let (h, w) = (state.config.image_encoder.height, state.config.image_encoder.width);
    (0..ds.len())
        .map(|i| {
            let im = ds.image(i, loader, h, w)?;
            if !im.in_unit_range() {
                return Err(Error::InvalidInput(format!("sample {i} has pixels outside [0, 1]")));
            }
            Ok(im)
        })
        .collect()
}

/// Query-classifier attribute probabilities and the stored labels.
pub fn predict_attributes(state: &TrainState, ds: &Dataset, loader: &dyn ImageLoader) -> Result<(Array2<f64>, Array2<f64>)> {
    let m = state.config.m;
    let mut labels = Array2::zeros((ds.len(), m));
    for (i, s) in ds.samples.iter().enumerate() {
        let a = s
            .attributes
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("sample {i} has no attribute labels")))?;
        if a.len() != m {
            return Err(Error::Shape(format!("sample {i} has {} attributes, model has {m}", a.len())));
        }
        for (j, &v) in a.iter().enumerate() {
            labels[[i, j]] = f64::from(v);
        }
    }
    let images = prepare_images(state, ds, loader)?;
    Ok((state.image_attribute_probs(&images)?, labels))
}

fn check_pair(q: &EmbeddingSet, g: &EmbeddingSet) -> Result<()> {
    if q.dim() != g.dim() {
        return Err(Error::Shape(format!("query dim {} vs gallery dim {}", q.dim(), g.dim())));
    }
    if q.is_empty() || g.is_empty() {
        return Err(Error::InvalidInput("query and gallery must be non-empty".into()));
    }
    Ok(())
}

/// Gallery indices by descending similarity, ties by ascending index.
pub fn rank_gallery(query: ArrayView1<f64>, gallery: ArrayView2<f64>) -> Vec<usize> {
    let sims = gallery.dot(&query);
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order
}

fn average_precision(hits: &[bool]) -> f64 {
    let mut found = 0usize;
    let mut sum = 0.0;
    for (r, &h) in hits.iter().enumerate() {
        if h {
            found += 1;
            sum += found as f64 / (r + 1) as f64;
        }
    }
    sum / found as f64
}

fn cmc_map_with(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    max_rank: usize,
    same_set: bool,
) -> Result<(f64, Vec<f64>)> {
    check_pair(queries, gallery)?;
    if max_rank == 0 {
        return Err(Error::InvalidInput("max_rank must be at least 1".into()));
    }
    let cams = queries.camera_ids().zip(gallery.camera_ids());
    let mut ap_sum = 0.0;
    let mut cmc = vec![0.0; max_rank];
    let mut missing = Vec::new();
    for qi in 0..queries.len() {
        let qid = queries.ids[qi];
        let hits: Vec<bool> = rank_gallery(queries.embeddings.row(qi), gallery.embeddings.view())
            .into_iter()
            .filter(|&gi| {
                let junk = match cams {
                    Some((qc, gc)) => gallery.ids[gi] == qid && gc[gi] == qc[qi],
                    None => false,
                };
                !(junk || (same_set && gi == qi))
            })
            .map(|gi| gallery.ids[gi] == qid)
            .collect();
        let Some(first) = hits.iter().position(|&h| h) else {
            missing.push(qi);
            continue;
        };
        ap_sum += average_precision(&hits);
        for c in cmc.iter_mut().skip(first) {
            *c += 1.0;
        }
    }
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(usize::to_string).collect();
        return Err(Error::InvalidInput(format!(
            "queries without a valid gallery match: {}",
            list.join(",")
        )));
    }
    let n = queries.len() as f64;
    Ok((ap_sum / n, cmc.into_iter().map(|c| c / n).collect()))
}

/// `(mAP, CMC[1..=max_rank])`. With camera ids on both sides, gallery
/// entries sharing the query's id and camera are dropped.
pub fn cmc_map(queries: &EmbeddingSet, gallery: &EmbeddingSet, max_rank: usize) -> Result<(f64, Vec<f64>)> {
    cmc_map_with(queries, gallery, max_rank, false)
}

/// Query set doubles as gallery; each query's own row is excluded.
pub fn cmc_map_leave_one_out(set: &EmbeddingSet, max_rank: usize) -> Result<(f64, Vec<f64>)> {
    cmc_map_with(set, set, max_rank, true)
}

pub fn reid_report(map: f64, cmc: &[f64]) -> Result<MetricReport> {
    let mut values = BTreeMap::new();
    values.insert("mAP".to_string(), map);
    for k in [1usize, 5, 10] {
        if let Some(v) = cmc.get(k - 1) {
            values.insert(format!("rank{k}"), *v);
        }
    }
    MetricReport::new(MetricTask::Reid, values)
}

/// Label-based mA plus instance-based accuracy, precision, recall and F1.
///
/// A prediction is positive when `p > threshold`. An attribute with no
/// positive (or no negative) samples scores 1 for the undefined rate.
pub fn attribute_metrics(pred: ArrayView2<f64>, labels: ArrayView2<f64>, threshold: f64) -> Result<MetricReport> {
    if pred.dim() != labels.dim() {
        return Err(Error::Shape(format!("predictions {:?} vs labels {:?}", pred.dim(), labels.dim())));
    }
    let (n, m) = pred.dim();
    if n == 0 || m == 0 {
        return Err(Error::InvalidInput("empty prediction matrix".into()));
    }
    if pred.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::InvalidInput("probabilities must lie in [0, 1]".into()));
    }
    if labels.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput("labels must be 0 or 1".into()));
    }
    let p = pred.mapv(|v| v > threshold);
    let g = labels.mapv(|v| v == 1.0);

    let mut ma = 0.0;
    for j in 0..m {
        let (mut tp, mut pos, mut tn, mut neg) = (0usize, 0usize, 0usize, 0usize);
        for i in 0..n {
            if g[[i, j]] {
                pos += 1;
                tp += usize::from(p[[i, j]]);
            } else {
                neg += 1;
                tn += usize::from(!p[[i, j]]);
            }
        }
        let tpr = if pos == 0 { 1.0 } else { tp as f64 / pos as f64 };
        let tnr = if neg == 0 { 1.0 } else { tn as f64 / neg as f64 };
        ma += (tpr + tnr) / 2.0;
    }
    ma /= m as f64;

    let (mut acc, mut prec, mut rec) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (mut inter, mut np, mut ng, mut union) = (0usize, 0usize, 0usize, 0usize);
        for j in 0..m {
            let (a, b) = (p[[i, j]], g[[i, j]]);
            inter += usize::from(a && b);
            union += usize::from(a || b);
            np += usize::from(a);
            ng += usize::from(b);
        }
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        if np == 0 && ng == 0 {
            acc += 1.0;
            prec += 1.0;
            rec += 1.0;
        } else {
            acc += ratio(inter, union);
            prec += ratio(inter, np);
            rec += ratio(inter, ng);
        }
    }
    let nf = n as f64;
    let (acc, prec, rec) = (acc / nf, prec / nf, rec / nf);
    let f1 = if prec + rec == 0.0 { 0.0 } else { 2.0 * prec * rec / (prec + rec) };
    let values = BTreeMap::from([
        ("mA".to_string(), ma),
        ("accuracy".to_string(), acc),
        ("precision".to_string(), prec),
        ("recall".to_string(), rec),
        ("f1".to_string(), f1),
    ]);
    MetricReport::new(MetricTask::Attributes, values)
}

/// Fraction of text queries with a same-id image in the top `k`, per `k`.
pub fn topk_text_search(text_queries: &EmbeddingSet, gallery_images: &EmbeddingSet, ks: &[usize]) -> Result<Vec<f64>> {
    check_pair(text_queries, gallery_images)?;
    if ks.iter().any(|&k| k == 0) {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let mut first_hits = Vec::with_capacity(text_queries.len());
    for qi in 0..text_queries.len() {
        let qid = text_queries.ids[qi];
        let first = rank_gallery(text_queries.embeddings.row(qi), gallery_images.embeddings.view())
            .into_iter()
            .position(|gi| gallery_images.ids[gi] == qid)
            .ok_or_else(|| Error::InvalidInput(format!("query {qi} id {qid} is absent from the gallery")))?;
        first_hits.push(first);
    }
    let n = first_hits.len() as f64;
    Ok(ks
        .iter()
        .map(|&k| first_hits.iter().filter(|&&r| r < k).count() as f64 / n)
        .collect())
}

pub fn text_search_report(ks: &[usize], acc: &[f64]) -> Result<MetricReport> {
    let values = ks.iter().zip(acc).map(|(k, v)| (format!("top{k}"), *v)).collect();
    MetricReport::new(MetricTask::TextSearch, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn unit(angles: &[f64]) -> Array2<f64> {
        let mut m = Array2::zeros((angles.len(), 2));
        for (i, a) in angles.iter().enumerate() {
            m[[i, 0]] = a.cos();
            m[[i, 1]] = a.sin();
        }
        m
    }

    #[test]
    fn ap_example_ranks_one_and_three() {
        let q = EmbeddingSet::new(unit(&[0.0]), vec![7], None).unwrap();
        let g = EmbeddingSet::new(unit(&[0.0, 0.1, 0.2, 0.3, 0.4]), vec![7, 1, 7, 2, 3], None).unwrap();
        let (map, cmc) = cmc_map(&q, &g, 5).unwrap();
        assert!((map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(cmc[0], 1.0);
    }

    #[test]
    fn perfect_retrieval() {
        let g = EmbeddingSet::new(unit(&[0.0, 1.0, 2.0]), vec![0, 1, 2], None).unwrap();
        let (map, cmc) = cmc_map(&g, &g, 3).unwrap();
        assert_eq!(map, 1.0);
        assert!(cmc.iter().all(|&c| c == 1.0));
    }

    #[test]
    fn camera_filter_drops_same_camera_matches() {
        let q = EmbeddingSet::new(unit(&[0.0]), vec![1], Some(vec![0])).unwrap();
        let g = EmbeddingSet::new(unit(&[0.0, 0.5, 1.0]), vec![1, 2, 1], Some(vec![0, 0, 1])).unwrap();
        let (map, cmc) = cmc_map(&q, &g, 2).unwrap();
        assert_eq!(map, 0.5);
        assert_eq!(cmc, vec![0.0, 1.0]);
        let lone = EmbeddingSet::new(unit(&[0.0]), vec![1], Some(vec![0])).unwrap();
        let err = cmc_map(&q, &lone, 1).unwrap_err().to_string();
        assert!(err.contains('0'), "{err}");
    }

    #[test]
    fn leave_one_out_excludes_self() {
        let s = EmbeddingSet::new(unit(&[0.0, 0.1, 2.0, 2.1]), vec![0, 0, 1, 1], None).unwrap();
        let (map, _) = cmc_map_leave_one_out(&s, 1).unwrap();
        assert_eq!(map, 1.0);
    }

    #[test]
    fn attribute_set_example() {
        let pred = array![[0.1, 0.9, 0.8, 0.2]];
        let labels = array![[1.0, 1.0, 0.0, 0.0]];
        let r = attribute_metrics(pred.view(), labels.view(), 0.5).unwrap();
        assert!((r.get("accuracy").unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.get("precision"), Some(0.5));
        assert_eq!(r.get("recall"), Some(0.5));
        assert_eq!(r.get("f1"), Some(0.5));
        let perfect = attribute_metrics(labels.view(), labels.view(), 0.5).unwrap();
        assert!(perfect.values.values().all(|&v| v == 1.0));
    }

    #[test]
    fn topk_example() {
        let q = EmbeddingSet::new(unit(&[0.0, 3.0]), vec![0, 1], None).unwrap();
        // Query 0 finds id 0 at rank 2; query 1 finds id 1 at rank 7.
        let gal_angles = [0.0, 0.05, 3.0, 3.01, 3.02, 3.03, 3.04, 3.05, 0.5];
        let gal_ids = vec![9, 0, 2, 3, 4, 5, 6, 7, 1];
        let g = EmbeddingSet::new(unit(&gal_angles), gal_ids, None).unwrap();
        let acc = topk_text_search(&q, &g, &[1, 5, 10]).unwrap();
        assert_eq!(acc, vec![0.0, 0.5, 1.0]);
        let bad = EmbeddingSet::new(unit(&[0.0]), vec![42], None).unwrap();
        assert!(topk_text_search(&bad, &g, &[1]).is_err());
    }

    #[test]
    fn embedding_file_round_trip() {
        let s = EmbeddingSet::new(unit(&[0.0, 1.0]), vec![3, -4], Some(vec![1, 2])).unwrap();
        assert_eq!(EmbeddingSet::from_bytes(&s.to_bytes()).unwrap(), s);
        let mut bytes = s.to_bytes();
        bytes[8] = 9;
        assert!(matches!(EmbeddingSet::from_bytes(&bytes), Err(Error::Version { found: 9, .. })));
        assert!(EmbeddingSet::from_bytes(&s.to_bytes()[..40]).is_err());
        assert!(EmbeddingSet::new(array![[2.0, 0.0]], vec![0], None).is_err());
    }
}
