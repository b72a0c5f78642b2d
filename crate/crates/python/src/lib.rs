//! Python bindings. Matrices cross the boundary as lists of row lists.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use valpat::data::{Dataset, MetricReport};
use valpat::evaluation::{self, Modality};
use valpat::imaging::FileImageLoader;
use valpat::losses::{self, LossParts, LossToggles, LossWeights};
use valpat::memory;
use valpat::mining::{self, TaggerLexicon};
use valpat::trainer::{self, PreparedSample};

create_exception!(valpat_py, ValpatError, PyException);

fn err(e: valpat::Error) -> PyErr {
    ValpatError::new_err(format!("{}: {e}", e.kind()))
}

fn matrix(rows: Vec<Vec<f64>>, what: &str) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(ValpatError::new_err(format!("shape: {what} rows have unequal lengths")));
    }
    Ok(Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect()).expect("checked shape"))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn report_dict<'py>(py: Python<'py>, r: &MetricReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    for (k, v) in &r.values {
        d.set_item(k, v)?;
    }
    Ok(d)
}

#[pyclass(name = "TrainConfig", module = "valpat_py", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: trainer::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[staticmethod]
    fn desk() -> Self {
        Self {
            inner: trainer::TrainConfig::desk(),
        }
    }

    #[staticmethod]
    fn paper() -> Self {
        Self {
            inner: trainer::TrainConfig::default(),
        }
    }

    #[staticmethod]
    fn from_config_str(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: trainer::TrainConfig::from_config_str(text).map_err(err)?,
        })
    }

    fn to_config_str(&self) -> String {
        self.inner.to_config_string()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }
    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }
    #[setter]
    fn set_epochs(&mut self, v: usize) {
        self.inner.epochs = v;
    }
    #[getter]
    fn base_lr(&self) -> f64 {
        self.inner.base_lr
    }
    #[setter]
    fn set_base_lr(&mut self, v: f64) {
        self.inner.base_lr = v;
    }

    /// Sets the loss toggles; all-off is rejected at training time.
    #[pyo3(signature = (ssl=true, itc=true, mac=true, mac_soft=true))]
    fn set_toggles(&mut self, ssl: bool, itc: bool, mac: bool, mac_soft: bool) {
        self.inner.toggles = LossToggles { ssl, itc, mac, mac_soft };
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig(hash={})", &self.inner.hash()[..12])
    }
}

#[pyclass(name = "NegativeQueue", module = "valpat_py")]
struct PyNegativeQueue {
    inner: memory::NegativeQueue,
}

#[pymethods]
impl PyNegativeQueue {
    #[new]
    fn new(capacity: usize, dim: usize) -> PyResult<Self> {
        Ok(Self {
            inner: memory::NegativeQueue::new(capacity, dim).map_err(err)?,
        })
    }

    fn enqueue(&mut self, batch: Vec<Vec<f64>>) -> PyResult<()> {
        let b = matrix(batch, "batch")?;
        self.inner.enqueue(b.view()).map_err(err)
    }

    /// Valid rows, oldest first.
    fn snapshot(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.snapshot())
    }

    #[getter]
    fn filled(&self) -> usize {
        self.inner.filled()
    }

    #[getter]
    fn write_ptr(&self) -> usize {
        self.inner.write_ptr()
    }

    fn __len__(&self) -> usize {
        self.inner.filled()
    }
}

#[pyclass(name = "EmbeddingSet", module = "valpat_py")]
struct PyEmbeddingSet {
    inner: evaluation::EmbeddingSet,
}

#[pymethods]
impl PyEmbeddingSet {
    #[new]
    #[pyo3(signature = (embeddings, ids, camera_ids=None))]
    fn new(embeddings: Vec<Vec<f64>>, ids: Vec<i64>, camera_ids: Option<Vec<i64>>) -> PyResult<Self> {
        let e = matrix(embeddings, "embeddings")?;
        Ok(Self {
            inner: evaluation::EmbeddingSet::new(e, ids, camera_ids).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: evaluation::EmbeddingSet::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn embeddings(&self) -> Vec<Vec<f64>> {
        rows(self.inner.embeddings())
    }

    fn ids(&self) -> Vec<i64> {
        self.inner.ids().to_vec()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Training state plus the prepared dataset it trains on.
#[pyclass(name = "Trainer", module = "valpat_py")]
struct PyTrainer {
    state: trainer::TrainState,
    dataset: Dataset,
    data: Vec<PreparedSample>,
}

#[pymethods]
impl PyTrainer {
    /// Without `manifest`, trains on the built-in 32-card synthetic set.
    #[new]
    #[pyo3(signature = (config, manifest=None, vocab=None))]
    fn new(config: PyTrainConfig, manifest: Option<PathBuf>, vocab: Option<PathBuf>) -> PyResult<Self> {
        let cfg = config.inner;
        cfg.validate().map_err(err)?;
        let (dataset, tok) =
            valpat::cli::pretrain_inputs(manifest.as_deref(), vocab.as_deref(), &cfg).map_err(err)?;
        let state = trainer::TrainState::new(cfg.clone(), tok, dataset.vocabulary.clone()).map_err(err)?;
        let data = trainer::prepare_dataset(&dataset, &cfg, &state.tokenizer, &FileImageLoader).map_err(err)?;
        Ok(Self { state, dataset, data })
    }

    /// Continues a checkpoint on the same data it was trained on.
    #[staticmethod]
    #[pyo3(signature = (path, manifest=None, vocab=None))]
    fn from_checkpoint(path: PathBuf, manifest: Option<PathBuf>, vocab: Option<PathBuf>) -> PyResult<Self> {
        let state = trainer::load_checkpoint(&path).map_err(err)?;
        let (dataset, _) =
            valpat::cli::pretrain_inputs(manifest.as_deref(), vocab.as_deref(), &state.config).map_err(err)?;
        let data =
            trainer::prepare_dataset(&dataset, &state.config, &state.tokenizer, &FileImageLoader).map_err(err)?;
        Ok(Self { state, dataset, data })
    }

    /// Trains to `until_step` (default: end of schedule); one dict per step.
    #[pyo3(signature = (until_step=None))]
    fn train<'py>(&mut self, py: Python<'py>, until_step: Option<u64>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let recs = trainer::run_training(&mut self.state, &self.data, until_step, &mut std::io::sink()).map_err(err)?;
        recs.iter()
            .map(|r| {
                let d = PyDict::new(py);
                d.set_item("step", r.step)?;
                d.set_item("l_ssl", r.l_ssl)?;
                d.set_item("l_i2t", r.l_i2t)?;
                d.set_item("l_t2i", r.l_t2i)?;
                d.set_item("l_mac_hard", r.l_mac_hard)?;
                d.set_item("l_mac_soft", r.l_mac_soft)?;
                d.set_item("total", r.total)?;
                d.set_item("tau_prime", r.tau_prime)?;
                d.set_item("lr", r.lr)?;
                Ok(d)
            })
            .collect()
    }

    #[getter]
    fn step(&self) -> u64 {
        self.state.step
    }

    #[getter]
    fn tau_prime(&self) -> f64 {
        self.state.tau_prime
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_checkpoint(&self.state, &path).map_err(err)
    }

    /// `modality` is "image" or "text"; embeds the training data by default.
    #[pyo3(signature = (modality, manifest=None))]
    fn embed(&self, modality: &str, manifest: Option<PathBuf>) -> PyResult<PyEmbeddingSet> {
        let m: Modality = modality.parse().map_err(err)?;
        let ds = match manifest {
            Some(p) => valpat::data::load_manifest(&p, None).map_err(err)?,
            None => self.dataset.clone(),
        };
        Ok(PyEmbeddingSet {
            inner: evaluation::embed_dataset(&self.state, &ds, m, &FileImageLoader).map_err(err)?,
        })
    }

    /// Attribute metrics of the query classifier on the training data.
    #[pyo3(signature = (threshold=0.5))]
    fn attribute_metrics<'py>(&self, py: Python<'py>, threshold: f64) -> PyResult<Bound<'py, PyDict>> {
        let (p, l) = evaluation::predict_attributes(&self.state, &self.dataset, &FileImageLoader).map_err(err)?;
        report_dict(py, &evaluation::attribute_metrics(p.view(), l.view(), threshold).map_err(err)?)
    }
}

#[pyfunction]
fn ssl_contrastive_loss(q: Vec<Vec<f64>>, k: Vec<Vec<f64>>, negatives: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let (q, k, n) = (matrix(q, "q")?, matrix(k, "k")?, matrix(negatives, "negatives")?);
    losses::ssl_contrastive_loss(q.view(), k.view(), n.view(), tau).map_err(err)
}

#[pyfunction]
#[allow(clippy::too_many_arguments)]
fn itc_loss(
    q_img: Vec<Vec<f64>>,
    k_txt: Vec<Vec<f64>>,
    q_txt: Vec<Vec<f64>>,
    k_img: Vec<Vec<f64>>,
    neg_txt: Vec<Vec<f64>>,
    neg_img: Vec<Vec<f64>>,
    tau_prime: f64,
) -> PyResult<(f64, f64)> {
    let m = [
        matrix(q_img, "q_img")?,
        matrix(k_txt, "k_txt")?,
        matrix(q_txt, "q_txt")?,
        matrix(k_img, "k_img")?,
        matrix(neg_txt, "neg_txt")?,
        matrix(neg_img, "neg_img")?,
    ];
    losses::itc_loss(m[0].view(), m[1].view(), m[2].view(), m[3].view(), m[4].view(), m[5].view(), tau_prime)
        .map_err(err)
}

#[pyfunction]
fn mac_hard_loss(p_img: Vec<Vec<f64>>, p_txt: Vec<Vec<f64>>, y: Vec<Vec<f64>>, w: Vec<f64>) -> PyResult<f64> {
    let (a, b, y) = (matrix(p_img, "p_img")?, matrix(p_txt, "p_txt")?, matrix(y, "y")?);
    losses::mac_hard_loss(a.view(), b.view(), y.view(), &w).map_err(err)
}

#[pyfunction]
fn mac_soft_loss(
    p_img: Vec<Vec<f64>>,
    p_txt: Vec<Vec<f64>>,
    yhat_img: Vec<Vec<f64>>,
    yhat_txt: Vec<Vec<f64>>,
    w: Vec<f64>,
) -> PyResult<f64> {
    let (a, b) = (matrix(p_img, "p_img")?, matrix(p_txt, "p_txt")?);
    let (c, d) = (matrix(yhat_img, "yhat_img")?, matrix(yhat_txt, "yhat_txt")?);
    losses::mac_soft_loss(a.view(), b.view(), c.view(), d.view(), &w).map_err(err)
}

/// Weighted total of the five components; returns the full breakdown.
#[pyfunction]
#[pyo3(signature = (l_ssl, l_i2t, l_t2i, l_mac_hard, l_mac_soft, alpha=0.2, beta=0.5, gamma=0.01,
                    ssl=true, itc=true, mac=true, mac_soft=true))]
#[allow(clippy::too_many_arguments)]
fn total_loss<'py>(
    py: Python<'py>,
    l_ssl: f64,
    l_i2t: f64,
    l_t2i: f64,
    l_mac_hard: f64,
    l_mac_soft: f64,
    alpha: f64,
    beta: f64,
    gamma: f64,
    ssl: bool,
    itc: bool,
    mac: bool,
    mac_soft: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let parts = LossParts {
        l_ssl,
        l_i2t,
        l_t2i,
        l_mac_hard,
        l_mac_soft,
    };
    let lw = LossWeights {
        alpha,
        beta,
        gamma,
        ..LossWeights::default()
    };
    let toggles = LossToggles { ssl, itc, mac, mac_soft };
    let b = losses::total_loss(&parts, &lw, &toggles).map_err(err)?;
    let d = PyDict::new(py);
    for (k, v) in [
        ("l_ssl", b.l_ssl),
        ("l_i2t", b.l_i2t),
        ("l_t2i", b.l_t2i),
        ("l_mac_hard", b.l_mac_hard),
        ("l_mac_soft", b.l_mac_soft),
        ("total", b.total),
    ] {
        d.set_item(k, v)?;
    }
    Ok(d)
}

/// `(mAP, cmc)`; without a gallery each query is ranked against the others.
#[pyfunction]
#[pyo3(signature = (queries, gallery=None, max_rank=10))]
fn cmc_map(queries: &PyEmbeddingSet, gallery: Option<&PyEmbeddingSet>, max_rank: usize) -> PyResult<(f64, Vec<f64>)> {
    match gallery {
        Some(g) => evaluation::cmc_map(&queries.inner, &g.inner, max_rank),
        None => evaluation::cmc_map_leave_one_out(&queries.inner, max_rank),
    }
    .map_err(err)
}

#[pyfunction]
#[pyo3(signature = (pred_probs, labels, threshold=0.5))]
fn attribute_metrics<'py>(
    py: Python<'py>,
    pred_probs: Vec<Vec<f64>>,
    labels: Vec<Vec<f64>>,
    threshold: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let (p, l) = (matrix(pred_probs, "pred_probs")?, matrix(labels, "labels")?);
    report_dict(py, &evaluation::attribute_metrics(p.view(), l.view(), threshold).map_err(err)?)
}

#[pyfunction]
fn topk_text_search(text_queries: &PyEmbeddingSet, gallery: &PyEmbeddingSet, ks: Vec<usize>) -> PyResult<Vec<f64>> {
    evaluation::topk_text_search(&text_queries.inner, &gallery.inner, &ks).map_err(err)
}

/// Mined vocabulary as `(token, pos, frequency, weight)` tuples.
#[pyfunction]
fn build_vocabulary(captions: Vec<String>, m: usize) -> PyResult<Vec<(String, String, u64, f64)>> {
    let v = mining::build_vocabulary(&captions, m, &TaggerLexicon::bundled()).map_err(err)?;
    Ok(v.entries()
        .iter()
        .zip(v.weights())
        .map(|(e, &w)| (e.token.clone(), e.pos.as_str().to_string(), e.frequency, w))
        .collect())
}

/// Multi-hot labels of `caption` against the top-`m` vocabulary of `corpus`.
#[pyfunction]
fn label_sample(caption: &str, corpus: Vec<String>, m: usize) -> PyResult<Vec<u8>> {
    let lex = TaggerLexicon::bundled();
    let v = mining::build_vocabulary(&corpus, m, &lex).map_err(err)?;
    mining::label_sample(caption, &v, &lex).map_err(err)
}

#[pyfunction]
fn lr_at_step(config: &PyTrainConfig, step: u64, steps_per_epoch: u64) -> f64 {
    trainer::lr_at_step(&config.inner, step, steps_per_epoch)
}

/// Runs the command-line interface in-process and returns its exit code.
#[pyfunction]
fn cli(argv: Vec<String>) -> i32 {
    valpat::cli::run(std::iter::once("valpat".to_string()).chain(argv))
}

#[pymodule]
fn valpat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ValpatError", m.py().get_type::<ValpatError>())?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyNegativeQueue>()?;
    m.add_class::<PyEmbeddingSet>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(ssl_contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(itc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mac_hard_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mac_soft_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cmc_map, m)?)?;
    m.add_function(wrap_pyfunction!(attribute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(topk_text_search, m)?)?;
    m.add_function(wrap_pyfunction!(build_vocabulary, m)?)?;
    m.add_function(wrap_pyfunction!(label_sample, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at_step, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
