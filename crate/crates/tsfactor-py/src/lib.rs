//! Python bindings for the tsfactor pipeline: dataset synthesis, both model
//! stages, token round-trips, generation, forecasting, metrics, and
//! checkpoint persistence. Windows cross the boundary as nested lists
//! ([T][D] of floats); structured hyperparameters come in as JSON strings so
//! the Rust configs stay the single source of truth (partial JSON is fine —
//! omitted fields take the library defaults).

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tsfactor::ar::{ArConfig, SamplingParams};
use tsfactor::checkpoint::{
    load_ar_checkpoint, load_vq_checkpoint, save_ar_checkpoint, save_vq_checkpoint,
};
use tsfactor::config::TrainingConfig;
use tsfactor::data::{SeriesWindow, synth_lowrank};
use tsfactor::metrics::{AuxTrainConfig, EmbedderConfig, MetricValue, evaluate_all};
use tsfactor::pipeline::{self, TokenCorpus};
use tsfactor::tensor::Tensor;
use tsfactor::vq::{Ablation, TokenSequence, VqConfig};

fn to_py_err(e: tsfactor::Error) -> PyErr {
    match e.category() {
        "missing_checkpoint" => PyFileNotFoundError::new_err(e.to_string()),
        "io" => PyIOError::new_err(e.to_string()),
        cat => PyValueError::new_err(format!("{cat}: {e}")),
    }
}

fn window_to_tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    if rows.is_empty() {
        return Err(PyValueError::new_err("window must have at least one row"));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("window rows must be non-empty and equal-length"));
    }
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Tensor::new(vec![rows.len(), d], data).map_err(to_py_err)
}

fn tensor_to_window(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn series_windows(windows: &[Vec<Vec<f64>>], labels: Option<&[usize]>) -> PyResult<Vec<SeriesWindow>> {
    if let Some(ls) = labels {
        if ls.len() != windows.len() {
            return Err(PyValueError::new_err(format!(
                "{} windows but {} labels",
                windows.len(),
                ls.len()
            )));
        }
    }
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            Ok(SeriesWindow { data: window_to_tensor(w)?, label: labels.map(|ls| ls[i]) })
        })
        .collect()
}

fn parse_json<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> PyResult<T> {
    serde_json::from_str(text)
        .map_err(|e| PyValueError::new_err(format!("config: invalid {what} JSON: {e}")))
}

fn sampling(temperature: f64, top_k: usize, top_p: f64, seed: u64) -> SamplingParams {
    SamplingParams { temperature, top_k, top_p, seed }
}

/// Stage-I factorized VQ autoencoder.
#[pyclass]
struct VqModel {
    inner: tsfactor::vq::VqModel,
}

#[pymethods]
impl VqModel {
    /// Train on a list of [T][D] windows. `config` and `training` are JSON
    /// objects (any omitted field takes the library default).
    #[staticmethod]
    #[pyo3(signature = (windows, labels=None, config="{}", training="{}", ablation="{}"))]
    fn train(
        windows: Vec<Vec<Vec<f64>>>,
        labels: Option<Vec<usize>>,
        config: &str,
        training: &str,
        ablation: &str,
    ) -> PyResult<Self> {
        let cfg: VqConfig = parse_json("vq config", config)?;
        let tc: TrainingConfig = parse_json("training config", training)?;
        let ab: Ablation = parse_json("ablation", ablation)?;
        let ws = series_windows(&windows, labels.as_deref())?;
        let inner = pipeline::train_stage1(&ws, &cfg, ab, &tc, |_| {}).map_err(to_py_err)?;
        Ok(VqModel { inner })
    }

    /// Quantize one window to its token sequence.
    #[pyo3(signature = (window, label=None))]
    fn tokenize(&self, window: Vec<Vec<f64>>, label: Option<usize>) -> PyResult<Vec<usize>> {
        let t = window_to_tensor(&window)?;
        Ok(self.inner.tokenize_window(&t, label).map_err(to_py_err)?.tokens)
    }

    /// Decode a token sequence back to a [T][D] window.
    #[pyo3(signature = (tokens, label=None))]
    fn decode(&self, tokens: Vec<usize>, label: Option<usize>) -> PyResult<Vec<Vec<f64>>> {
        Ok(tensor_to_window(&self.inner.decode_tokens(&tokens, label).map_err(to_py_err)?))
    }

    /// Pooled tokenize→decode reconstruction RMSE over a window set.
    #[pyo3(signature = (windows, labels=None))]
    fn rmse(&self, windows: Vec<Vec<Vec<f64>>>, labels: Option<Vec<usize>>) -> PyResult<f64> {
        let ws = series_windows(&windows, labels.as_deref())?;
        pipeline::reconstruction_rmse(&self.inner, &ws).map_err(to_py_err)
    }

    #[pyo3(signature = (path, seed=0))]
    fn save(&self, path: PathBuf, seed: u64) -> PyResult<String> {
        save_vq_checkpoint(&path, &self.inner, seed, None, None, None).map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(VqModel { inner: load_vq_checkpoint(&path).map_err(to_py_err)?.model })
    }

    #[getter]
    fn codebook_size(&self) -> usize {
        self.inner.codebook.size()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.cfg.num_classes
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.cfg.rank
    }

    fn __repr__(&self) -> String {
        format!(
            "VqModel(channels={}, rank={}, codebook={}, classes={})",
            self.inner.cfg.num_channels,
            self.inner.cfg.rank,
            self.inner.cfg.codebook_size,
            self.inner.cfg.num_classes
        )
    }
}

/// Stage-II autoregressive Transformer prior over token sequences.
#[pyclass]
struct ArModel {
    inner: tsfactor::ar::ArModel,
}

fn corpus(sequences: Vec<Vec<usize>>, labels: Option<Vec<usize>>) -> PyResult<TokenCorpus> {
    if let Some(ls) = &labels {
        if ls.len() != sequences.len() {
            return Err(PyValueError::new_err(format!(
                "{} sequences but {} labels",
                sequences.len(),
                ls.len()
            )));
        }
    }
    let sequences = sequences
        .into_iter()
        .enumerate()
        .map(|(i, tokens)| TokenSequence { tokens, class_label: labels.as_ref().map(|ls| ls[i]) })
        .collect();
    Ok(TokenCorpus { sequences, source_vq_checksum: "python".into() })
}

#[pymethods]
impl ArModel {
    /// Train on a list of token sequences. `config` and `training` are JSON
    /// objects (any omitted field takes the library default).
    #[staticmethod]
    #[pyo3(signature = (sequences, labels=None, config="{}", training="{}"))]
    fn train(
        sequences: Vec<Vec<usize>>,
        labels: Option<Vec<usize>>,
        config: &str,
        training: &str,
    ) -> PyResult<Self> {
        let cfg: ArConfig = parse_json("ar config", config)?;
        let tc: TrainingConfig = parse_json("training config", training)?;
        let inner =
            pipeline::train_stage2(&corpus(sequences, labels)?, &cfg, &tc, |_| {}).map_err(to_py_err)?;
        Ok(ArModel { inner })
    }

    /// Mean per-token NLL of the model on a token corpus.
    #[pyo3(signature = (sequences, labels=None))]
    fn nll(&self, sequences: Vec<Vec<usize>>, labels: Option<Vec<usize>>) -> PyResult<f64> {
        pipeline::corpus_nll(&self.inner, &corpus(sequences, labels)?).map_err(to_py_err)
    }

    #[pyo3(signature = (path, seed=0))]
    fn save(&self, path: PathBuf, seed: u64) -> PyResult<String> {
        save_ar_checkpoint(&path, &self.inner, seed, None).map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(ArModel { inner: load_ar_checkpoint(&path).map_err(to_py_err)?.model })
    }

    #[getter]
    fn codebook_size(&self) -> usize {
        self.inner.cfg.codebook_size
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.cfg.num_classes
    }

    #[getter]
    fn max_context(&self) -> usize {
        self.inner.cfg.max_context
    }

    fn __repr__(&self) -> String {
        format!(
            "ArModel(d_model={}, layers={}, heads={}, codebook={}, classes={})",
            self.inner.cfg.d_model,
            self.inner.cfg.n_layers,
            self.inner.cfg.n_heads,
            self.inner.cfg.codebook_size,
            self.inner.cfg.num_classes
        )
    }
}

/// Synthesize a low-rank dataset and return normalized train/test windows
/// (and labels when `n_classes` > 0) as
/// ((train_windows, train_labels), (test_windows, test_labels)).
#[pyfunction]
#[pyo3(signature = (seed, channels, window_len, rank, n_windows, n_prototypes=8, noise_std=0.0, n_classes=0, train_frac=0.9))]
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn synth_windows(
    seed: u64,
    channels: usize,
    window_len: usize,
    rank: usize,
    n_windows: usize,
    n_prototypes: usize,
    noise_std: f64,
    n_classes: usize,
    train_frac: f64,
) -> PyResult<(
    (Vec<Vec<Vec<f64>>>, Option<Vec<usize>>),
    (Vec<Vec<Vec<f64>>>, Option<Vec<usize>>),
)> {
    let mut ds = synth_lowrank(seed, channels, window_len, rank, n_windows, n_prototypes, noise_std, n_classes)
        .map_err(to_py_err)?;
    ds.set_train_frac(train_frac).map_err(to_py_err)?;
    ds.fit_normalization().map_err(to_py_err)?;
    let split = |ws: Vec<SeriesWindow>| {
        let labels: Option<Vec<usize>> =
            (n_classes > 0).then(|| ws.iter().map(|w| w.label.unwrap_or(0)).collect());
        let data: Vec<Vec<Vec<f64>>> = ws.iter().map(|w| tensor_to_window(&w.data)).collect();
        (data, labels)
    };
    let train = split(ds.train_windows(window_len, 1).map_err(to_py_err)?);
    let test = split(ds.test_windows(window_len, 1).map_err(to_py_err)?);
    Ok((train, test))
}

/// Sample a fresh window of `length` steps (normalized units).
#[pyfunction]
#[pyo3(signature = (vq, ar, length, class_label=None, temperature=1.0, top_k=1000, top_p=1.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn generate(
    vq: &VqModel,
    ar: &ArModel,
    length: usize,
    class_label: Option<usize>,
    temperature: f64,
    top_k: usize,
    top_p: f64,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let sp = sampling(temperature, top_k, top_p, seed);
    Ok(tensor_to_window(
        &pipeline::generate(&vq.inner, &ar.inner, length, class_label, &sp).map_err(to_py_err)?,
    ))
}

/// Continue an observed [T][D] window (normalized units) by `horizon` steps.
#[pyfunction]
#[pyo3(signature = (vq, ar, observed, horizon, class_label=None, temperature=0.5, top_k=50, top_p=1.0, seed=0))]
#[allow(clippy::too_many_arguments)]
fn forecast(
    vq: &VqModel,
    ar: &ArModel,
    observed: Vec<Vec<f64>>,
    horizon: usize,
    class_label: Option<usize>,
    temperature: f64,
    top_k: usize,
    top_p: f64,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let obs = window_to_tensor(&observed)?;
    let sp = sampling(temperature, top_k, top_p, seed);
    Ok(tensor_to_window(
        &pipeline::forecast(&vq.inner, &ar.inner, &obs, horizon, class_label, &sp).map_err(to_py_err)?,
    ))
}

fn metric_entry<'py>(py: Python<'py>, v: &MetricValue) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mean", v.mean)?;
    d.set_item("std", v.std)?;
    d.set_item("repeats", v.repeats)?;
    Ok(d)
}

/// Score a synthetic window set against a real one. Returns a dict with
/// context_fid, correlational, discriminative, and predictive entries, each
/// carrying mean/std/repeats.
#[pyfunction]
#[pyo3(signature = (real, synth, seed=0, repeats=3, embedding_dim=16, max_steps=1000))]
fn evaluate<'py>(
    py: Python<'py>,
    real: Vec<Vec<Vec<f64>>>,
    synth: Vec<Vec<Vec<f64>>>,
    seed: u64,
    repeats: usize,
    embedding_dim: usize,
    max_steps: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let real: Vec<Tensor> = real.iter().map(|w| window_to_tensor(w)).collect::<PyResult<_>>()?;
    let synth: Vec<Tensor> = synth.iter().map(|w| window_to_tensor(w)).collect::<PyResult<_>>()?;
    let aux = AuxTrainConfig { max_steps, ..AuxTrainConfig::default() };
    let emb = EmbedderConfig { embedding_dim, train: aux.clone(), ..EmbedderConfig::default() };
    let report = evaluate_all(&real, &synth, seed, repeats, &emb, &aux).map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("context_fid", metric_entry(py, &report.context_fid)?)?;
    out.set_item("correlational", metric_entry(py, &report.correlational)?)?;
    out.set_item("discriminative", metric_entry(py, &report.discriminative)?)?;
    out.set_item("predictive", metric_entry(py, &report.predictive)?)?;
    Ok(out)
}

#[pymodule]
fn tsfactor_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<VqModel>()?;
    m.add_class::<ArModel>()?;
    m.add_function(wrap_pyfunction!(synth_windows, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(forecast, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
