//! Python bindings: mixture weights, parameter budgets, scoring, the synthetic
//! corpus and adapted models.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use maslora::accent::AccentId;
use maslora::adapters::ParamShape;
use maslora::data::{gen_corpus, make_folds, CorpusConfig, FoldOptions, Manifest};
use maslora::harness::evaluate;
use maslora::model::{load_model, save_model, GridEntry, ModelConfig, Route, Transformer};
use maslora::{Error, MixSpec, Rng};

fn py_err(e: Error) -> PyErr {
    let msg = format!("{}: {e}", e.kind());
    match e {
        Error::Io(_) => PyOSError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn mix_spec(mix: &str, target: Option<&str>, beta: Option<f64>) -> PyResult<MixSpec> {
    let target = || -> PyResult<AccentId> {
        target.map(AccentId::new).ok_or_else(|| PyValueError::new_err(format!("mix {mix:?} needs a target")))
    };
    match mix {
        "uniform" => Ok(MixSpec::Uniform),
        "single" => Ok(MixSpec::Single { target: target()? }),
        "aware" => {
            let beta = beta.ok_or_else(|| PyValueError::new_err("aware mix needs beta"))?;
            Ok(MixSpec::Aware { target: target()?, beta })
        }
        other => Err(PyValueError::new_err(format!("unknown mix {other:?}"))),
    }
}

/// Expert weights over `accents` for a `uniform`, `single` or `aware` mix.
#[pyfunction]
#[pyo3(signature = (accents, mix = "uniform", target = None, beta = None))]
fn mixture_weights(accents: Vec<String>, mix: &str, target: Option<&str>, beta: Option<f64>) -> PyResult<Vec<f64>> {
    let ids: Vec<AccentId> = accents.into_iter().map(AccentId::new).collect();
    maslora::mixture_weights(&mix_spec(mix, target, beta)?, &ids).map_err(py_err)
}

/// `(trained, percent)` for a grid label such as `maslora-qv/lora-qv` under
/// the Whisper-small reference shape.
#[pyfunction]
#[pyo3(signature = (entry, rank = 16, n_experts = 6))]
fn param_count(entry: &str, rank: u64, n_experts: u64) -> PyResult<(u64, f64)> {
    let e: GridEntry = entry.parse().map_err(py_err)?;
    let b = maslora::param_count(&ParamShape::whisper_small(e.attach), e.encoder, e.decoder, rank, n_experts);
    Ok((b.trained, b.percent))
}

#[pyfunction]
fn align<'py>(py: Python<'py>, reference: Vec<String>, hyp: Vec<String>) -> PyResult<Bound<'py, PyDict>> {
    let a = maslora::metrics::align(&reference, &hyp).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("substitutions", a.substitutions)?;
    d.set_item("deletions", a.deletions)?;
    d.set_item("insertions", a.insertions)?;
    d.set_item("hits", a.hits)?;
    d.set_item("ref_len", a.ref_len)?;
    Ok(d)
}

/// Pooled WER (percent) over `(reference, hypothesis)` word lists.
#[pyfunction]
fn wer(pairs: Vec<(Vec<String>, Vec<String>)>) -> PyResult<f64> {
    let refs: Vec<(&[String], &[String])> = pairs.iter().map(|(r, h)| (&r[..], &h[..])).collect();
    maslora::metrics::wer(&refs).map_err(py_err)
}

/// Matched-pair segment test on per-utterance error counts.
#[pyfunction]
fn mapsswe<'py>(py: Python<'py>, errs_a: Vec<usize>, errs_b: Vec<usize>) -> PyResult<Bound<'py, PyDict>> {
    let r = maslora::metrics::mapsswe(&errs_a, &errs_b).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("z", r.z)?;
    d.set_item("p", r.p)?;
    d.set_item("n_segments", r.n_segments)?;
    d.set_item("significant", r.significant)?;
    d.set_item("degenerate", r.degenerate)?;
    Ok(d)
}

type UttRow = (usize, String, String, Vec<usize>, Vec<usize>);
type FoldIds = (Vec<usize>, Vec<usize>, Vec<usize>);

/// Synthetic multi-accent corpus.
#[pyclass(module = "maslora_py")]
struct Corpus {
    manifest: Manifest,
}

#[pymethods]
impl Corpus {
    #[new]
    #[pyo3(signature = (n_accents = 6, n_sentences = 100, vocab_size = 64, seed = 2024))]
    fn new(n_accents: usize, n_sentences: usize, vocab_size: usize, seed: u64) -> PyResult<Self> {
        let cfg = CorpusConfig { n_accents, n_sentences, vocab_size, seed, ..CorpusConfig::default() };
        Ok(Self { manifest: gen_corpus(&cfg).map_err(py_err)? })
    }

    #[getter]
    fn accents(&self) -> Vec<String> {
        self.manifest.accent_ids().into_iter().map(|a| a.0).collect()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.manifest.vocab_size
    }

    fn __len__(&self) -> usize {
        self.manifest.utterances.len()
    }

    /// `(id, speaker, accent, observed, reference)` per utterance.
    fn utterances(&self) -> Vec<UttRow> {
        self.manifest
            .utterances
            .iter()
            .map(|u| (u.id, u.speaker.clone(), u.accent.0.clone(), u.observed.clone(), u.reference.clone()))
            .collect()
    }

    /// `(train, valid, test)` utterance ids per fold.
    #[pyo3(signature = (k = 8, seed = 0))]
    fn folds(&self, k: usize, seed: u64) -> PyResult<Vec<FoldIds>> {
        let folds = make_folds(&self.manifest, &FoldOptions { k, seed, ..FoldOptions::default() }).map_err(py_err)?;
        Ok(folds.into_iter().map(|f| (f.train, f.valid, f.test)).collect())
    }
}

/// Encoder-decoder transformer with optional adapters.
#[pyclass(module = "maslora_py")]
struct Model {
    inner: Transformer,
}

#[pymethods]
impl Model {
    /// Freshly initialized model carrying the adapters of grid label `entry`.
    #[new]
    #[pyo3(signature = (entry = "noft/noft", accents = None, rank = 4, seed = 0, vocab_size = 64))]
    fn new(entry: &str, accents: Option<Vec<String>>, rank: usize, seed: u64, vocab_size: usize) -> PyResult<Self> {
        let e: GridEntry = entry.parse().map_err(py_err)?;
        let ids: Vec<AccentId> = accents.unwrap_or_default().into_iter().map(AccentId::new).collect();
        let cfg = ModelConfig { vocab_size, ..ModelConfig::default() };
        let inner = Transformer::build(&cfg, &e.ft_config(rank, 1.0, &ids), &mut Rng::new(seed)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_model(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_model(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn label(&self) -> String {
        self.inner.ft.label()
    }

    #[getter]
    fn accents(&self) -> Vec<String> {
        self.inner.ft.accents.iter().map(|a| a.0.clone()).collect()
    }

    #[getter]
    fn trainable_params(&self) -> usize {
        self.inner.trainable_param_count()
    }

    #[getter]
    fn adapter_params(&self) -> usize {
        self.inner.adapter_param_count()
    }

    /// Next-token logits for every position of `prefix`.
    #[pyo3(signature = (src, prefix, mix = "uniform", target = None, beta = None))]
    fn logits(&self, src: Vec<usize>, prefix: Vec<usize>, mix: &str, target: Option<&str>, beta: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
        let m = self.inner.forward(&src, &prefix, &Route::Mix(mix_spec(mix, target, beta)?)).map_err(py_err)?;
        Ok((0..m.rows()).map(|i| m.row(i).to_vec()).collect())
    }

    #[pyo3(signature = (src, mix = "uniform", target = None, beta = None))]
    fn decode(&self, src: Vec<usize>, mix: &str, target: Option<&str>, beta: Option<f64>) -> PyResult<Vec<usize>> {
        let limit = self.inner.cfg.max_len - 1;
        self.inner.greedy_decode(&src, &Route::Mix(mix_spec(mix, target, beta)?), limit).map_err(py_err)
    }

    /// Adapter-free copy with the mixture folded into the base weights.
    #[pyo3(signature = (mix = "uniform", target = None, beta = None))]
    fn merged(&self, mix: &str, target: Option<&str>, beta: Option<f64>) -> PyResult<Model> {
        Ok(Model { inner: self.inner.merge_mix(&mix_spec(mix, target, beta)?).map_err(py_err)? })
    }

    /// Pooled WER on the given utterance ids; `aware` and `single` take each
    /// utterance's own accent as the target.
    #[pyo3(signature = (corpus, ids, mix = "uniform", beta = None))]
    fn evaluate(&self, corpus: &Corpus, ids: Vec<usize>, mix: &str, beta: Option<f64>) -> PyResult<f64> {
        let utts = corpus.manifest.select(&ids);
        let spec = mix_spec(mix, Some("*"), beta)?;
        Ok(evaluate(&self.inner, &utts, &spec).map_err(py_err)?.summary.pooled())
    }

    fn __repr__(&self) -> String {
        format!("Model({:?}, params={})", self.inner.ft.label(), self.inner.trainable_param_count())
    }
}

#[pymodule]
fn maslora_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(mixture_weights, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(align, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    m.add_function(wrap_pyfunction!(mapsswe, m)?)?;
    m.add_class::<Corpus>()?;
    m.add_class::<Model>()?;
    Ok(())
}
