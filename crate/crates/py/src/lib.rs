use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use bicon::config::Config;
use bicon::corpus::{classify_pattern as classify, SooRule};
use bicon::decoder::{decode_tables, exhaustive_round_trip};
use bicon::diffcore::Tensor;
use bicon::metrics::{score_corpus, MatchMode, Prf, Scored};
use bicon::model::{Model as CoreModel, Stage};
use bicon::pdconv::{to_equivalent_kernel, PdcKernelSpec, PdcKind};
use bicon::synth::{generate, SynthConfig};
use bicon::tagger::{build_gold_table, TagTable};
use bicon::tokenize::{tokenize as core_tokenize, Vocab};
use bicon::trainer::{train, TrainOptions};
use bicon::triple::{Span, Triple};
use bicon::Error;

/// `((subject_start, subject_end), relation, (object_start, object_end))`,
/// token positions 1-based and inclusive.
type PyTriple = ((usize, usize), usize, (usize, usize));

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::File { .. } | Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py(t: &Triple) -> PyTriple {
    ((t.subject.start, t.subject.end), t.relation, (t.object.start, t.object.end))
}

fn from_py(t: &PyTriple) -> Triple {
    Triple::new(Span::new(t.0 .0, t.0 .1), t.1, Span::new(t.2 .0, t.2 .1))
}

fn convert(ts: &[PyTriple]) -> Vec<Triple> {
    ts.iter().map(from_py).collect()
}

fn prf_tuple(p: &Prf) -> (f64, f64, f64) {
    (p.precision, p.recall, p.f1)
}

/// Whitespace and punctuation tokenization used by every loader.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    core_tokenize(text).tokens
}

/// Flat `[N, N, K]` tag ids of the gold table for `triples`.
#[pyfunction]
fn gold_table(triples: Vec<PyTriple>, n: usize, k: usize) -> PyResult<Vec<u8>> {
    Ok(build_gold_table(&convert(&triples), n, k).map_err(to_py_err)?.labels().to_vec())
}

/// Triples spliced out of a flat `[N, N, K]` tag-id table.
#[pyfunction]
fn decode_table(labels: Vec<u8>, n: usize, k: usize) -> PyResult<Vec<PyTriple>> {
    let table = TagTable::from_labels(n, k, labels).map_err(to_py_err)?;
    Ok(decode_tables(&table).iter().map(to_py).collect())
}

#[pyfunction]
#[pyo3(signature = (tp, fp, fn_))]
fn prf1(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    prf_tuple(&bicon::metrics::prf1(tp, fp, fn_))
}

/// Micro `(P, R, F1)` for triples, entity pairs and relations.
#[pyfunction]
#[pyo3(signature = (pred, gold, mode = "partial"))]
fn score<'py>(
    py: Python<'py>,
    pred: Vec<Vec<PyTriple>>,
    gold: Vec<Vec<PyTriple>>,
    mode: &str,
) -> PyResult<Bound<'py, PyDict>> {
    if pred.len() != gold.len() {
        return Err(PyValueError::new_err(format!("{} predictions for {} sentences", pred.len(), gold.len())));
    }
    let mode: MatchMode = mode.parse().map_err(to_py_err)?;
    let (p, g): (Vec<Vec<Triple>>, Vec<Vec<Triple>>) =
        pred.iter().zip(&gold).map(|(p, g)| (convert(p), convert(g))).unzip();
    let items: Vec<Scored> = p.iter().zip(&g).map(|(p, g)| Scored { pred: p, gold: g }).collect();
    let r = score_corpus(&items, mode);
    let d = PyDict::new(py);
    d.set_item("triple", prf_tuple(&r.triple))?;
    d.set_item("pair", prf_tuple(&r.pair))?;
    d.set_item("relation", prf_tuple(&r.relation))?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (triples, soo_rule = "cross-role-or-nested"))]
fn classify_pattern<'py>(py: Python<'py>, triples: Vec<PyTriple>, soo_rule: &str) -> PyResult<Bound<'py, PyDict>> {
    let rule: SooRule = soo_rule.parse().map_err(to_py_err)?;
    let l = classify(&convert(&triples), rule);
    let d = PyDict::new(py);
    d.set_item("normal", l.normal)?;
    d.set_item("epo", l.epo)?;
    d.set_item("seo", l.seo)?;
    d.set_item("soo", l.soo)?;
    d.set_item("bucket", l.bucket)?;
    Ok(d)
}

/// `(name, short)` for every built-in pixel-difference kernel.
#[pyfunction]
fn pdc_kinds() -> Vec<(String, String)> {
    PdcKind::ALL.iter().map(|k| (k.name().to_string(), k.short().to_string())).collect()
}

/// Folds pair weights `[Cout, Cin, pairs]` into a plain `[Cout, Cin, k, k]`
/// kernel. Returns the shape and the flat values.
#[pyfunction]
fn equivalent_kernel(kind: &str, weights: Vec<f32>, cout: usize, cin: usize) -> PyResult<(Vec<usize>, Vec<f32>)> {
    let spec = PdcKernelSpec::new(kind.parse().map_err(to_py_err)?);
    let w = Tensor::new(vec![cout, cin, spec.num_pairs()], weights).map_err(to_py_err)?;
    let k = to_equivalent_kernel(&spec, &w).map_err(to_py_err)?;
    Ok((k.shape().to_vec(), k.data().to_vec()))
}

/// `(split, text, triples)` rows of the generated corpus.
#[pyfunction]
#[pyo3(signature = (train = 50, dev = 20, seed = 7))]
fn synthetic_corpus(train: usize, dev: usize, seed: u64) -> Vec<(String, String, Vec<PyTriple>)> {
    let c = generate(&SynthConfig { train, dev, seed });
    c.train
        .iter()
        .chain(&c.dev)
        .map(|ex| (ex.split.clone(), ex.text().to_string(), ex.triples.iter().map(to_py).collect()))
        .collect()
}

/// Encode/decode every triple set of up to `max_triples` over up to `max_n`
/// tokens.
#[pyfunction]
#[pyo3(signature = (max_n = 6, max_triples = 2))]
fn round_trip_check(py: Python<'_>, max_n: usize, max_triples: usize) -> PyResult<Bound<'_, PyDict>> {
    let r = exhaustive_round_trip(max_n, max_triples, 0);
    let d = PyDict::new(py);
    d.set_item("placements", r.placements)?;
    d.set_item("failures", r.failures)?;
    d.set_item("ambiguous_failures", r.ambiguous_failures)?;
    d.set_item("distinct_tables", r.distinct_tables)?;
    Ok(d)
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: CoreModel,
}

#[pymethods]
impl PyModel {
    /// Loads a model directory written by `save` or by `bicon train`.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = bicon::cli::load_model(path.as_ref()).map_err(to_py_err)?;
        Ok(PyModel { inner })
    }

    /// Trains on the generated corpus. `config` is a TOML path or preset
    /// name. Returns the model and the best dev partial F1.
    #[staticmethod]
    #[pyo3(signature = (config = "synthetic", seed = 13, epochs = None))]
    fn train_synthetic(py: Python<'_>, config: &str, seed: u64, epochs: Option<usize>) -> PyResult<(Self, f64)> {
        let mut cfg: Config = bicon::cli::resolve_config(Some(config), "synthetic").map_err(to_py_err)?;
        cfg.train.seed = seed;
        if let Some(e) = epochs {
            cfg.train.epochs = e;
        }
        py.detach(|| {
            let corpus = generate(&SynthConfig::default());
            let vocab = Vocab::build(corpus.train.iter().map(|e| &e.seq));
            let mut model = CoreModel::new(cfg.model.clone(), vocab, corpus.schema.clone(), seed)?;
            let out = train(&mut model, &corpus.train, &corpus.dev, &cfg.train, &TrainOptions::default())?;
            Ok((PyModel { inner: model }, out.best_dev_f1))
        })
        .map_err(to_py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py_err)
    }

    #[getter]
    fn relations(&self) -> Vec<String> {
        self.inner.schema.names().to_vec()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.num_values()
    }

    /// Predicted triples as `(subject_text, relation, object_text, spans)`.
    fn predict(&self, text: &str) -> PyResult<Vec<(String, String, String, PyTriple)>> {
        let seq = core_tokenize(text);
        let triples = self.inner.predict(&seq).map_err(to_py_err)?;
        Ok(triples
            .iter()
            .map(|t| {
                (
                    seq.span_text(t.subject.start, t.subject.end),
                    self.inner.schema.name(t.relation).unwrap_or("?").to_string(),
                    seq.span_text(t.object.start, t.object.end),
                    to_py(t),
                )
            })
            .collect())
    }

    /// An intermediate `[N, N, C]` grid as `(shape, flat values)`.
    #[pyo3(signature = (text, stage = "tso"))]
    fn stage_grid(&self, text: &str, stage: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let stage: Stage = stage.parse().map_err(to_py_err)?;
        let ids = self.inner.ids(&core_tokenize(text));
        let g = self.inner.stage_grid(&ids, stage).map_err(to_py_err)?;
        Ok((g.shape().to_vec(), g.data().to_vec()))
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(relations={}, parameters={})",
            self.inner.relations(),
            self.inner.params.num_values()
        )
    }
}

#[pymodule]
#[pyo3(name = "bicon")]
fn bicon_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(gold_table, m)?)?;
    m.add_function(wrap_pyfunction!(decode_table, m)?)?;
    m.add_function(wrap_pyfunction!(prf1, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(classify_pattern, m)?)?;
    m.add_function(wrap_pyfunction!(pdc_kinds, m)?)?;
    m.add_function(wrap_pyfunction!(equivalent_kernel, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(round_trip_check, m)?)?;
    Ok(())
}
