//! Python bindings: the corpus, prompting, generation, filtering, training,
//! search, and evaluation surfaces of the convsearch crate.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use convsearch::corpus as core_corpus;
use convsearch::error::Error as CoreError;
use convsearch::eval as core_eval;
use convsearch::filter as core_filter;
use convsearch::generator as core_gen;
use convsearch::prompt as core_prompt;
use convsearch::retriever as core_retriever;

fn to_py_err(e: CoreError) -> PyErr {
    match e {
        CoreError::Validation(_) => PyValueError::new_err(e.to_string()),
        CoreError::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_to_py(py: Python<'_>, value: &serde_json::Value) -> PyResult<Py<PyAny>> {
    Ok(match value {
        serde_json::Value::Null => py.None(),
        serde_json::Value::Bool(b) => b.into_pyobject(py)?.to_owned().unbind().into(),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.into_pyobject(py)?.unbind().into()
            } else {
                n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.unbind().into()
            }
        }
        serde_json::Value::String(s) => s.into_pyobject(py)?.unbind().into(),
        serde_json::Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(json_to_py(py, item)?)?;
            }
            list.unbind().into()
        }
        serde_json::Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, v) in map {
                dict.set_item(k, json_to_py(py, v)?)?;
            }
            dict.unbind().into()
        }
    })
}

fn to_py_json<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let json = serde_json::to_value(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &json)
}

/// One retrievable passage.
#[pyclass(name = "Passage", from_py_object)]
#[derive(Clone)]
struct PyPassage {
    inner: core_corpus::Passage,
}

#[pymethods]
impl PyPassage {
    #[new]
    #[pyo3(signature = (id, doc_id, title, text))]
    fn new(id: String, doc_id: String, title: String, text: String) -> Self {
        PyPassage {
            inner: core_corpus::Passage {
                id,
                doc_id,
                title,
                text,
            },
        }
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn doc_id(&self) -> String {
        self.inner.doc_id.clone()
    }

    #[getter]
    fn title(&self) -> String {
        self.inner.title.clone()
    }

    #[getter]
    fn text(&self) -> String {
        self.inner.text.clone()
    }

    fn __repr__(&self) -> String {
        format!("Passage(id={:?}, doc_id={:?})", self.inner.id, self.inner.doc_id)
    }
}

/// Immutable passage collection.
#[pyclass(name = "Corpus")]
struct PyCorpus {
    inner: core_corpus::Corpus,
}

#[pymethods]
impl PyCorpus {
    #[new]
    fn new(passages: Vec<PyPassage>) -> PyResult<Self> {
        let inner =
            core_corpus::Corpus::from_passages(passages.into_iter().map(|p| p.inner).collect())
                .map_err(to_py_err)?;
        Ok(PyCorpus { inner })
    }

    /// Loads a corpus from a JSONL or TSV file.
    #[staticmethod]
    #[pyo3(signature = (path, format="jsonl"))]
    fn load(path: PathBuf, format: &str) -> PyResult<Self> {
        let format: core_corpus::CorpusFormat = format.parse().map_err(to_py_err)?;
        let inner = core_corpus::load_corpus(&path, format).map_err(to_py_err)?;
        Ok(PyCorpus { inner })
    }

    #[pyo3(signature = (path, format="jsonl"))]
    fn save(&self, path: PathBuf, format: &str) -> PyResult<()> {
        let format: core_corpus::CorpusFormat = format.parse().map_err(to_py_err)?;
        core_corpus::save_corpus(&self.inner, &path, format).map_err(to_py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.iter().map(|p| p.id.clone()).collect()
    }

    fn get(&self, id: &str) -> Option<PyPassage> {
        self.inner.get(id).map(|p| PyPassage { inner: p.clone() })
    }

    /// Uniformly samples a passage with a seeded random source.
    fn sample(&self, seed: u64) -> PyResult<PyPassage> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let p = core_corpus::sample_passage(&self.inner, &mut rng).map_err(to_py_err)?;
        Ok(PyPassage { inner: p.clone() })
    }

    /// The deterministic related-passage choice for a passage id.
    fn related(&self, id: &str) -> PyResult<PyPassage> {
        use rand::SeedableRng;
        let current = self
            .inner
            .get(id)
            .ok_or_else(|| PyValueError::new_err(format!("unknown passage id {id:?}")))?
            .clone();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let p = core_corpus::related_passage(&self.inner, &current, &mut rng).map_err(to_py_err)?;
        Ok(PyPassage { inner: p.clone() })
    }
}

/// Few-shot demonstration conversations.
#[pyclass(name = "FewShotSet")]
struct PyFewShotSet {
    inner: core_prompt::FewShotSet,
}

#[pymethods]
impl PyFewShotSet {
    /// Builds a set from `[[(query, Passage), ...], ...]`.
    #[new]
    fn new(examples: Vec<Vec<(String, PyPassage)>>) -> PyResult<Self> {
        let conversations = examples
            .into_iter()
            .map(|turns| {
                core_prompt::ExampleConversation::new(
                    turns.into_iter().map(|(q, p)| (q, p.inner)).collect(),
                )
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(to_py_err)?;
        let inner = core_prompt::FewShotSet::new(conversations).map_err(to_py_err)?;
        Ok(PyFewShotSet { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyFewShotSet {
            inner: core_prompt::FewShotSet::load(&path).map_err(to_py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A rendered demonstration template.
#[pyclass(name = "Template")]
struct PyTemplate {
    inner: core_prompt::Template,
}

#[pymethods]
impl PyTemplate {
    /// Full template: per example, the last turn's passage plus every query.
    #[staticmethod]
    #[pyo3(signature = (examples, passage_char_budget=core_prompt::DEFAULT_PASSAGE_CHAR_BUDGET))]
    fn full(examples: &PyFewShotSet, passage_char_budget: usize) -> PyResult<Self> {
        Ok(PyTemplate {
            inner: core_prompt::build_full_template_with_budget(
                &examples.inner,
                passage_char_budget,
            )
            .map_err(to_py_err)?,
        })
    }

    /// First-turn template: per example, only the opening passage and query.
    #[staticmethod]
    #[pyo3(signature = (examples, passage_char_budget=core_prompt::DEFAULT_PASSAGE_CHAR_BUDGET))]
    fn first_turn(examples: &PyFewShotSet, passage_char_budget: usize) -> PyResult<Self> {
        Ok(PyTemplate {
            inner: core_prompt::build_first_turn_template_with_budget(
                &examples.inner,
                passage_char_budget,
            )
            .map_err(to_py_err)?,
        })
    }

    /// Renders the prompt for a target passage and prior queries; the result
    /// ends with the completion cue for the next turn.
    #[pyo3(signature = (target, prior_queries=Vec::new()))]
    fn render(&self, target: &PyPassage, prior_queries: Vec<String>) -> PyResult<String> {
        core_prompt::render_prompt(&self.inner, &target.inner, &prior_queries).map_err(to_py_err)
    }

    #[getter]
    fn text(&self) -> String {
        self.inner.text.clone()
    }

    #[getter]
    fn kind(&self) -> String {
        match self.inner.kind {
            core_prompt::TemplateKind::Full => "full".to_string(),
            core_prompt::TemplateKind::FirstTurn => "first_turn".to_string(),
        }
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}

/// Deterministic mock completion backend.
#[pyclass(name = "MockBackend")]
struct PyMockBackend {
    inner: core_gen::MockBackend,
}

#[pymethods]
impl PyMockBackend {
    #[new]
    fn new(seed: u64) -> Self {
        PyMockBackend {
            inner: core_gen::MockBackend::new(seed),
        }
    }

    #[pyo3(signature = (prompt, stop=vec!["\n".to_string()]))]
    fn complete(&self, prompt: &str, stop: Vec<String>) -> PyResult<String> {
        use core_gen::CompletionBackend;
        let params = core_gen::DecodingParams {
            stop,
            ..core_gen::DecodingParams::default()
        };
        self.inner.complete(prompt, &params).map_err(to_py_err)
    }
}

/// Generated conversations held as an opaque set, convertible to dicts.
#[pyclass(name = "ConversationSet")]
struct PyConversationSet {
    inner: Vec<core_gen::SyntheticConversation>,
}

#[pymethods]
impl PyConversationSet {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn to_list(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py_json(py, &self.inner)
    }

    /// Writes the conversations as JSONL, one per line.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let mut out = String::new();
        for conv in &self.inner {
            out.push_str(
                &serde_json::to_string(conv).map_err(|e| PyRuntimeError::new_err(e.to_string()))?,
            );
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConversationSet {
            inner: core_gen::load_conversations(&path).map_err(to_py_err)?,
        })
    }
}

/// Rejects degenerate candidate queries (length bounds, repeated 4-grams,
/// duplicates, near-duplicates, demonstration-format artifacts).
#[pyfunction]
#[pyo3(signature = (candidate, prior_queries=Vec::new()))]
fn is_degenerate(candidate: &str, prior_queries: Vec<String>) -> bool {
    core_gen::is_degenerate(candidate, &prior_queries)
}

/// Generates synthetic conversations with the mock backend and returns
/// `(conversations, report)`.
#[pyfunction]
#[pyo3(signature = (
    corpus, first_turn, full, backend, n_conversations, seed,
    turns_per_conversation=7, p_ps=0.3, max_regeneration_attempts=3
))]
#[allow(clippy::too_many_arguments)]
fn generate_dataset(
    py: Python<'_>,
    corpus: &PyCorpus,
    first_turn: &PyTemplate,
    full: &PyTemplate,
    backend: &PyMockBackend,
    n_conversations: usize,
    seed: u64,
    turns_per_conversation: usize,
    p_ps: f64,
    max_regeneration_attempts: u32,
) -> PyResult<(PyConversationSet, Py<PyAny>)> {
    let cfg = core_gen::GenerationConfig {
        turns_per_conversation,
        p_ps,
        max_regeneration_attempts,
        seed,
    };
    let params = core_gen::DecodingParams::default();
    let mut sink: Vec<u8> = Vec::new();
    let report = core_gen::generate_dataset(
        &corpus.inner,
        &first_turn.inner,
        &full.inner,
        &backend.inner,
        &cfg,
        &params,
        n_conversations,
        &mut sink,
    )
    .map_err(to_py_err)?;
    let mut conversations = Vec::new();
    for line in String::from_utf8_lossy(&sink).lines() {
        if line.trim().is_empty() {
            continue;
        }
        conversations.push(
            serde_json::from_str(line).map_err(|e| PyRuntimeError::new_err(e.to_string()))?,
        );
    }
    Ok((
        PyConversationSet {
            inner: conversations,
        },
        to_py_json(py, &report)?,
    ))
}

fn pairs_to_core(pairs: Vec<(String, String)>) -> Vec<core_retriever::TrainingPair> {
    pairs
        .into_iter()
        .map(|(query_context, positive_id)| core_retriever::TrainingPair {
            query_context,
            positive_id,
        })
        .collect()
}

fn pairs_from_core(pairs: &[core_retriever::TrainingPair]) -> Vec<(String, String)> {
    pairs
        .iter()
        .map(|p| (p.query_context.clone(), p.positive_id.clone()))
        .collect()
}

/// Expands conversations into `(query_context, positive_id)` training pairs.
#[pyfunction]
fn pairs_from_conversations(
    conversations: &PyConversationSet,
    corpus: &PyCorpus,
) -> PyResult<Vec<(String, String)>> {
    let pairs = core_filter::pairs_from_conversations(&conversations.inner, &corpus.inner)
        .map_err(to_py_err)?;
    Ok(pairs_from_core(&pairs))
}

/// Hashed bag-of-tokens features as `(index, value)` entries.
#[pyfunction]
fn featurize(text: &str) -> Vec<(u32, f64)> {
    core_retriever::featurize(text).entries().to_vec()
}

/// Dot product of two embeddings.
#[pyfunction]
fn similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    core_retriever::similarity(&a, &b).map_err(to_py_err)
}

/// Linear dual-encoder model.
#[pyclass(name = "DualEncoderModel")]
struct PyModel {
    inner: core_retriever::DualEncoderModel,
}

fn train_config(
    batch_size: usize,
    learning_rate: f64,
    epochs: usize,
    embedding_dim: usize,
    seed: u64,
) -> core_retriever::TrainConfig {
    core_retriever::TrainConfig {
        batch_size,
        learning_rate,
        epochs,
        embedding_dim,
        seed,
    }
}

#[pymethods]
impl PyModel {
    /// Trains on `(query_context, positive_id)` pairs with in-batch
    /// negatives; returns `(model, epoch_losses)`.
    #[staticmethod]
    #[pyo3(signature = (pairs, corpus, seed=0, batch_size=64, learning_rate=2e-2, epochs=10, embedding_dim=128))]
    fn train(
        pairs: Vec<(String, String)>,
        corpus: &PyCorpus,
        seed: u64,
        batch_size: usize,
        learning_rate: f64,
        epochs: usize,
        embedding_dim: usize,
    ) -> PyResult<(Self, Vec<f64>)> {
        let cfg = train_config(batch_size, learning_rate, epochs, embedding_dim, seed);
        let (model, trace) =
            core_retriever::train(&pairs_to_core(pairs), &corpus.inner, &cfg).map_err(to_py_err)?;
        Ok((PyModel { inner: model }, trace.epoch_losses))
    }

    #[staticmethod]
    fn seeded(embedding_dim: usize, seed: u64) -> Self {
        PyModel {
            inner: core_retriever::DualEncoderModel::new_seeded(embedding_dim, seed),
        }
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn encode_query(&self, history: Vec<String>) -> Vec<f64> {
        self.inner.encode_query(&history)
    }

    fn encode_context(&self, context: &str) -> Vec<f64> {
        self.inner.encode_context(context)
    }

    fn encode_passage(&self, passage: &PyPassage) -> Vec<f64> {
        self.inner.encode_passage(&passage.inner)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: core_retriever::DualEncoderModel::load(&path).map_err(to_py_err)?,
        })
    }
}

/// Exact dense index over the corpus.
#[pyclass(name = "DenseIndex")]
struct PyIndex {
    inner: core_retriever::DenseIndex,
}

#[pymethods]
impl PyIndex {
    #[staticmethod]
    fn build(model: &PyModel, corpus: &PyCorpus) -> PyResult<Self> {
        Ok(PyIndex {
            inner: core_retriever::build_index(&model.inner, &corpus.inner).map_err(to_py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Top-k passage ids with scores, ties broken by corpus position.
    fn search(&self, query_emb: Vec<f64>, k: usize) -> PyResult<Vec<(String, f64)>> {
        core_retriever::search(&self.inner, &query_emb, k).map_err(to_py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyIndex {
            inner: core_retriever::DenseIndex::load(&path).map_err(to_py_err)?,
        })
    }
}

/// Round-trip consistency filtering: trains an initial retriever on all
/// pairs and keeps a pair iff its positive ranks in the top k. Returns
/// `(kept, quarantined, report, initial_model)`.
#[pyfunction]
#[pyo3(signature = (pairs, corpus, top_k=5, seed=0, batch_size=64, learning_rate=2e-2, epochs=10, embedding_dim=128))]
#[allow(clippy::too_many_arguments)]
fn consistency_filter(
    py: Python<'_>,
    pairs: Vec<(String, String)>,
    corpus: &PyCorpus,
    top_k: usize,
    seed: u64,
    batch_size: usize,
    learning_rate: f64,
    epochs: usize,
    embedding_dim: usize,
) -> PyResult<(
    Vec<(String, String)>,
    Vec<(String, String)>,
    Py<PyAny>,
    PyModel,
)> {
    let cfg = core_filter::FilterConfig { top_k };
    let tcfg = train_config(batch_size, learning_rate, epochs, embedding_dim, seed);
    let outcome =
        core_filter::consistency_filter(&pairs_to_core(pairs), &corpus.inner, &cfg, &tcfg)
            .map_err(to_py_err)?;
    Ok((
        pairs_from_core(&outcome.kept),
        pairs_from_core(&outcome.quarantined),
        to_py_json(py, &outcome.report)?,
        PyModel {
            inner: outcome.initial_model,
        },
    ))
}

/// Scores TREC run and qrels files; returns the evaluation report as a dict.
#[pyfunction]
#[pyo3(signature = (run_path, qrels_path, metrics, rel_threshold=1))]
fn evaluate_run(
    py: Python<'_>,
    run_path: PathBuf,
    qrels_path: PathBuf,
    metrics: Vec<String>,
    rel_threshold: u32,
) -> PyResult<Py<PyAny>> {
    let metrics = metrics
        .iter()
        .map(|m| core_eval::Metric::parse(m))
        .collect::<Result<Vec<_>, _>>()
        .map_err(to_py_err)?;
    let report = core_eval::evaluate_run(&run_path, &qrels_path, &metrics, rel_threshold)
        .map_err(to_py_err)?;
    to_py_json(py, &report)
}

/// Scores in-memory ranked lists against in-memory judgments.
/// `lists` is `[(qid, [(doc_id, score), ...]), ...]`; `qrels` is
/// `[(qid, doc_id, grade), ...]`.
#[pyfunction]
#[pyo3(signature = (lists, qrels, metrics, rel_threshold=1))]
fn evaluate_lists(
    py: Python<'_>,
    lists: Vec<(String, Vec<(String, f64)>)>,
    qrels: Vec<(String, String, u32)>,
    metrics: Vec<String>,
    rel_threshold: u32,
) -> PyResult<Py<PyAny>> {
    let metrics = metrics
        .iter()
        .map(|m| core_eval::Metric::parse(m))
        .collect::<Result<Vec<_>, _>>()
        .map_err(to_py_err)?;
    let lists: Vec<core_eval::RankedList> = lists
        .into_iter()
        .map(|(qid, entries)| core_eval::RankedList::new(qid, entries))
        .collect();
    let mut judged = core_eval::Qrels::new();
    for (qid, doc, grade) in &qrels {
        judged.insert(qid, doc, *grade);
    }
    let report = core_eval::compute_report(&lists, &judged, &metrics, rel_threshold)
        .map_err(to_py_err)?;
    to_py_json(py, &report)
}

/// Writes ranked lists as a TREC run file.
#[pyfunction]
#[pyo3(signature = (lists, path, tag="convsearch"))]
fn write_run(lists: Vec<(String, Vec<(String, f64)>)>, path: PathBuf, tag: &str) -> PyResult<()> {
    let lists: Vec<core_eval::RankedList> = lists
        .into_iter()
        .map(|(qid, entries)| core_eval::RankedList::new(qid, entries))
        .collect();
    core_eval::write_run(&lists, &path, tag).map_err(to_py_err)
}

#[pymodule]
fn convsearch_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPassage>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyFewShotSet>()?;
    m.add_class::<PyTemplate>()?;
    m.add_class::<PyMockBackend>()?;
    m.add_class::<PyConversationSet>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyIndex>()?;
    m.add_function(wrap_pyfunction!(is_degenerate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(pairs_from_conversations, m)?)?;
    m.add_function(wrap_pyfunction!(featurize, m)?)?;
    m.add_function(wrap_pyfunction!(similarity, m)?)?;
    m.add_function(wrap_pyfunction!(consistency_filter, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_run, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_lists, m)?)?;
    m.add_function(wrap_pyfunction!(write_run, m)?)?;
    Ok(())
}
