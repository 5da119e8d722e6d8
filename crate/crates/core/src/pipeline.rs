//! Pipeline orchestration: one structured configuration, per-stage commands,
//! timestamped run directories, and a content-hash manifest that makes
//! reruns with unchanged inputs a no-op.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{load_corpus, Corpus, CorpusFormat};
use crate::error::{Error, Result};
use crate::eval::{evaluate_run, EvalReport, Metric, RankedList};
use crate::filter::{
    consistency_filter, load_pairs, pairs_from_conversations, save_pairs, FilterConfig,
};
use crate::generator::{
    generate_dataset, load_conversations, CompletionBackend, DecodingParams, GenerationConfig,
    HttpBackend, MockBackend,
};
use crate::prompt::{
    build_first_turn_template_with_budget, build_full_template_with_budget, FewShotSet, Template,
    DEFAULT_PASSAGE_CHAR_BUDGET,
};
use crate::retriever::{build_index, search, train, DualEncoderModel, TrainConfig};
use crate::seeding::derive_seed;

pub const DIALOGUES_FILE: &str = "dialogues.jsonl";
pub const GENERATION_REPORT_FILE: &str = "generation_report.json";
pub const TEMPLATE_FIRST_FILE: &str = "template_first_turn.txt";
pub const TEMPLATE_FULL_FILE: &str = "template_full.txt";
pub const PAIRS_ALL_FILE: &str = "pairs_all.jsonl";
pub const PAIRS_KEPT_FILE: &str = "pairs_kept.jsonl";
pub const PAIRS_QUARANTINE_FILE: &str = "pairs_quarantine.jsonl";
pub const FILTER_REPORT_FILE: &str = "filter_report.json";
pub const INITIAL_MODEL_FILE: &str = "initial_model.bin";
pub const MODEL_FILE: &str = "model.bin";
pub const LOSS_TRACE_FILE: &str = "loss_trace.json";
pub const INDEX_FILE: &str = "index.bin";
pub const RUN_FILE: &str = "run.trec";
pub const EVAL_REPORT_JSON: &str = "eval_report.json";
pub const EVAL_REPORT_TXT: &str = "eval_report.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LATEST_POINTER: &str = "LATEST";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSection {
    pub path: PathBuf,
    pub format: CorpusFormat,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExamplesSection {
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendSection {
    pub kind: BackendKind,
    #[serde(default)]
    pub url: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env: String,
}

impl Default for BackendSection {
    fn default() -> Self {
        BackendSection {
            kind: BackendKind::Mock,
            url: String::new(),
            auth_env: String::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSection {
    pub conversations: usize,
    pub turns_per_conversation: usize,
    pub p_ps: f64,
    pub max_regeneration_attempts: u32,
}

impl Default for GenerationSection {
    fn default() -> Self {
        GenerationSection {
            conversations: 50,
            turns_per_conversation: 7,
            p_ps: 0.3,
            max_regeneration_attempts: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptSection {
    pub passage_char_budget: usize,
}

impl Default for PromptSection {
    fn default() -> Self {
        PromptSection {
            passage_char_budget: DEFAULT_PASSAGE_CHAR_BUDGET,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub embedding_dim: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            epochs: d.epochs,
            embedding_dim: d.embedding_dim,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrieveSection {
    pub queries_path: Option<PathBuf>,
    pub k: usize,
    pub run_tag: String,
}

impl Default for RetrieveSection {
    fn default() -> Self {
        RetrieveSection {
            queries_path: None,
            k: 100,
            run_tag: "convsearch".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub qrels_path: Option<PathBuf>,
    /// Run file to score; defaults to the run dir's `run.trec`.
    pub run_path: Option<PathBuf>,
    pub metrics: Vec<String>,
    pub rel_threshold: u32,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            qrels_path: None,
            run_path: None,
            metrics: ["mrr@5", "r@5", "map@10", "mrr", "ndcg@3"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            rel_threshold: 1,
        }
    }
}

/// The single structured configuration driving every subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Global seed; every random stream in the pipeline derives from it.
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub corpus: CorpusSection,
    pub examples: ExamplesSection,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub generation: GenerationSection,
    #[serde(default)]
    pub decoding: DecodingParams,
    #[serde(default)]
    pub prompt: PromptSection,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub retrieve: RetrieveSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_workers() -> usize {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Loads the TOML config and applies dotted-name overrides
/// (`generation.p_ps=0.5`). Override values parse as JSON scalars first and
/// fall back to plain strings.
pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<PipelineConfig> {
    let content = fs::read_to_string(path)
        .map_err(|e| Error::validation(format!("cannot read config {}: {e}", path.display())))?;
    let value: toml::Value = toml::from_str(&content)
        .map_err(|e| Error::validation(format!("bad config {}: {e}", path.display())))?;
    let mut json = serde_json::to_value(&value)?;
    for (key, raw) in overrides {
        apply_override(&mut json, key, raw)?;
    }
    let config: PipelineConfig = serde_json::from_value(json)
        .map_err(|e| Error::validation(format!("bad config {}: {e}", path.display())))?;
    Ok(config)
}

fn apply_override(root: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let parsed: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut cursor = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cursor.as_object_mut().ok_or_else(|| {
            Error::validation(format!("override {key:?} does not address an object"))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        cursor = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Ok(())
}

impl PipelineConfig {
    fn require_file(path: &Path, what: &str) -> Result<()> {
        if !path.is_file() {
            return Err(Error::validation(format!(
                "{what} {} does not exist",
                path.display()
            )));
        }
        Ok(())
    }

    fn validate_common(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::validation("workers must be >= 1"));
        }
        Self::require_file(&self.corpus.path, "corpus file")?;
        Ok(())
    }

    pub fn validate_for_generate(&self) -> Result<()> {
        self.validate_common()?;
        Self::require_file(&self.examples.path, "examples file")?;
        if self.generation.conversations == 0 {
            return Err(Error::validation("generation.conversations must be >= 1"));
        }
        self.generation_config().validate()?;
        self.decoding.validate()?;
        if self.prompt.passage_char_budget == 0 {
            return Err(Error::validation("prompt.passage_char_budget must be >= 1"));
        }
        if self.backend.kind == BackendKind::Http && self.backend.url.is_empty() {
            return Err(Error::validation("backend.url is required for the http backend"));
        }
        Ok(())
    }

    pub fn validate_for_filter(&self) -> Result<()> {
        self.validate_common()?;
        self.filter.validate()?;
        self.train_config(0).validate()
    }

    pub fn validate_for_train(&self) -> Result<()> {
        self.validate_common()?;
        self.train_config(0).validate()
    }

    pub fn validate_for_retrieve(&self) -> Result<()> {
        self.validate_common()?;
        if self.retrieve.k == 0 {
            return Err(Error::validation("retrieve.k must be >= 1"));
        }
        let queries = self
            .retrieve
            .queries_path
            .as_ref()
            .ok_or_else(|| Error::validation("retrieve.queries_path is not set"))?;
        Self::require_file(queries, "queries file")
    }

    pub fn validate_for_evaluate(&self) -> Result<()> {
        let qrels = self
            .eval
            .qrels_path
            .as_ref()
            .ok_or_else(|| Error::validation("eval.qrels_path is not set"))?;
        Self::require_file(qrels, "qrels file")?;
        self.parse_metrics().map(|_| ())
    }

    pub fn validate_for_pipeline(&self) -> Result<()> {
        self.validate_for_generate()?;
        self.validate_for_filter()?;
        self.validate_for_train()?;
        self.validate_for_retrieve()?;
        self.validate_for_evaluate()
    }

    fn parse_metrics(&self) -> Result<Vec<Metric>> {
        if self.eval.metrics.is_empty() {
            return Err(Error::validation("eval.metrics is empty"));
        }
        self.eval.metrics.iter().map(|m| Metric::parse(m)).collect()
    }

    fn generation_config(&self) -> GenerationConfig {
        GenerationConfig {
            turns_per_conversation: self.generation.turns_per_conversation,
            p_ps: self.generation.p_ps,
            max_regeneration_attempts: self.generation.max_regeneration_attempts,
            seed: derive_seed(self.seed, "generate", 0),
        }
    }

    fn train_config(&self, stage: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            embedding_dim: self.train.embedding_dim,
            seed: derive_seed(self.seed, "train", stage),
        }
    }

    fn make_backend(&self) -> Result<Box<dyn CompletionBackend>> {
        match self.backend.kind {
            BackendKind::Mock => Ok(Box::new(MockBackend::new(derive_seed(
                self.seed, "backend", 0,
            )))),
            BackendKind::Http => {
                let auth = if self.backend.auth_env.is_empty() {
                    None
                } else {
                    Some(self.backend.auth_env.as_str())
                };
                Ok(Box::new(HttpBackend::new(self.backend.url.clone(), auth)?))
            }
        }
    }

    fn load_templates(&self) -> Result<(Template, Template)> {
        let examples = FewShotSet::load(&self.examples.path)?;
        let budget = self.prompt.passage_char_budget;
        Ok((
            build_first_turn_template_with_budget(&examples, budget)?,
            build_full_template_with_budget(&examples, budget)?,
        ))
    }

    fn load_corpus(&self) -> Result<Corpus> {
        load_corpus(&self.corpus.path, self.corpus.format)
    }
}

/// One conversational evaluation query: an id plus the full ordered history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryRecord {
    pub qid: String,
    pub history: Vec<String>,
}

/// Loads conversational queries from JSONL (`{"qid", "history"}` per line).
pub fn load_queries(path: &Path) -> Result<Vec<QueryRecord>> {
    let content = fs::read_to_string(path)
        .map_err(|e| Error::validation(format!("cannot open queries {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: QueryRecord = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, idx + 1, format!("bad query record: {e}")))?;
        if record.history.is_empty() {
            return Err(Error::parse(path, idx + 1, "query record has empty history"));
        }
        out.push(record);
    }
    if out.is_empty() {
        return Err(Error::data(format!("queries file {} is empty", path.display())));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Content hashes of every stage's inputs and outputs, relative to the run
/// directory. Carries no timestamps, so identical runs produce identical
/// manifests.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(run_dir: &Path) -> Result<Manifest> {
        let path = run_dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Ok(Manifest::default());
        }
        let content = fs::read_to_string(&path)?;
        serde_json::from_str(&content)
            .map_err(|e| Error::data(format!("corrupt manifest {}: {e}", path.display())))
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    fn stage_up_to_date(
        &self,
        run_dir: &Path,
        stage: &str,
        inputs: &BTreeMap<String, String>,
    ) -> bool {
        match self.stages.get(stage) {
            Some(record) if record.inputs == *inputs => record
                .outputs
                .iter()
                .all(|(file, hash)| hash_file(&run_dir.join(file)).ok().as_ref() == Some(hash)),
            _ => false,
        }
    }

    fn record_stage(
        &mut self,
        run_dir: &Path,
        stage: &str,
        inputs: BTreeMap<String, String>,
        output_files: &[&str],
    ) -> Result<()> {
        let mut outputs = BTreeMap::new();
        for file in output_files {
            outputs.insert(file.to_string(), hash_file(&run_dir.join(file))?);
        }
        self.stages.insert(stage.to_string(), StageRecord { inputs, outputs });
        self.save(run_dir)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(sha256_hex(&bytes))
}

fn hash_config_sections(sections: &serde_json::Value) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(sections)?.as_bytes()))
}

// ---------------------------------------------------------------------------
// Run directories and logging
// ---------------------------------------------------------------------------

/// Creates a fresh timestamped run directory under the output dir and points
/// the LATEST file at it. Existing run directories are never touched.
pub fn prepare_run_dir(cfg: &PipelineConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir)?;
    let stamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let mut attempt = 0u32;
    loop {
        let name = if attempt == 0 {
            format!("run-{stamp}-seed{}", cfg.seed)
        } else {
            format!("run-{stamp}-seed{}-{attempt}", cfg.seed)
        };
        let dir = cfg.output_dir.join(&name);
        if !dir.exists() {
            fs::create_dir_all(&dir)?;
            point_latest(cfg, &dir)?;
            return Ok(dir);
        }
        attempt += 1;
    }
}

/// Registers an explicitly chosen run directory (creating it if needed).
pub fn use_run_dir(cfg: &PipelineConfig, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    point_latest(cfg, dir)?;
    Ok(dir.to_path_buf())
}

fn point_latest(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(
        cfg.output_dir.join(LATEST_POINTER),
        format!("{}\n", dir.display()),
    )?;
    Ok(())
}

/// Resolves the run directory recorded in the LATEST pointer.
pub fn latest_run_dir(cfg: &PipelineConfig) -> Result<PathBuf> {
    let pointer = cfg.output_dir.join(LATEST_POINTER);
    let content = fs::read_to_string(&pointer).map_err(|_| {
        Error::validation(format!(
            "no run directory given and no LATEST pointer at {}",
            pointer.display()
        ))
    })?;
    Ok(PathBuf::from(content.trim()))
}

fn log_stage(stage: &str, event: &str, extra: serde_json::Value) {
    let mut record = serde_json::json!({ "stage": stage, "event": event });
    if let (Some(obj), Some(extra)) = (record.as_object_mut(), extra.as_object()) {
        for (k, v) in extra {
            obj.insert(k.clone(), v.clone());
        }
    }
    eprintln!("{record}");
}

fn with_worker_pool<T: Send>(workers: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::validation(format!("cannot build worker pool: {e}")))?;
    pool.install(f)
}

// ---------------------------------------------------------------------------
// Stage commands
// ---------------------------------------------------------------------------

/// Generates the synthetic dialogues file and generation report.
pub fn cmd_generate(cfg: &PipelineConfig, run_dir: &Path) -> Result<()> {
    cfg.validate_for_generate()?;
    let started = SystemTime::now();
    fs::create_dir_all(run_dir)?;
    let mut manifest = Manifest::load(run_dir)?;

    let mut inputs = BTreeMap::new();
    inputs.insert(
        "config".to_string(),
        hash_config_sections(&serde_json::json!({
            "seed": cfg.seed,
            "corpus": cfg.corpus,
            "backend": cfg.backend,
            "generation": cfg.generation,
            "decoding": cfg.decoding,
            "prompt": cfg.prompt,
        }))?,
    );
    inputs.insert("corpus".to_string(), hash_file(&cfg.corpus.path)?);
    inputs.insert("examples".to_string(), hash_file(&cfg.examples.path)?);
    if manifest.stage_up_to_date(run_dir, "generate", &inputs) {
        log_stage("generate", "skipped", serde_json::json!({"reason": "up-to-date"}));
        return Ok(());
    }

    let corpus = cfg.load_corpus()?;
    let (t_first, t_full) = cfg.load_templates()?;
    t_first.save_text(&run_dir.join(TEMPLATE_FIRST_FILE))?;
    t_full.save_text(&run_dir.join(TEMPLATE_FULL_FILE))?;
    let backend = cfg.make_backend()?;
    let gen_cfg = cfg.generation_config();
    if corpus.len() < 2 && gen_cfg.p_ps > 0.0 {
        log_stage(
            "generate",
            "singleton-corpus",
            serde_json::json!({"note": "passage switching disabled: corpus has one passage"}),
        );
    }

    let dialogues_path = run_dir.join(DIALOGUES_FILE);
    let report = with_worker_pool(cfg.workers, || {
        let file = fs::File::create(&dialogues_path)?;
        let mut writer = BufWriter::new(file);
        generate_dataset(
            &corpus,
            &t_first,
            &t_full,
            backend.as_ref(),
            &gen_cfg,
            &cfg.decoding,
            cfg.generation.conversations,
            &mut writer,
        )
    })?;
    fs::write(
        run_dir.join(GENERATION_REPORT_FILE),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;

    let elapsed = started.elapsed().map(|d| d.as_millis()).unwrap_or(0);
    log_stage(
        "generate",
        "finished",
        serde_json::json!({
            "requested": report.requested,
            "emitted": report.emitted,
            "turns": report.turns_emitted,
            "backend_calls": report.backend_calls,
            "duration_ms": elapsed,
        }),
    );

    if let Some(message) = report.aborted {
        // Partial dialogues and the report are already on disk.
        return Err(Error::Backend {
            message: format!("generation aborted: {message}"),
            retriable: false,
            attempts: 0,
        });
    }
    manifest.record_stage(
        run_dir,
        "generate",
        inputs,
        &[
            DIALOGUES_FILE,
            GENERATION_REPORT_FILE,
            TEMPLATE_FIRST_FILE,
            TEMPLATE_FULL_FILE,
        ],
    )?;
    Ok(())
}

/// Expands dialogues into training pairs and runs consistency filtering.
pub fn cmd_filter(cfg: &PipelineConfig, run_dir: &Path) -> Result<()> {
    cfg.validate_for_filter()?;
    let dialogues_path = run_dir.join(DIALOGUES_FILE);
    PipelineConfig::require_file(&dialogues_path, "dialogues file")?;
    let started = SystemTime::now();
    let mut manifest = Manifest::load(run_dir)?;

    let mut inputs = BTreeMap::new();
    inputs.insert(
        "config".to_string(),
        hash_config_sections(&serde_json::json!({
            "seed": cfg.seed,
            "corpus": cfg.corpus,
            "filter": cfg.filter,
            "train": cfg.train,
        }))?,
    );
    inputs.insert("corpus".to_string(), hash_file(&cfg.corpus.path)?);
    inputs.insert("dialogues".to_string(), hash_file(&dialogues_path)?);
    if manifest.stage_up_to_date(run_dir, "filter", &inputs) {
        log_stage("filter", "skipped", serde_json::json!({"reason": "up-to-date"}));
        return Ok(());
    }

    let corpus = cfg.load_corpus()?;
    let conversations = load_conversations(&dialogues_path)?;
    let pairs = pairs_from_conversations(&conversations, &corpus)?;
    save_pairs(&pairs, &run_dir.join(PAIRS_ALL_FILE))?;

    let train_cfg = cfg.train_config(1);
    let outcome = with_worker_pool(cfg.workers, || {
        consistency_filter(&pairs, &corpus, &cfg.filter, &train_cfg)
    })?;
    save_pairs(&outcome.kept, &run_dir.join(PAIRS_KEPT_FILE))?;
    save_pairs(&outcome.quarantined, &run_dir.join(PAIRS_QUARANTINE_FILE))?;
    fs::write(
        run_dir.join(FILTER_REPORT_FILE),
        serde_json::to_string_pretty(&outcome.report)? + "\n",
    )?;
    outcome.initial_model.save(&run_dir.join(INITIAL_MODEL_FILE))?;

    let elapsed = started.elapsed().map(|d| d.as_millis()).unwrap_or(0);
    log_stage(
        "filter",
        "finished",
        serde_json::json!({
            "input": outcome.report.input,
            "kept": outcome.report.kept,
            "dropped": outcome.report.dropped,
            "duration_ms": elapsed,
        }),
    );
    manifest.record_stage(
        run_dir,
        "filter",
        inputs,
        &[
            PAIRS_ALL_FILE,
            PAIRS_KEPT_FILE,
            PAIRS_QUARANTINE_FILE,
            FILTER_REPORT_FILE,
            INITIAL_MODEL_FILE,
        ],
    )?;
    Ok(())
}

/// Trains the final retriever on the kept pairs.
pub fn cmd_train(cfg: &PipelineConfig, run_dir: &Path) -> Result<()> {
    cfg.validate_for_train()?;
    let pairs_path = run_dir.join(PAIRS_KEPT_FILE);
    PipelineConfig::require_file(&pairs_path, "kept-pairs file")?;
    let started = SystemTime::now();
    let mut manifest = Manifest::load(run_dir)?;

    let mut inputs = BTreeMap::new();
    inputs.insert(
        "config".to_string(),
        hash_config_sections(&serde_json::json!({
            "seed": cfg.seed,
            "corpus": cfg.corpus,
            "train": cfg.train,
        }))?,
    );
    inputs.insert("corpus".to_string(), hash_file(&cfg.corpus.path)?);
    inputs.insert("pairs".to_string(), hash_file(&pairs_path)?);
    if manifest.stage_up_to_date(run_dir, "train", &inputs) {
        log_stage("train", "skipped", serde_json::json!({"reason": "up-to-date"}));
        return Ok(());
    }

    let corpus = cfg.load_corpus()?;
    let pairs = load_pairs(&pairs_path)?;
    let train_cfg = cfg.train_config(2);
    let (model, trace) = train(&pairs, &corpus, &train_cfg)?;
    model.save(&run_dir.join(MODEL_FILE))?;
    fs::write(
        run_dir.join(LOSS_TRACE_FILE),
        serde_json::to_string_pretty(&trace)? + "\n",
    )?;

    let elapsed = started.elapsed().map(|d| d.as_millis()).unwrap_or(0);
    log_stage(
        "train",
        "finished",
        serde_json::json!({
            "pairs": pairs.len(),
            "epochs": train_cfg.epochs,
            "final_loss": trace.final_loss,
            "duration_ms": elapsed,
        }),
    );
    manifest.record_stage(run_dir, "train", inputs, &[MODEL_FILE, LOSS_TRACE_FILE])?;
    Ok(())
}

/// Embeds the corpus, searches every conversational query, and writes a TREC
/// run file.
pub fn cmd_retrieve(cfg: &PipelineConfig, run_dir: &Path) -> Result<()> {
    cfg.validate_for_retrieve()?;
    let model_path = run_dir.join(MODEL_FILE);
    PipelineConfig::require_file(&model_path, "model file")?;
    let queries_path = cfg.retrieve.queries_path.clone().expect("validated");
    let started = SystemTime::now();
    let mut manifest = Manifest::load(run_dir)?;

    let mut inputs = BTreeMap::new();
    inputs.insert(
        "config".to_string(),
        hash_config_sections(&serde_json::json!({
            "seed": cfg.seed,
            "corpus": cfg.corpus,
            "retrieve": cfg.retrieve,
        }))?,
    );
    inputs.insert("corpus".to_string(), hash_file(&cfg.corpus.path)?);
    inputs.insert("model".to_string(), hash_file(&model_path)?);
    inputs.insert("queries".to_string(), hash_file(&queries_path)?);
    if manifest.stage_up_to_date(run_dir, "retrieve", &inputs) {
        log_stage("retrieve", "skipped", serde_json::json!({"reason": "up-to-date"}));
        return Ok(());
    }

    let corpus = cfg.load_corpus()?;
    let model = DualEncoderModel::load(&model_path)?;
    let queries = load_queries(&queries_path)?;
    let (index, lists) = with_worker_pool(cfg.workers, || {
        let index = build_index(&model, &corpus)?;
        let lists: Vec<RankedList> = queries
            .par_iter()
            .map(|q| {
                let emb = model.encode_query(&q.history);
                let hits = search(&index, &emb, cfg.retrieve.k)?;
                Ok(RankedList::new(q.qid.clone(), hits))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((index, lists))
    })?;
    index.save(&run_dir.join(INDEX_FILE))?;
    crate::eval::write_run(&lists, &run_dir.join(RUN_FILE), &cfg.retrieve.run_tag)?;

    let elapsed = started.elapsed().map(|d| d.as_millis()).unwrap_or(0);
    log_stage(
        "retrieve",
        "finished",
        serde_json::json!({
            "queries": lists.len(),
            "k": cfg.retrieve.k,
            "passages": corpus.len(),
            "duration_ms": elapsed,
        }),
    );
    manifest.record_stage(run_dir, "retrieve", inputs, &[INDEX_FILE, RUN_FILE])?;
    Ok(())
}

/// Scores the run file against the qrels and writes the evaluation report.
pub fn cmd_evaluate(cfg: &PipelineConfig, run_dir: &Path) -> Result<EvalReport> {
    cfg.validate_for_evaluate()?;
    let run_path = cfg
        .eval
        .run_path
        .clone()
        .unwrap_or_else(|| run_dir.join(RUN_FILE));
    PipelineConfig::require_file(&run_path, "run file")?;
    let qrels_path = cfg.eval.qrels_path.clone().expect("validated");
    let started = SystemTime::now();
    let mut manifest = Manifest::load(run_dir)?;

    let mut inputs = BTreeMap::new();
    inputs.insert(
        "config".to_string(),
        hash_config_sections(&serde_json::json!({ "eval": cfg.eval }))?,
    );
    inputs.insert("run".to_string(), hash_file(&run_path)?);
    inputs.insert("qrels".to_string(), hash_file(&qrels_path)?);
    if manifest.stage_up_to_date(run_dir, "evaluate", &inputs) {
        log_stage("evaluate", "skipped", serde_json::json!({"reason": "up-to-date"}));
        let report = fs::read_to_string(run_dir.join(EVAL_REPORT_JSON))?;
        return serde_json::from_str(&report)
            .map_err(|e| Error::data(format!("corrupt evaluation report: {e}")));
    }

    let metrics = cfg.parse_metrics()?;
    let report = evaluate_run(&run_path, &qrels_path, &metrics, cfg.eval.rel_threshold)?;
    fs::write(
        run_dir.join(EVAL_REPORT_JSON),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    fs::write(run_dir.join(EVAL_REPORT_TXT), report.to_table())?;

    let elapsed = started.elapsed().map(|d| d.as_millis()).unwrap_or(0);
    log_stage(
        "evaluate",
        "finished",
        serde_json::json!({
            "queries": report.query_count,
            "metrics": report.metrics.len(),
            "duration_ms": elapsed,
        }),
    );
    manifest.record_stage(
        run_dir,
        "evaluate",
        inputs,
        &[EVAL_REPORT_JSON, EVAL_REPORT_TXT],
    )?;
    Ok(report)
}

/// Runs the full pipeline: generate, filter, train, retrieve, evaluate.
/// Stages whose recorded inputs and outputs are unchanged are skipped, so an
/// interrupted pipeline resumes where it stopped.
pub fn cmd_pipeline(cfg: &PipelineConfig, run_dir: &Path) -> Result<EvalReport> {
    cfg.validate_for_pipeline()?;
    cmd_generate(cfg, run_dir)?;
    cmd_filter(cfg, run_dir)?;
    cmd_train(cfg, run_dir)?;
    cmd_retrieve(cfg, run_dir)?;
    cmd_evaluate(cfg, run_dir)
}
