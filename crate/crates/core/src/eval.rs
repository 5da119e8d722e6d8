//! Retrieval evaluation: MRR@k, Recall@k, MAP@k, NDCG@k over TREC-format
//! run and qrels files.
//!
//! Binary metrics treat a passage as relevant when its grade reaches
//! `rel_threshold` (default 1). NDCG uses linear gain with a log2(i+1)
//! discount. Queries that cannot be scored (absent from the qrels, no
//! relevant passage, or zero IDCG) are excluded from the mean and counted.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_REL_THRESHOLD: u32 = 1;

/// Graded relevance judgments: query id -> passage id -> grade.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Qrels {
    map: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Qrels::default()
    }

    pub fn insert(&mut self, query_id: &str, passage_id: &str, grade: u32) {
        self.map
            .entry(query_id.to_string())
            .or_default()
            .insert(passage_id.to_string(), grade);
    }

    pub fn judgments(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.map.get(query_id)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// One query's ranked passages, descending by score.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<(String, f64)>,
}

impl RankedList {
    pub fn new(query_id: impl Into<String>, entries: Vec<(String, f64)>) -> Self {
        RankedList {
            query_id: query_id.into(),
            entries,
        }
    }

    pub fn depth(&self) -> usize {
        self.entries.len()
    }
}

/// Parses TREC qrels: `qid 0 docid grade`, whitespace-separated.
pub fn parse_qrels(path: &Path) -> Result<Qrels> {
    let content = fs::read_to_string(path)
        .map_err(|e| Error::validation(format!("cannot open qrels {}: {e}", path.display())))?;
    let mut qrels = Qrels::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (idx, line) in content.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let grade: u32 = fields[3]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad grade {:?}", fields[3])))?;
        if !seen.insert((fields[0].to_string(), fields[2].to_string())) {
            return Err(Error::parse(
                path,
                lineno,
                format!("duplicate judgment for ({}, {})", fields[0], fields[2]),
            ));
        }
        qrels.insert(fields[0], fields[2], grade);
    }
    Ok(qrels)
}

/// Parses a TREC run: `qid Q0 docid rank score tag`. Entries are re-sorted by
/// descending score (ties by ascending rank), and a duplicate (qid, docid) is
/// an error.
pub fn parse_run(path: &Path) -> Result<Vec<RankedList>> {
    let content = fs::read_to_string(path)
        .map_err(|e| Error::validation(format!("cannot open run {}: {e}", path.display())))?;
    let mut order: Vec<String> = Vec::new();
    let mut per_query: BTreeMap<String, Vec<(String, f64, u64)>> = BTreeMap::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    for (idx, line) in content.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 6 fields, found {}", fields.len()),
            ));
        }
        let rank: u64 = fields[3]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad rank {:?}", fields[3])))?;
        let score: f64 = fields[4]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad score {:?}", fields[4])))?;
        if !score.is_finite() {
            return Err(Error::parse(path, lineno, "non-finite score"));
        }
        if !seen.insert((fields[0].to_string(), fields[2].to_string())) {
            return Err(Error::parse(
                path,
                lineno,
                format!("duplicate entry for ({}, {})", fields[0], fields[2]),
            ));
        }
        if !per_query.contains_key(fields[0]) {
            order.push(fields[0].to_string());
        }
        per_query
            .entry(fields[0].to_string())
            .or_default()
            .push((fields[2].to_string(), score, rank));
    }
    let mut lists = Vec::with_capacity(order.len());
    for qid in order {
        let mut entries = per_query.remove(&qid).unwrap();
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.2.cmp(&b.2)));
        lists.push(RankedList {
            query_id: qid,
            entries: entries.into_iter().map(|(d, s, _)| (d, s)).collect(),
        });
    }
    Ok(lists)
}

/// Writes ranked lists as a TREC run file.
pub fn write_run(lists: &[RankedList], path: &Path, tag: &str) -> Result<()> {
    let mut out = String::new();
    for list in lists {
        for (rank, (docid, score)) in list.entries.iter().enumerate() {
            writeln!(out, "{} Q0 {} {} {} {}", list.query_id, docid, rank + 1, score, tag)
                .expect("string write");
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn relevant_set<'q>(rels: &'q BTreeMap<String, u32>, threshold: u32) -> HashSet<&'q str> {
    rels.iter()
        .filter(|(_, &g)| g >= threshold)
        .map(|(id, _)| id.as_str())
        .collect()
}

/// Reciprocal rank of the first relevant passage within the top k; 0 when no
/// relevant passage is retrieved. `None` when the query has no relevant
/// passage at all (excluded from means).
pub fn mrr_at_k(run: &RankedList, qrels: &Qrels, k: usize, rel_threshold: u32) -> Option<f64> {
    let rels = qrels.judgments(&run.query_id)?;
    let relevant = relevant_set(rels, rel_threshold);
    if relevant.is_empty() {
        return None;
    }
    for (i, (docid, _)) in run.entries.iter().take(k).enumerate() {
        if relevant.contains(docid.as_str()) {
            return Some(1.0 / (i + 1) as f64);
        }
    }
    Some(0.0)
}

/// Fraction of the query's relevant passages retrieved within the top k.
pub fn recall_at_k(run: &RankedList, qrels: &Qrels, k: usize, rel_threshold: u32) -> Option<f64> {
    let rels = qrels.judgments(&run.query_id)?;
    let relevant = relevant_set(rels, rel_threshold);
    if relevant.is_empty() {
        return None;
    }
    let hit = run
        .entries
        .iter()
        .take(k)
        .filter(|(docid, _)| relevant.contains(docid.as_str()))
        .count();
    Some(hit as f64 / relevant.len() as f64)
}

/// Mean average precision at k: sum of precision@r over relevant retrieved
/// ranks r <= k, divided by the total number of relevant passages.
pub fn map_at_k(run: &RankedList, qrels: &Qrels, k: usize, rel_threshold: u32) -> Option<f64> {
    let rels = qrels.judgments(&run.query_id)?;
    let relevant = relevant_set(rels, rel_threshold);
    if relevant.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, (docid, _)) in run.entries.iter().take(k).enumerate() {
        if relevant.contains(docid.as_str()) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / relevant.len() as f64)
}

/// NDCG at k with linear gain and log2(i+1) discount. The ideal DCG is
/// computed over all judged grades (no cutoff), which keeps NDCG@k monotone
/// non-decreasing in k. `None` when the ideal DCG is zero (no positively
/// graded passage).
pub fn ndcg_at_k(run: &RankedList, qrels: &Qrels, k: usize) -> Option<f64> {
    let rels = qrels.judgments(&run.query_id)?;
    let mut ideal: Vec<u32> = rels.values().copied().collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .enumerate()
        .map(|(i, &g)| g as f64 / ((i + 2) as f64).log2())
        .sum();
    if idcg == 0.0 {
        return None;
    }
    let dcg: f64 = run
        .entries
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, (docid, _))| {
            let g = rels.get(docid).copied().unwrap_or(0);
            g as f64 / ((i + 2) as f64).log2()
        })
        .sum();
    Some(dcg / idcg)
}

/// A metric selector. `Mrr { k: None }` means MRR without a cutoff, i.e. the
/// cutoff is each query's run depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Mrr { k: Option<usize> },
    Recall { k: usize },
    Map { k: usize },
    Ndcg { k: usize },
}

impl Metric {
    pub fn parse(spec: &str) -> Result<Metric> {
        let spec = spec.trim().to_ascii_lowercase();
        let (name, k) = match spec.split_once('@') {
            Some((name, k)) => {
                let k: usize = k.parse().map_err(|_| {
                    Error::validation(format!("bad metric cutoff in {spec:?}"))
                })?;
                if k == 0 {
                    return Err(Error::validation(format!("cutoff must be >= 1 in {spec:?}")));
                }
                (name.to_string(), Some(k))
            }
            None => (spec.clone(), None),
        };
        match (name.as_str(), k) {
            ("mrr", k) => Ok(Metric::Mrr { k }),
            ("r" | "recall", Some(k)) => Ok(Metric::Recall { k }),
            ("map", Some(k)) => Ok(Metric::Map { k }),
            ("ndcg", Some(k)) => Ok(Metric::Ndcg { k }),
            _ => Err(Error::validation(format!("unknown metric {spec:?}"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Metric::Mrr { k: None } => "mrr".to_string(),
            Metric::Mrr { k: Some(k) } => format!("mrr@{k}"),
            Metric::Recall { k } => format!("r@{k}"),
            Metric::Map { k } => format!("map@{k}"),
            Metric::Ndcg { k } => format!("ndcg@{k}"),
        }
    }

    fn score(&self, run: &RankedList, qrels: &Qrels, rel_threshold: u32) -> Option<f64> {
        match *self {
            Metric::Mrr { k } => mrr_at_k(run, qrels, k.unwrap_or(run.depth()), rel_threshold),
            Metric::Recall { k } => recall_at_k(run, qrels, k, rel_threshold),
            Metric::Map { k } => map_at_k(run, qrels, k, rel_threshold),
            Metric::Ndcg { k } => ndcg_at_k(run, qrels, k),
        }
    }
}

/// One metric's aggregate over a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricSummary {
    /// Mean over evaluated queries, rounded to 4 decimal places.
    pub mean: f64,
    pub evaluated: usize,
    pub excluded: usize,
    pub per_query: BTreeMap<String, f64>,
}

/// Full evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub query_count: usize,
    pub rel_threshold: u32,
    pub metrics: BTreeMap<String, MetricSummary>,
}

fn round4(v: f64) -> f64 {
    (v * 10_000.0).round() / 10_000.0
}

/// Scores every metric over every ranked list.
pub fn compute_report(
    lists: &[RankedList],
    qrels: &Qrels,
    metrics: &[Metric],
    rel_threshold: u32,
) -> Result<EvalReport> {
    if lists.is_empty() {
        return Err(Error::data("no evaluable queries: run is empty"));
    }
    if metrics.is_empty() {
        return Err(Error::validation("no metrics requested"));
    }
    if !lists
        .iter()
        .any(|l| qrels.judgments(&l.query_id).is_some())
    {
        return Err(Error::data(
            "no evaluable queries: run and qrels share no query ids",
        ));
    }
    let mut out = BTreeMap::new();
    for metric in metrics {
        let mut per_query = BTreeMap::new();
        let mut excluded = 0usize;
        for list in lists {
            match metric.score(list, qrels, rel_threshold) {
                Some(v) => {
                    per_query.insert(list.query_id.clone(), v);
                }
                None => excluded += 1,
            }
        }
        let evaluated = per_query.len();
        let mean = if evaluated > 0 {
            round4(per_query.values().sum::<f64>() / evaluated as f64)
        } else {
            0.0
        };
        out.insert(
            metric.name(),
            MetricSummary {
                mean,
                evaluated,
                excluded,
                per_query,
            },
        );
    }
    Ok(EvalReport {
        query_count: lists.len(),
        rel_threshold,
        metrics: out,
    })
}

/// Loads a run and qrels from disk and scores the requested metrics.
pub fn evaluate_run(
    run_path: &Path,
    qrels_path: &Path,
    metrics: &[Metric],
    rel_threshold: u32,
) -> Result<EvalReport> {
    let lists = parse_run(run_path)?;
    let qrels = parse_qrels(qrels_path)?;
    compute_report(&lists, &qrels, metrics, rel_threshold)
}

impl EvalReport {
    /// Aligned plain-text table, one row per metric.
    pub fn to_table(&self) -> String {
        let name_w = self
            .metrics
            .keys()
            .map(String::len)
            .max()
            .unwrap_or(6)
            .max("metric".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:<name_w$}  {:>8}  {:>9}  {:>8}", "metric", "mean", "evaluated", "excluded");
        for (name, summary) in &self.metrics {
            let _ = writeln!(
                out,
                "{:<name_w$}  {:>8.4}  {:>9}  {:>8}",
                name, summary.mean, summary.evaluated, summary.excluded
            );
        }
        out
    }
}
