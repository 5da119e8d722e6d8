//! Round-trip consistency filtering.
//!
//! An initial retriever is trained on all synthetic pairs; a pair survives
//! only if its own positive passage shows up in the top-k retrieved for its
//! query context. Dropped pairs are quarantined rather than deleted so the
//! unfiltered dataset can be reconstructed.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::generator::SyntheticConversation;
use crate::retriever::{
    build_index, search, train, DenseIndex, DualEncoderModel, TrainConfig, TrainTrace,
    TrainingPair,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// A pair is kept when its positive ranks within the top k.
    pub top_k: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { top_k: 5 }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::validation("filter top_k must be >= 1"));
        }
        Ok(())
    }
}

/// Counters plus the rank-of-positive histogram (bucket "miss" for pairs
/// whose positive fell outside the top k).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterReport {
    pub input: usize,
    pub kept: usize,
    pub dropped: usize,
    pub top_k: usize,
    pub rank_histogram: BTreeMap<String, usize>,
}

/// Expands conversations into training pairs: one pair per turn, with the
/// query context being the concatenated history up to and including that
/// turn, grounded by that turn's passage.
pub fn pairs_from_conversations(
    conversations: &[SyntheticConversation],
    corpus: &Corpus,
) -> Result<Vec<TrainingPair>> {
    let mut pairs = Vec::new();
    for conv in conversations {
        let mut history = String::new();
        for turn in &conv.turns {
            if corpus.get(&turn.passage_id).is_none() {
                return Err(Error::data(format!(
                    "turn references unknown passage id {:?}",
                    turn.passage_id
                )));
            }
            if !history.is_empty() {
                history.push(' ');
            }
            history.push_str(&turn.query);
            pairs.push(TrainingPair {
                query_context: history.clone(),
                positive_id: turn.passage_id.clone(),
            });
        }
    }
    Ok(pairs)
}

/// Splits pairs into kept/quarantined against a frozen model and index.
/// Retrieval is parallel over pairs; output preserves input order.
pub fn filter_with_index(
    pairs: &[TrainingPair],
    model: &DualEncoderModel,
    index: &DenseIndex,
    top_k: usize,
) -> Result<(Vec<TrainingPair>, Vec<TrainingPair>, FilterReport)> {
    if top_k == 0 {
        return Err(Error::validation("filter top_k must be >= 1"));
    }
    let ranks: Vec<Option<usize>> = pairs
        .par_iter()
        .map(|pair| {
            let emb = model.encode_context(&pair.query_context);
            let hits = search(index, &emb, top_k)?;
            Ok(hits
                .iter()
                .position(|(id, _)| *id == pair.positive_id)
                .map(|pos| pos + 1))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut kept = Vec::new();
    let mut quarantined = Vec::new();
    let mut histogram: BTreeMap<String, usize> = BTreeMap::new();
    for (pair, rank) in pairs.iter().zip(&ranks) {
        match rank {
            Some(r) => {
                *histogram.entry(r.to_string()).or_insert(0) += 1;
                kept.push(pair.clone());
            }
            None => {
                *histogram.entry("miss".to_string()).or_insert(0) += 1;
                quarantined.push(pair.clone());
            }
        }
    }
    let report = FilterReport {
        input: pairs.len(),
        kept: kept.len(),
        dropped: quarantined.len(),
        top_k,
        rank_histogram: histogram,
    };
    Ok((kept, quarantined, report))
}

/// Everything produced by one consistency-filtering pass.
#[derive(Debug)]
pub struct FilterOutcome {
    pub kept: Vec<TrainingPair>,
    pub quarantined: Vec<TrainingPair>,
    pub report: FilterReport,
    pub initial_model: DualEncoderModel,
    pub train_trace: TrainTrace,
}

/// Trains the initial retriever on all pairs, indexes the corpus, and keeps
/// each pair iff its positive appears in the top `cfg.top_k` for its query
/// context.
pub fn consistency_filter(
    pairs: &[TrainingPair],
    corpus: &Corpus,
    cfg: &FilterConfig,
    train_cfg: &TrainConfig,
) -> Result<FilterOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::data("consistency filter needs at least one pair"));
    }
    let (initial_model, train_trace) = train(pairs, corpus, train_cfg)?;
    let index = build_index(&initial_model, corpus)?;
    let (kept, quarantined, report) = filter_with_index(pairs, &initial_model, &index, cfg.top_k)?;
    Ok(FilterOutcome {
        kept,
        quarantined,
        report,
        initial_model,
        train_trace,
    })
}

/// Reads a pairs JSONL file (`{"query_context", "positive_id"}` per line).
pub fn load_pairs(path: &std::path::Path) -> Result<Vec<TrainingPair>> {
    let content = std::fs::read_to_string(path).map_err(|e| {
        Error::validation(format!("cannot open pairs file {}: {e}", path.display()))
    })?;
    let mut pairs = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: TrainingPair = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, idx + 1, format!("bad pair: {e}")))?;
        pairs.push(pair);
    }
    Ok(pairs)
}

/// Writes pairs as JSONL.
pub fn save_pairs(pairs: &[TrainingPair], path: &std::path::Path) -> Result<()> {
    let mut out = String::new();
    for pair in pairs {
        out.push_str(&serde_json::to_string(pair)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
