//! Passage corpus: loading, sampling, and related-passage lookup.
//!
//! The corpus is immutable after load. Iteration order is insertion order,
//! so every downstream artifact that walks the corpus is deterministic.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One retrievable unit of the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub doc_id: String,
    pub title: String,
    pub text: String,
}

/// On-disk corpus formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Tsv,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "tsv" => Ok(CorpusFormat::Tsv),
            other => Err(Error::validation(format!(
                "unknown corpus format {other:?} (expected jsonl or tsv)"
            ))),
        }
    }
}

/// In-memory passage collection with id and doc-id indexes.
#[derive(Debug, Clone)]
pub struct Corpus {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
    by_doc: HashMap<String, Vec<usize>>,
}

impl Corpus {
    /// Builds a corpus, validating id uniqueness and non-empty text.
    pub fn from_passages(passages: Vec<Passage>) -> Result<Self> {
        if passages.is_empty() {
            return Err(Error::data("empty corpus: no passages"));
        }
        let mut by_id = HashMap::with_capacity(passages.len());
        let mut by_doc: HashMap<String, Vec<usize>> = HashMap::new();
        for (pos, p) in passages.iter().enumerate() {
            if p.id.is_empty() {
                return Err(Error::data(format!("passage at position {pos} has empty id")));
            }
            if p.text.trim().is_empty() {
                return Err(Error::data(format!(
                    "passage {:?} has empty text after trimming",
                    p.id
                )));
            }
            if by_id.insert(p.id.clone(), pos).is_some() {
                return Err(Error::data(format!("duplicate passage id {:?}", p.id)));
            }
            by_doc.entry(p.doc_id.clone()).or_default().push(pos);
        }
        Ok(Corpus {
            passages,
            by_id,
            by_doc,
        })
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&pos| &self.passages[pos])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn at(&self, pos: usize) -> &Passage {
        &self.passages[pos]
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn iter(&self) -> impl Iterator<Item = &Passage> {
        self.passages.iter()
    }

    /// Positions of all passages sharing a doc_id, in insertion order.
    pub fn doc_positions(&self, doc_id: &str) -> &[usize] {
        self.by_doc.get(doc_id).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Deserialize)]
struct RawPassage {
    id: String,
    doc_id: String,
    #[serde(default)]
    title: String,
    text: String,
}

/// Loads a corpus from JSONL (`{"id","doc_id","title","text"}` per line) or
/// TSV (`id<TAB>doc_id<TAB>title<TAB>text`, no header). UTF-8 only.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| {
        Error::validation(format!("cannot open corpus file {}: {e}", path.display()))
    })?;
    let reader = BufReader::new(file);
    let mut passages = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::parse(path, lineno, format!("unreadable line: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        let p = match format {
            CorpusFormat::Jsonl => {
                let raw: RawPassage = serde_json::from_str(&line)
                    .map_err(|e| Error::parse(path, lineno, format!("bad record: {e}")))?;
                Passage {
                    id: raw.id,
                    doc_id: raw.doc_id,
                    title: raw.title,
                    text: raw.text,
                }
            }
            CorpusFormat::Tsv => {
                let mut cols = line.splitn(4, '\t');
                let id = cols.next().unwrap_or_default();
                let doc_id = cols
                    .next()
                    .ok_or_else(|| Error::parse(path, lineno, "missing doc_id column"))?;
                let title = cols
                    .next()
                    .ok_or_else(|| Error::parse(path, lineno, "missing title column"))?;
                let text = cols
                    .next()
                    .ok_or_else(|| Error::parse(path, lineno, "missing text column"))?;
                Passage {
                    id: id.to_string(),
                    doc_id: doc_id.to_string(),
                    title: title.to_string(),
                    text: text.to_string(),
                }
            }
        };
        if p.id.is_empty() {
            return Err(Error::parse(path, lineno, "empty id"));
        }
        if p.text.trim().is_empty() {
            return Err(Error::parse(path, lineno, format!("passage {:?} has empty text", p.id)));
        }
        if !seen.insert(p.id.clone()) {
            return Err(Error::parse(
                path,
                lineno,
                format!("duplicate passage id {:?}", p.id),
            ));
        }
        passages.push(p);
    }
    if passages.is_empty() {
        return Err(Error::data(format!(
            "empty corpus: {} contains no records",
            path.display()
        )));
    }
    Corpus::from_passages(passages)
}

/// Writes a corpus back out in the given format (round-trip lossless).
pub fn save_corpus(corpus: &Corpus, path: &Path, format: CorpusFormat) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    for p in corpus.iter() {
        match format {
            CorpusFormat::Jsonl => {
                let line = serde_json::to_string(p)?;
                writeln!(w, "{line}")?;
            }
            CorpusFormat::Tsv => {
                writeln!(w, "{}\t{}\t{}\t{}", p.id, p.doc_id, p.title, p.text)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Draws a passage uniformly over corpus positions.
pub fn sample_passage<'c, R: Rng>(corpus: &'c Corpus, rng: &mut R) -> Result<&'c Passage> {
    if corpus.is_empty() {
        return Err(Error::data("cannot sample from an empty corpus"));
    }
    let pos = rng.random_range(0..corpus.len());
    Ok(corpus.at(pos))
}

fn token_set(text: &str) -> HashSet<String> {
    text.split_whitespace()
        .map(|t| t.to_lowercase())
        .collect()
}

fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Picks a passage related to `current`, never `current` itself.
///
/// Same-document passages are preferred, nearest position first (the
/// following neighbor wins ties). If `current` is the only passage of its
/// document, falls back to the highest token-overlap passage (Jaccard over
/// lowercased whitespace tokens), ties broken by smaller corpus position.
pub fn related_passage<'c, R: Rng>(
    corpus: &'c Corpus,
    current: &Passage,
    _rng: &mut R,
) -> Result<&'c Passage> {
    if corpus.len() < 2 {
        return Err(Error::data(
            "related_passage requires a corpus with at least 2 passages",
        ));
    }
    let cur_pos = corpus
        .position(&current.id)
        .ok_or_else(|| Error::data(format!("passage {:?} not in corpus", current.id)))?;

    let mut same_doc: Vec<usize> = corpus
        .doc_positions(&current.doc_id)
        .iter()
        .copied()
        .filter(|&p| p != cur_pos)
        .collect();
    if !same_doc.is_empty() {
        // Nearest neighbor first; the forward neighbor beats the backward one.
        same_doc.sort_by_key(|&p| {
            let dist = p.abs_diff(cur_pos);
            let backward = usize::from(p < cur_pos);
            (dist, backward)
        });
        return Ok(corpus.at(same_doc[0]));
    }

    let cur_tokens = token_set(&current.text);
    let mut best: Option<(f64, usize)> = None;
    for pos in 0..corpus.len() {
        if pos == cur_pos {
            continue;
        }
        let score = jaccard(&cur_tokens, &token_set(&corpus.at(pos).text));
        let better = match best {
            None => true,
            Some((best_score, _)) => score > best_score,
        };
        if better {
            best = Some((score, pos));
        }
    }
    let (_, pos) = best.expect("corpus.len() >= 2 guarantees a candidate");
    Ok(corpus.at(pos))
}
