//! Few-shot demonstration templates and prompt rendering.
//!
//! Two template kinds exist: the full template embeds, per example, the
//! passage of the final turn followed by every query of the conversation;
//! the first-turn template embeds only each example's opening passage and
//! query. Rendering is a pure function of (template, passage, history), so
//! prompts are byte-stable across runs and workers.
//!
//! Block format, one block per demonstration:
//!
//! ```text
//! Title: {title}
//! Passage: {text}
//! Q1: {query}
//! ...
//! ```
//!
//! Blocks are separated by a blank line. A rendered prompt appends one more
//! block for the target passage, the prior queries, and the completion cue
//! `Q{t+1}:` as its final bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Passage;
use crate::error::{Error, Result};

/// Character budget for passage text embedded in prompts.
pub const DEFAULT_PASSAGE_CHAR_BUDGET: usize = 1200;

/// Largest supported number of few-shot examples.
pub const MAX_FEW_SHOT: usize = 16;

/// An annotated demonstration conversation: ordered (query, passage) turns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleConversation {
    pub turns: Vec<ExampleTurn>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleTurn {
    pub query: String,
    pub passage: Passage,
}

impl ExampleConversation {
    pub fn new(turns: Vec<(String, Passage)>) -> Result<Self> {
        let conv = ExampleConversation {
            turns: turns
                .into_iter()
                .map(|(query, passage)| ExampleTurn { query, passage })
                .collect(),
        };
        conv.validate()?;
        Ok(conv)
    }

    fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::validation("example conversation has no turns"));
        }
        if self.turns.iter().any(|t| t.query.trim().is_empty()) {
            return Err(Error::validation("example conversation has an empty query"));
        }
        Ok(())
    }
}

/// The k demonstration conversations used for prompting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FewShotSet {
    pub examples: Vec<ExampleConversation>,
}

impl FewShotSet {
    pub fn new(examples: Vec<ExampleConversation>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::validation("few-shot set is empty"));
        }
        if examples.len() > MAX_FEW_SHOT {
            return Err(Error::validation(format!(
                "few-shot set has {} examples (max {MAX_FEW_SHOT})",
                examples.len()
            )));
        }
        for ex in &examples {
            ex.validate()?;
        }
        Ok(FewShotSet { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Loads a few-shot set from JSONL, one conversation per line:
    /// `{"turns": [{"query": ..., "passage": {id, doc_id, title, text}}]}`.
    pub fn load(path: &Path) -> Result<Self> {
        let content = fs::read_to_string(path).map_err(|e| {
            Error::validation(format!("cannot open examples file {}: {e}", path.display()))
        })?;
        let mut examples = Vec::new();
        for (idx, line) in content.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let conv: ExampleConversation = serde_json::from_str(line)
                .map_err(|e| Error::parse(path, idx + 1, format!("bad example: {e}")))?;
            examples.push(conv);
        }
        FewShotSet::new(examples)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for ex in &self.examples {
            out.push_str(&serde_json::to_string(ex)?);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Full,
    FirstTurn,
}

/// A rendered demonstration text plus the metadata needed to extend it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub kind: TemplateKind,
    pub text: String,
    pub demo_count: usize,
    pub passage_char_budget: usize,
}

/// Collapses a string onto one line: newlines and carriage returns become spaces.
fn single_line(s: &str) -> String {
    s.replace(['\n', '\r'], " ")
}

/// Truncates to at most `budget` characters, cutting at a whitespace boundary
/// when one exists inside the window.
fn truncate_chars(s: &str, budget: usize) -> String {
    if s.chars().count() <= budget {
        return s.to_string();
    }
    let window: String = s.chars().take(budget).collect();
    match window.rfind(char::is_whitespace) {
        Some(cut) if cut > 0 => window[..cut].trim_end().to_string(),
        _ => window,
    }
}

fn passage_block_header(passage: &Passage, budget: usize) -> String {
    let title = single_line(&passage.title);
    let text = truncate_chars(&single_line(&passage.text), budget);
    format!("Title: {title}\nPassage: {text}\n")
}

fn query_line(index: usize, query: &str) -> String {
    format!("Q{}: {}\n", index, single_line(query))
}

fn join_blocks(blocks: Vec<String>) -> String {
    // Each block ends with '\n'; a blank line separates blocks.
    let mut text = blocks.join("\n");
    if text.ends_with('\n') {
        text.pop();
    }
    text
}

/// Builds the full template: per example, the passage of the last turn
/// followed by the example's complete query sequence.
pub fn build_full_template(examples: &FewShotSet) -> Result<Template> {
    build_full_template_with_budget(examples, DEFAULT_PASSAGE_CHAR_BUDGET)
}

pub fn build_full_template_with_budget(examples: &FewShotSet, budget: usize) -> Result<Template> {
    if examples.is_empty() {
        return Err(Error::validation("cannot build a template from an empty few-shot set"));
    }
    let mut blocks = Vec::with_capacity(examples.len());
    for ex in &examples.examples {
        let last = ex.turns.last().expect("validated nonempty");
        let mut block = passage_block_header(&last.passage, budget);
        for (i, turn) in ex.turns.iter().enumerate() {
            block.push_str(&query_line(i + 1, &turn.query));
        }
        blocks.push(block);
    }
    Ok(Template {
        kind: TemplateKind::Full,
        text: join_blocks(blocks),
        demo_count: examples.len(),
        passage_char_budget: budget,
    })
}

/// Builds the first-turn template: per example, only the opening passage and
/// opening query.
pub fn build_first_turn_template(examples: &FewShotSet) -> Result<Template> {
    build_first_turn_template_with_budget(examples, DEFAULT_PASSAGE_CHAR_BUDGET)
}

pub fn build_first_turn_template_with_budget(
    examples: &FewShotSet,
    budget: usize,
) -> Result<Template> {
    if examples.is_empty() {
        return Err(Error::validation("cannot build a template from an empty few-shot set"));
    }
    let mut blocks = Vec::with_capacity(examples.len());
    for ex in &examples.examples {
        let first = ex.turns.first().expect("validated nonempty");
        let mut block = passage_block_header(&first.passage, budget);
        block.push_str(&query_line(1, &first.query));
        blocks.push(block);
    }
    Ok(Template {
        kind: TemplateKind::FirstTurn,
        text: join_blocks(blocks),
        demo_count: examples.len(),
        passage_char_budget: budget,
    })
}

/// Renders a complete prompt: demonstrations, the target passage block, the
/// prior queries, and the cue line `Q{t+1}:` as the final bytes.
pub fn render_prompt(template: &Template, target: &Passage, prior_queries: &[String]) -> Result<String> {
    if template.kind == TemplateKind::FirstTurn && !prior_queries.is_empty() {
        return Err(Error::validation(
            "first-turn template cannot render with prior queries",
        ));
    }
    let mut out = String::with_capacity(template.text.len() + 256);
    out.push_str(&template.text);
    out.push_str("\n\n");
    out.push_str(&passage_block_header(target, template.passage_char_budget));
    for (i, q) in prior_queries.iter().enumerate() {
        out.push_str(&query_line(i + 1, q));
    }
    out.push_str(&format!("Q{}:", prior_queries.len() + 1));
    Ok(out)
}

impl Template {
    /// Stable identifier for provenance records: SHA-256 over kind and text.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        let kind = match self.kind {
            TemplateKind::Full => "full",
            TemplateKind::FirstTurn => "first_turn",
        };
        hasher.update(kind.as_bytes());
        hasher.update([0u8]);
        hasher.update(self.text.as_bytes());
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes the exact demonstration bytes to a sidecar file for auditing.
    pub fn save_text(&self, path: &Path) -> Result<()> {
        fs::write(path, self.text.as_bytes())?;
        Ok(())
    }

    /// Rebuilds a template from sidecar bytes. The demo count is recovered
    /// from the blank-line block structure.
    pub fn load_text(path: &Path, kind: TemplateKind, budget: usize) -> Result<Template> {
        let text = fs::read_to_string(path)?;
        if text.is_empty() {
            return Err(Error::data(format!("template file {} is empty", path.display())));
        }
        let demo_count = text.split("\n\n").count();
        Ok(Template {
            kind,
            text,
            demo_count,
            passage_char_budget: budget,
        })
    }
}
