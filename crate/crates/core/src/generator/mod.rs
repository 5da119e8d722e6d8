//! Sequential conversation generation against a completion backend, with
//! two-stage templating, passage switching, and degeneration filtering.

pub mod backend;

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{related_passage, sample_passage, Corpus, Passage};
use crate::error::{Error, Result};
use crate::prompt::{render_prompt, Template, TemplateKind};
use crate::retriever::features::tokenize;
use crate::seeding::derive_seed;

pub use backend::{CompletionBackend, HttpBackend, MockBackend};

/// Reason code for conversations whose opening turn never passed the
/// degeneration check.
pub const DISCARD_DEGENERATE_FIRST_TURN: &str = "degenerate-first-turn";

/// Nucleus-sampling decoding parameters sent to the backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodingParams {
    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub stop: Vec<String>,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams {
            top_p: 0.95,
            temperature: 0.75,
            max_new_tokens: 64,
            stop: vec!["\n".to_string()],
        }
    }
}

impl DecodingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::validation(format!("top_p must be in (0, 1], got {}", self.top_p)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::validation(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::validation("max_new_tokens must be >= 1"));
        }
        Ok(())
    }
}

/// Conversation-level generation settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub turns_per_conversation: usize,
    /// Probability of replacing the grounding passage before a follow-up turn.
    pub p_ps: f64,
    /// Extra completions allowed per turn after a degenerate candidate.
    pub max_regeneration_attempts: u32,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            turns_per_conversation: 7,
            p_ps: 0.3,
            max_regeneration_attempts: 3,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.turns_per_conversation == 0 {
            return Err(Error::validation("turns_per_conversation must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.p_ps) {
            return Err(Error::validation(format!("p_ps must be in [0, 1], got {}", self.p_ps)));
        }
        Ok(())
    }
}

/// One emitted turn of a synthetic conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTurn {
    pub query: String,
    pub passage_id: String,
    pub switched: bool,
}

/// A generated dialogue with provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticConversation {
    pub turns: Vec<ConversationTurn>,
    pub seed: u64,
    pub backend: String,
    pub template_fingerprint: String,
}

/// Thresholds for the degeneration filter. The five rules are pinned; the
/// numbers are configurable.
#[derive(Debug, Clone)]
pub struct DegenerationRules {
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub ngram: usize,
    pub jaccard_threshold: f64,
}

impl Default for DegenerationRules {
    fn default() -> Self {
        DegenerationRules {
            min_tokens: 3,
            max_tokens: 64,
            ngram: 4,
            jaccard_threshold: 0.8,
        }
    }
}

fn token_jaccard(a: &[String], b: &[String]) -> f64 {
    let sa: HashSet<&str> = a.iter().map(String::as_str).collect();
    let sb: HashSet<&str> = b.iter().map(String::as_str).collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let inter = sa.intersection(&sb).count();
    let union = sa.len() + sb.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn looks_like_format_artifact(line: &str) -> bool {
    let line = line.trim_start();
    if line.starts_with("Passage:") {
        return true;
    }
    if let Some(rest) = line.strip_prefix('Q') {
        let digits: usize = rest.chars().take_while(char::is_ascii_digit).count();
        if digits > 0 && rest[digits..].starts_with(':') {
            return true;
        }
    }
    false
}

/// Rejects degenerate candidate queries. A candidate is degenerate when any
/// of the five rules fires:
///   1. token count below `min_tokens` or above `max_tokens`;
///   2. a repeated n-gram: two equal token windows of length `ngram`, or a
///      single window collapsing onto at most `ngram / 2` distinct tokens;
///   3. a case-folded exact duplicate of a prior query;
///   4. token Jaccard with any prior query at or above `jaccard_threshold`;
///   5. a demonstration-format artifact (a line starting with `Passage:` or
///      `Q<digit>:`).
pub fn is_degenerate(candidate: &str, prior_queries: &[String]) -> bool {
    is_degenerate_with(&DegenerationRules::default(), candidate, prior_queries)
}

pub fn is_degenerate_with(
    rules: &DegenerationRules,
    candidate: &str,
    prior_queries: &[String],
) -> bool {
    let tokens = tokenize(candidate);
    if tokens.len() < rules.min_tokens || tokens.len() > rules.max_tokens {
        return true;
    }

    let mut windows: HashSet<&[String]> = HashSet::new();
    for window in tokens.windows(rules.ngram) {
        if !windows.insert(window) {
            return true;
        }
        let distinct: HashSet<&str> = window.iter().map(String::as_str).collect();
        if distinct.len() * 2 <= rules.ngram {
            return true;
        }
    }

    let folded = candidate.trim().to_lowercase();
    for prior in prior_queries {
        if prior.trim().to_lowercase() == folded {
            return true;
        }
        if token_jaccard(&tokens, &tokenize(prior)) >= rules.jaccard_threshold {
            return true;
        }
    }

    candidate.lines().any(looks_like_format_artifact)
}

/// With probability `p_ps`, swaps the grounding passage for a related one.
/// A singleton corpus never switches; the Bernoulli draw is still consumed so
/// downstream randomness does not depend on corpus size.
pub fn switch_passage<R: Rng>(
    current: &Passage,
    corpus: &Corpus,
    p_ps: f64,
    rng: &mut R,
) -> (Passage, bool) {
    let draw: f64 = rng.random();
    if draw < p_ps && corpus.len() >= 2 {
        match related_passage(corpus, current, rng) {
            Ok(p) => (p.clone(), true),
            Err(_) => (current.clone(), false),
        }
    } else {
        (current.clone(), false)
    }
}

/// Result of generating a single conversation.
#[derive(Debug, Clone)]
pub struct ConversationOutcome {
    pub conversation: Option<SyntheticConversation>,
    pub discard_reason: Option<&'static str>,
    pub truncated: bool,
    pub backend_calls: u32,
}

/// Runs the sequential turn loop for one conversation.
///
/// The opening passage is sampled uniformly; turn 1 renders through the
/// first-turn template, follow-up turns through the full template with the
/// complete query history. Before each follow-up turn the grounding passage
/// may switch. Every candidate query is degeneration-checked with up to
/// `max_regeneration_attempts` resamples; a degenerate opening turn discards
/// the conversation, a degenerate follow-up truncates it.
pub fn generate_conversation(
    corpus: &Corpus,
    first_turn_template: &Template,
    full_template: &Template,
    backend: &dyn CompletionBackend,
    cfg: &GenerationConfig,
    params: &DecodingParams,
    conversation_seed: u64,
) -> Result<ConversationOutcome> {
    cfg.validate()?;
    params.validate()?;
    if first_turn_template.kind != TemplateKind::FirstTurn {
        return Err(Error::validation("first-turn template has the wrong kind"));
    }
    if full_template.kind != TemplateKind::Full {
        return Err(Error::validation("full template has the wrong kind"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(conversation_seed);
    let mut current = sample_passage(corpus, &mut rng)?.clone();
    let mut queries: Vec<String> = Vec::with_capacity(cfg.turns_per_conversation);
    let mut turns: Vec<ConversationTurn> = Vec::with_capacity(cfg.turns_per_conversation);
    let mut backend_calls = 0u32;
    let mut truncated = false;

    for turn_no in 1..=cfg.turns_per_conversation {
        let mut switched = false;
        if turn_no >= 2 {
            let (next, did_switch) = switch_passage(&current, corpus, cfg.p_ps, &mut rng);
            current = next;
            switched = did_switch;
        }
        let template = if turn_no == 1 {
            first_turn_template
        } else {
            full_template
        };
        let prompt = render_prompt(template, &current, &queries)?;

        let mut accepted: Option<String> = None;
        for _ in 0..=cfg.max_regeneration_attempts {
            let raw = backend.complete(&prompt, params)?;
            backend_calls += 1;
            let candidate = raw.trim().to_string();
            if !is_degenerate(&candidate, &queries) {
                accepted = Some(candidate);
                break;
            }
        }

        match accepted {
            Some(query) => {
                queries.push(query.clone());
                turns.push(ConversationTurn {
                    query,
                    passage_id: current.id.clone(),
                    switched,
                });
            }
            None if turn_no == 1 => {
                return Ok(ConversationOutcome {
                    conversation: None,
                    discard_reason: Some(DISCARD_DEGENERATE_FIRST_TURN),
                    truncated: false,
                    backend_calls,
                });
            }
            None => {
                truncated = true;
                break;
            }
        }
    }

    let fingerprint = format!(
        "{}-{}",
        first_turn_template.fingerprint(),
        full_template.fingerprint()
    );
    Ok(ConversationOutcome {
        conversation: Some(SyntheticConversation {
            turns,
            seed: conversation_seed,
            backend: backend.id(),
            template_fingerprint: fingerprint,
        }),
        discard_reason: None,
        truncated,
        backend_calls,
    })
}

/// Aggregate counters for a generation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationReport {
    pub requested: usize,
    pub emitted: usize,
    pub turns_emitted: usize,
    pub followup_turns: usize,
    pub switched_turns: usize,
    /// switched follow-up turns / all follow-up turns.
    pub switch_rate: f64,
    pub mean_turns: f64,
    pub truncated_conversations: usize,
    pub backend_calls: u64,
    pub discards: BTreeMap<String, u64>,
    /// Set when the backend became permanently unreachable; partial output
    /// was preserved up to that point.
    pub aborted: Option<String>,
}

/// Generates up to `n_conversations` conversations and streams them as JSONL
/// to `out`, one conversation per line.
///
/// Conversation i draws all of its randomness from a seed derived from
/// (cfg.seed, i), so output is byte-identical across runs and worker counts.
/// On a permanent backend failure, everything generated so far is flushed and
/// the report's `aborted` field carries the failure.
pub fn generate_dataset<W: Write>(
    corpus: &Corpus,
    first_turn_template: &Template,
    full_template: &Template,
    backend: &dyn CompletionBackend,
    cfg: &GenerationConfig,
    params: &DecodingParams,
    n_conversations: usize,
    out: &mut W,
) -> Result<GenerationReport> {
    if n_conversations == 0 {
        return Err(Error::validation("n_conversations must be >= 1"));
    }
    cfg.validate()?;
    params.validate()?;

    let mut report = GenerationReport {
        requested: n_conversations,
        emitted: 0,
        turns_emitted: 0,
        followup_turns: 0,
        switched_turns: 0,
        switch_rate: 0.0,
        mean_turns: 0.0,
        truncated_conversations: 0,
        backend_calls: 0,
        discards: BTreeMap::new(),
        aborted: None,
    };

    let chunk_size = rayon::current_num_threads().max(1) * 8;
    let indices: Vec<usize> = (0..n_conversations).collect();
    'outer: for chunk in indices.chunks(chunk_size) {
        let outcomes: Vec<Result<ConversationOutcome>> = chunk
            .par_iter()
            .map(|&i| {
                let conv_seed = derive_seed(cfg.seed, "conversation", i as u64);
                generate_conversation(
                    corpus,
                    first_turn_template,
                    full_template,
                    backend,
                    cfg,
                    params,
                    conv_seed,
                )
            })
            .collect();
        for outcome in outcomes {
            match outcome {
                Ok(o) => {
                    report.backend_calls += u64::from(o.backend_calls);
                    if o.truncated {
                        report.truncated_conversations += 1;
                    }
                    if let Some(reason) = o.discard_reason {
                        *report.discards.entry(reason.to_string()).or_insert(0) += 1;
                    }
                    if let Some(conv) = o.conversation {
                        report.emitted += 1;
                        report.turns_emitted += conv.turns.len();
                        report.followup_turns += conv.turns.len().saturating_sub(1);
                        report.switched_turns +=
                            conv.turns.iter().filter(|t| t.switched).count();
                        let line = serde_json::to_string(&conv)?;
                        writeln!(out, "{line}")?;
                    }
                }
                Err(e) => {
                    report.aborted = Some(e.to_string());
                    break 'outer;
                }
            }
        }
    }
    out.flush()?;

    if report.followup_turns > 0 {
        report.switch_rate = report.switched_turns as f64 / report.followup_turns as f64;
    }
    if report.emitted > 0 {
        report.mean_turns = report.turns_emitted as f64 / report.emitted as f64;
    }
    Ok(report)
}

/// Reads a dialogues JSONL file back into memory.
pub fn load_conversations(path: &std::path::Path) -> Result<Vec<SyntheticConversation>> {
    let content = std::fs::read_to_string(path).map_err(|e| {
        Error::validation(format!("cannot open dialogues file {}: {e}", path.display()))
    })?;
    let mut out = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let conv: SyntheticConversation = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, idx + 1, format!("bad conversation: {e}")))?;
        out.push(conv);
    }
    Ok(out)
}
