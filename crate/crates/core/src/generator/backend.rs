//! Completion backends: the HTTP client used for real generation and the
//! deterministic mock used for tests and reproducible dry runs.

use std::sync::atomic::{AtomicU32, Ordering};
use std::time::Duration;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::generator::DecodingParams;
use crate::retriever::features::{fnv1a, tokenize};

/// A text-completion service. Implementations return the continuation only
/// (never the prompt) and honor the stop sequences in `DecodingParams`.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, prompt: &str, params: &DecodingParams) -> Result<String>;

    /// Stable identifier recorded in conversation provenance.
    fn id(&self) -> String;
}

/// Truncates a continuation at the earliest stop sequence.
pub(crate) fn apply_stop(text: &str, stops: &[String]) -> String {
    let mut cut = text.len();
    for stop in stops {
        if stop.is_empty() {
            continue;
        }
        if let Some(pos) = text.find(stop.as_str()) {
            cut = cut.min(pos);
        }
    }
    text[..cut].to_string()
}

/// Deterministic mock backend.
///
/// The completion is a pure function of (seed, prompt): the target passage
/// and cue number are read back out of the prompt, two content tokens are
/// picked by hash, and a short question is produced from them. Distinct
/// turns get distinct questions, so cooperative multi-turn generation works
/// without a model.
#[derive(Debug, Clone)]
pub struct MockBackend {
    seed: u64,
}

const MOCK_FALLBACK_TOKENS: [&str; 4] = ["artifact", "fragment", "excerpt", "detail"];
const MOCK_TEMPLATE_WORDS: [&str; 5] = ["what", "is", "the", "in", "part"];

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        MockBackend { seed }
    }

    fn content_tokens(passage_text: &str) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        tokenize(passage_text)
            .into_iter()
            .filter(|t| t.len() >= 3 && !MOCK_TEMPLATE_WORDS.contains(&t.as_str()))
            .filter(|t| seen.insert(t.clone()))
            .collect()
    }
}

impl CompletionBackend for MockBackend {
    fn complete(&self, prompt: &str, params: &DecodingParams) -> Result<String> {
        if prompt.is_empty() {
            return Err(Error::validation("empty prompt"));
        }
        // The final block of the prompt carries the target passage and the
        // cue "Q{t}:" as the last line.
        let passage_text = prompt
            .rfind("\nPassage: ")
            .map(|pos| {
                let start = pos + "\nPassage: ".len();
                let rest = &prompt[start..];
                rest.split('\n').next().unwrap_or("")
            })
            .unwrap_or("");
        let turn: u64 = prompt
            .rsplit('\n')
            .next()
            .and_then(|line| line.strip_prefix('Q'))
            .and_then(|line| line.strip_suffix(':'))
            .and_then(|digits| digits.parse().ok())
            .unwrap_or(1);

        let mut tokens = Self::content_tokens(passage_text);
        if tokens.is_empty() {
            tokens = MOCK_FALLBACK_TOKENS.iter().map(|s| s.to_string()).collect();
        }
        let mut key = self.seed.to_le_bytes().to_vec();
        key.extend_from_slice(prompt.as_bytes());
        let h = fnv1a(&key);
        let c1 = &tokens[(h % tokens.len() as u64) as usize];
        let c2 = &tokens[((h >> 20) % tokens.len() as u64) as usize];
        let text = format!("what is the {c1} {c2} in part {turn}?");
        Ok(apply_stop(&text, &params.stop))
    }

    fn id(&self) -> String {
        format!("mock:{}", self.seed)
    }
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    text: String,
}

/// HTTP completion client.
///
/// POSTs `{"prompt", "max_tokens", "temperature", "top_p", "stop"}` to the
/// configured URL and expects `{"text"}` back. Retries 429 and 5xx responses
/// and transport failures with exponential backoff, up to 5 attempts. A
/// bearer token is read from the named environment variable when present.
pub struct HttpBackend {
    url: String,
    client: reqwest::blocking::Client,
    bearer: Option<String>,
    max_attempts: u32,
    backoff_base: Duration,
    last_attempts: AtomicU32,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>, auth_env: Option<&str>) -> Result<Self> {
        let bearer = auth_env.and_then(|name| std::env::var(name).ok());
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::Backend {
                message: format!("cannot build http client: {e}"),
                retriable: false,
                attempts: 0,
            })?;
        Ok(HttpBackend {
            url: url.into(),
            client,
            bearer,
            max_attempts: 5,
            backoff_base: Duration::from_millis(250),
            last_attempts: AtomicU32::new(0),
        })
    }

    /// Overrides the backoff base (tests use a near-zero value).
    pub fn with_backoff(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    /// Attempts consumed by the most recent `complete` call.
    pub fn last_attempt_count(&self) -> u32 {
        self.last_attempts.load(Ordering::Relaxed)
    }

    fn backoff(&self, attempt: u32) -> Duration {
        self.backoff_base * 2u32.saturating_pow(attempt.saturating_sub(1))
    }
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, prompt: &str, params: &DecodingParams) -> Result<String> {
        if prompt.is_empty() {
            return Err(Error::validation("empty prompt"));
        }
        let body = serde_json::json!({
            "prompt": prompt,
            "max_tokens": params.max_new_tokens,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "stop": params.stop,
        });
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.last_attempts.store(attempt, Ordering::Relaxed);
            let mut req = self.client.post(&self.url).json(&body);
            if let Some(token) = &self.bearer {
                req = req.bearer_auth(token);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let parsed: CompletionResponse = resp.json().map_err(|e| Error::Backend {
                            message: format!("malformed backend response: {e}"),
                            retriable: false,
                            attempts: attempt,
                        })?;
                        return Ok(apply_stop(&parsed.text, &params.stop));
                    }
                    let retriable = status.as_u16() == 429 || status.is_server_error();
                    if !retriable {
                        return Err(Error::Backend {
                            message: format!("backend returned status {status}"),
                            retriable: false,
                            attempts: attempt,
                        });
                    }
                    if attempt >= self.max_attempts {
                        return Err(Error::Backend {
                            message: format!("backend returned status {status}"),
                            retriable: true,
                            attempts: attempt,
                        });
                    }
                }
                Err(e) => {
                    if attempt >= self.max_attempts {
                        return Err(Error::Backend {
                            message: format!("transport failure: {e}"),
                            retriable: true,
                            attempts: attempt,
                        });
                    }
                }
            }
            std::thread::sleep(self.backoff(attempt));
        }
    }

    fn id(&self) -> String {
        format!("http:{}", self.url)
    }
}
