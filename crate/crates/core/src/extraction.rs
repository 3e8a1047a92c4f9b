//! Triple extraction from text chunks.
//!
//! Two backends share the [`Extractor`] trait. The rule-based backend matches
//! `<TitleCase span> <verb phrase> <TitleCase span>` over a verb lexicon and is
//! fully deterministic. The remote backend posts `{"text"}` to a serving
//! endpoint and expects `{"triples": [{"head","relation","tail"}]}` back;
//! coreference resolution, if any, happens on that side.

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::client::{self, ClientError, JsonEndpoint};
use crate::corpus::{CorpusLabel, TextChunk};
use crate::kg::{Fact, KnowledgeGraph};
use crate::par;

pub const DEFAULT_VERBS: &[&str] = &["attends", "wrote", "is located in", "works for", "founded"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub chunk_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Backend {
    #[default]
    #[serde(rename = "rule", alias = "rule_based")]
    RuleBased,
    #[serde(rename = "remote")]
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub backend: Backend,
    pub endpoint_url: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    /// Maximum in-flight extraction calls.
    pub concurrency: usize,
    /// Verb lexicon for the rule-based backend.
    pub verbs: Vec<String>,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            backend: Backend::RuleBased,
            endpoint_url: None,
            timeout_ms: 30_000,
            max_retries: 2,
            concurrency: 4,
            verbs: DEFAULT_VERBS.iter().map(|v| v.to_string()).collect(),
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<(), String> {
        match (self.backend, &self.endpoint_url) {
            (Backend::Remote, None) => return Err("extractor.endpoint_url is required for the remote backend".into()),
            (Backend::RuleBased, Some(_)) => {
                return Err("extractor.endpoint_url is only valid with the remote backend".into())
            }
            _ => {}
        }
        if self.timeout_ms == 0 {
            return Err("extractor.timeout_ms must be positive".into());
        }
        if self.concurrency == 0 {
            return Err("extractor.concurrency must be positive".into());
        }
        if self.backend == Backend::RuleBased && self.verbs.iter().all(|v| v.trim().is_empty()) {
            return Err("extractor.verbs must contain at least one verb phrase".into());
        }
        Ok(())
    }

    /// Build the configured backend. The remote auth token comes from
    /// [`client::EXTRACTOR_API_KEY_ENV`].
    pub fn build(&self) -> Result<Box<dyn Extractor>, String> {
        self.validate()?;
        Ok(match self.backend {
            Backend::RuleBased => Box::new(RuleBasedExtractor::new(&self.verbs)),
            Backend::Remote => Box::new(RemoteExtractor::new(JsonEndpoint::new(
                self.endpoint_url.clone().unwrap_or_default(),
                Duration::from_millis(self.timeout_ms),
                self.max_retries,
                client::api_key_from_env(client::EXTRACTOR_API_KEY_ENV),
            ))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("extraction failed for chunk {chunk_id}: {source}")]
pub struct ExtractError {
    pub chunk_id: String,
    #[source]
    pub source: ClientError,
}

pub trait Extractor: Send + Sync {
    fn extract(&self, chunk: &TextChunk) -> Result<Vec<RawTriple>, ExtractError>;
}

#[derive(Debug, Clone)]
struct Token {
    /// Byte range of the token with surrounding punctuation stripped.
    core_start: usize,
    core_end: usize,
    core: String,
    leading_punct: bool,
    trailing_punct: bool,
}

impl Token {
    fn title_case(&self) -> bool {
        self.core.chars().next().is_some_and(char::is_uppercase)
    }
}

const OPENING: &[char] = &['"', '\'', '(', '[', '{', '\u{201c}', '\u{2018}', '\u{ab}'];
const CLOSING: &[char] = &[
    '"', '\'', ')', ']', '}', '.', ',', ';', ':', '!', '?', '\u{201d}', '\u{2019}', '\u{bb}',
];

fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut start = None;
    let mut push = |s: usize, e: usize| {
        let raw = &text[s..e];
        let lead = raw.len() - raw.trim_start_matches(OPENING).len();
        let body = &raw[lead..];
        let core = body.trim_end_matches(CLOSING);
        tokens.push(Token {
            core_start: s + lead,
            core_end: s + lead + core.len(),
            core: core.to_string(),
            leading_punct: lead > 0,
            trailing_punct: core.len() < body.len(),
        });
    };
    for (i, ch) in text.char_indices() {
        match (ch.is_whitespace(), start) {
            (true, Some(s)) => {
                push(s, i);
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        push(s, text.len());
    }
    tokens
}

/// Deterministic pattern extractor over a verb lexicon.
///
/// Entity spans are maximal runs of capitalized tokens, optionally joined by
/// a lowercase `of` (as in "University of Oxford"). Punctuation attached to a
/// token ends the span.
#[derive(Debug, Clone)]
pub struct RuleBasedExtractor {
    /// Lexicon entries split into words, longest first.
    verbs: Vec<Vec<String>>,
}

impl Default for RuleBasedExtractor {
    fn default() -> Self {
        Self::new(DEFAULT_VERBS)
    }
}

impl RuleBasedExtractor {
    pub fn new<S: AsRef<str>>(verbs: &[S]) -> Self {
        let mut verbs: Vec<Vec<String>> = verbs
            .iter()
            .map(|v| v.as_ref().split_whitespace().map(str::to_lowercase).collect::<Vec<_>>())
            .filter(|v| !v.is_empty())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        verbs.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        Self { verbs }
    }

    fn verb_at(&self, tokens: &[Token], i: usize) -> Option<usize> {
        self.verbs.iter().map(Vec::len).find(|&len| {
            tokens.get(i..i + len).is_some_and(|window| {
                !window[0].leading_punct
                    && window.iter().all(|t| !t.trailing_punct)
                    && window[1..].iter().all(|t| !t.leading_punct)
                    && self
                        .verbs
                        .iter()
                        .any(|v| v.len() == len && v.iter().zip(window).all(|(w, t)| *w == t.core))
            })
        })
    }

    pub fn extract_text(&self, text: &str) -> Vec<(String, String, String)> {
        let tokens = tokenize(text);
        let mut out = Vec::new();
        for i in 1..tokens.len() {
            let Some(len) = self.verb_at(&tokens, i) else {
                continue;
            };
            let Some(head_start) = entity_start(&tokens, i - 1) else {
                continue;
            };
            let Some(tail_end) = entity_end(&tokens, i + len) else {
                continue;
            };
            let relation = tokens[i..i + len]
                .iter()
                .map(|t| t.core.as_str())
                .collect::<Vec<_>>()
                .join(" ");
            out.push((
                text[tokens[head_start].core_start..tokens[i - 1].core_end].to_string(),
                relation,
                text[tokens[i + len].core_start..tokens[tail_end].core_end].to_string(),
            ));
        }
        out
    }
}

fn joins(prev: &Token, next: &Token) -> bool {
    !prev.trailing_punct && !next.leading_punct
}

/// Walk left from the head's last token `last`; `None` if it is not an entity.
fn entity_start(tokens: &[Token], last: usize) -> Option<usize> {
    let t = &tokens[last];
    if !t.title_case() || t.trailing_punct {
        return None;
    }
    let mut start = last;
    loop {
        if start >= 1 && tokens[start - 1].title_case() && joins(&tokens[start - 1], &tokens[start]) {
            start -= 1;
        } else if start >= 2
            && tokens[start - 1].core == "of"
            && tokens[start - 2].title_case()
            && joins(&tokens[start - 2], &tokens[start - 1])
            && joins(&tokens[start - 1], &tokens[start])
        {
            start -= 2;
        } else {
            return Some(start);
        }
    }
}

/// Walk right from the tail's first token `first`.
fn entity_end(tokens: &[Token], first: usize) -> Option<usize> {
    let t = tokens.get(first)?;
    if !t.title_case() || t.leading_punct {
        return None;
    }
    let mut end = first;
    loop {
        let next = tokens.get(end + 1);
        if next.is_some_and(|n| n.title_case() && joins(&tokens[end], n)) {
            end += 1;
        } else if next.is_some_and(|n| n.core == "of" && joins(&tokens[end], n))
            && tokens
                .get(end + 2)
                .is_some_and(|n2| n2.title_case() && joins(&tokens[end + 1], n2))
        {
            end += 2;
        } else {
            return Some(end);
        }
    }
}

impl Extractor for RuleBasedExtractor {
    fn extract(&self, chunk: &TextChunk) -> Result<Vec<RawTriple>, ExtractError> {
        Ok(self
            .extract_text(&chunk.text)
            .into_iter()
            .map(|(head, relation, tail)| RawTriple {
                head,
                relation,
                tail,
                chunk_id: chunk.chunk_id.clone(),
            })
            .collect())
    }
}

#[derive(Debug, Serialize)]
struct ExtractRequest<'a> {
    text: &'a str,
}

#[derive(Debug, Deserialize)]
struct ExtractResponse {
    triples: Vec<WireTriple>,
}

#[derive(Debug, Deserialize)]
struct WireTriple {
    head: String,
    relation: String,
    tail: String,
}

/// Client for a served relation-extraction model.
#[derive(Debug, Clone)]
pub struct RemoteExtractor {
    endpoint: JsonEndpoint,
}

impl RemoteExtractor {
    pub fn new(endpoint: JsonEndpoint) -> Self {
        Self { endpoint }
    }
}

impl Extractor for RemoteExtractor {
    fn extract(&self, chunk: &TextChunk) -> Result<Vec<RawTriple>, ExtractError> {
        if chunk.text.trim().is_empty() {
            return Ok(Vec::new());
        }
        let fail = |source| ExtractError {
            chunk_id: chunk.chunk_id.clone(),
            source,
        };
        let resp: ExtractResponse = self
            .endpoint
            .post(&ExtractRequest { text: &chunk.text })
            .map_err(fail)?;
        let mut out = Vec::with_capacity(resp.triples.len());
        for (i, t) in resp.triples.into_iter().enumerate() {
            if [&t.head, &t.relation, &t.tail].iter().any(|s| s.trim().is_empty()) {
                return Err(fail(ClientError::Schema(format!("triple {i} has an empty field"))));
            }
            for surface in [&t.head, &t.tail] {
                if !chunk.text.contains(surface.as_str()) {
                    tracing::warn!(chunk_id = %chunk.chunk_id, surface = %surface, "extracted entity not found verbatim in chunk");
                }
            }
            out.push(RawTriple {
                head: t.head,
                relation: t.relation,
                tail: t.tail,
                chunk_id: chunk.chunk_id.clone(),
            });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkFailure {
    pub chunk_id: String,
    pub error: String,
}

/// Partial-progress accounting for one graph build.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildReport {
    pub chunks_total: usize,
    pub chunks_succeeded: usize,
    pub triples_extracted: usize,
    /// Triples dropped because a surface normalized to nothing.
    pub triples_rejected: usize,
    pub failures: Vec<ChunkFailure>,
}

impl BuildReport {
    pub fn failure_rate(&self) -> f64 {
        if self.chunks_total == 0 {
            0.0
        } else {
            self.failures.len() as f64 / self.chunks_total as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuildOutcome {
    pub graph: KnowledgeGraph,
    pub report: BuildReport,
}

/// Extract every chunk (at most `concurrency` at a time) and fold the triples
/// into one graph. Failed chunks are reported, never fatal.
pub fn build_graph(
    chunks: &[TextChunk],
    extractor: &dyn Extractor,
    label: CorpusLabel,
    concurrency: usize,
) -> BuildOutcome {
    let results = par::bounded_map(chunks, concurrency, |chunk| extractor.extract(chunk));
    let mut graph = KnowledgeGraph::new(label.into());
    let mut report = BuildReport {
        chunks_total: chunks.len(),
        ..BuildReport::default()
    };
    for result in results {
        match result {
            Ok(triples) => {
                report.chunks_succeeded += 1;
                report.triples_extracted += triples.len();
                for t in triples {
                    match Fact::new(t.head, t.relation, t.tail, t.chunk_id) {
                        Ok(fact) => graph.add_fact(fact),
                        Err(_) => report.triples_rejected += 1,
                    }
                }
            }
            Err(e) => {
                tracing::warn!(chunk_id = %e.chunk_id, error = %e.source, "chunk extraction failed");
                report.failures.push(ChunkFailure {
                    chunk_id: e.chunk_id,
                    error: e.source.to_string(),
                });
            }
        }
    }
    BuildOutcome { graph, report }
}
