//! Fact-anchored QA synthesis.
//!
//! For each test fact the provenance chunks are concatenated into a context
//! passage, the quiz-generator prompt is filled with that passage and the
//! fact's relationship dict, and the generation model's JSON reply is
//! validated into at most five [`QaPair`]s.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::{self, ChatMessage, ChatRequest, ClientError, GenerationClient, HttpChatClient, JsonEndpoint};
use crate::corpus::ChunkStore;
use crate::jsonl::{self, JsonlError};
use crate::kg::{Fact, GraphLabel, KnowledgeGraph};
use crate::par;

/// System prompt, verbatim.
pub const SYSTEM_PROMPT: &str = include_str!("prompts/quiz_system.txt");
/// User prompt with `{text}` and `{relationship}` slots, verbatim.
pub const USER_PROMPT_TEMPLATE: &str = include_str!("prompts/quiz_user.txt");

/// Upper bound on accepted pairs per generation call.
pub const MAX_PAIRS_PER_CALL: usize = 5;

pub const TRUNCATION_MARKER: &str = " [...]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
}

impl PromptBundle {
    pub fn into_messages(self) -> Vec<ChatMessage> {
        vec![ChatMessage::system(self.system_text), ChatMessage::user(self.user_text)]
    }
}

/// One question/answer pair anchored to a single fact. Field order is the
/// JSONL column order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub qa_id: String,
    pub fact_key: String,
    pub chunk_id: String,
    pub question: String,
    pub reference_answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationBackend {
    #[default]
    Http,
    /// Offline deterministic generator, see [`TemplateQuizClient`].
    Template,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub backend: GenerationBackend,
    pub model: String,
    pub endpoint_url: Option<String>,
    pub timeout_ms: u64,
    pub temperature: f64,
    /// Context length cap in code points, marker included.
    pub context_budget: usize,
    /// Extra attempts per fact after a failed or unparseable reply.
    pub max_retries: u32,
    pub concurrency: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            backend: GenerationBackend::Http,
            model: "deepseek-chat".into(),
            endpoint_url: None,
            timeout_ms: 120_000,
            temperature: 0.2,
            context_budget: 4_000,
            max_retries: 2,
            concurrency: 4,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.backend == GenerationBackend::Http && self.endpoint_url.is_none() {
            return Err("synthesis.endpoint_url is required for the http backend".into());
        }
        if self.context_budget <= TRUNCATION_MARKER.chars().count() {
            return Err(format!(
                "synthesis.context_budget must exceed {} code points",
                TRUNCATION_MARKER.chars().count()
            ));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err("synthesis.temperature must be within [0, 2]".into());
        }
        if self.concurrency == 0 || self.timeout_ms == 0 {
            return Err("synthesis.concurrency and synthesis.timeout_ms must be positive".into());
        }
        Ok(())
    }

    /// Generation client for this config. The HTTP key is read from
    /// [`client::GEN_API_KEY_ENV`].
    pub fn build_client(&self) -> Result<Box<dyn GenerationClient>, String> {
        self.validate()?;
        Ok(match self.backend {
            GenerationBackend::Template => Box::new(TemplateQuizClient),
            GenerationBackend::Http => Box::new(HttpChatClient::new(JsonEndpoint::new(
                self.endpoint_url.clone().unwrap_or_default(),
                Duration::from_millis(self.timeout_ms),
                0,
                client::api_key_from_env(client::GEN_API_KEY_ENV),
            ))),
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("fact {fact_key:?} references unknown chunk {chunk_id}")]
    DanglingChunk { fact_key: String, chunk_id: String },
    #[error("fact {fact_key:?} has no provenance")]
    NoProvenance { fact_key: String },
    #[error("suites are synthesized from a test graph, got a {0} graph")]
    NotTestGraph(GraphLabel),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{path}: {reason}")]
    InvalidSuite { path: PathBuf, reason: String },
}

/// Provenance chunk texts in chunk-id order joined by a blank line, cut to
/// `budget` code points (marker included) when longer.
pub fn retrieve_context(fact: &Fact, chunks: &ChunkStore, budget: usize) -> Result<String, SynthError> {
    if fact.provenance.is_empty() {
        return Err(SynthError::NoProvenance {
            fact_key: fact.norm_key.clone(),
        });
    }
    let mut parts = Vec::with_capacity(fact.provenance.len());
    for id in &fact.provenance {
        let chunk = chunks.get(id).ok_or_else(|| SynthError::DanglingChunk {
            fact_key: fact.norm_key.clone(),
            chunk_id: id.clone(),
        })?;
        parts.push(chunk.text.as_str());
    }
    let ctx = parts.join("\n\n");
    if ctx.chars().count() <= budget {
        return Ok(ctx);
    }
    let keep = budget.saturating_sub(TRUNCATION_MARKER.chars().count());
    let mut out: String = ctx.chars().take(keep).collect();
    out.push_str(TRUNCATION_MARKER);
    Ok(out)
}

/// Python `repr` of a string: single quotes unless the text contains a single
/// quote and no double quote.
pub fn py_repr(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') { '"' } else { '\'' };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c if !py_printable(c) => {
                let cp = c as u32;
                if cp < 0x100 {
                    out.push_str(&format!("\\x{cp:02x}"));
                } else if cp < 0x10000 {
                    out.push_str(&format!("\\u{cp:04x}"));
                } else {
                    out.push_str(&format!("\\U{cp:08x}"));
                }
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

fn py_printable(c: char) -> bool {
    if c == ' ' {
        return true;
    }
    !(c.is_control()
        || c.is_whitespace()
        || matches!(c, '\u{ad}' | '\u{200b}'..='\u{200f}' | '\u{2060}'..='\u{2064}' | '\u{feff}'))
}

/// `{'head': ..., 'type': ..., 'tail': ...}` using the fact's original surfaces.
pub fn render_relationship(head: &str, relation: &str, tail: &str) -> String {
    format!(
        "{{'head': {}, 'type': {}, 'tail': {}}}",
        py_repr(head),
        py_repr(relation),
        py_repr(tail)
    )
}

/// Single-pass substitution: text inserted into one slot is never re-scanned.
fn fill_template(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + slots.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    'scan: while let Some(open) = rest.find('{') {
        for (name, value) in slots {
            let tag = &rest[open..];
            if tag.len() > name.len() + 1
                && tag[1..].starts_with(name)
                && tag[1 + name.len()..].starts_with('}')
            {
                out.push_str(&rest[..open]);
                out.push_str(value);
                rest = &rest[open + name.len() + 2..];
                continue 'scan;
            }
        }
        out.push_str(&rest[..=open]);
        rest = &rest[open + 1..];
    }
    out.push_str(rest);
    out
}

pub fn compose_prompt(fact: &Fact, ctx: &str) -> PromptBundle {
    debug_assert!(!ctx.is_empty());
    let relationship = render_relationship(&fact.head, &fact.relation, &fact.tail);
    PromptBundle {
        system_text: SYSTEM_PROMPT.to_string(),
        user_text: fill_template(USER_PROMPT_TEMPLATE, &[("text", ctx), ("relationship", &relationship)]),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QaParseError {
    #[error("reply is not JSON: {0}")]
    NotJson(String),
    #[error("reply JSON is not an object of numbered entries")]
    WrongShape,
    #[error("reply contains no valid question/answer entry")]
    NoValidEntries,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedQa {
    pub pairs: Vec<QaPair>,
    pub warnings: Vec<String>,
}

fn strip_code_fence(raw: &str) -> &str {
    let trimmed = raw.trim();
    let Some(rest) = trimmed.strip_prefix("```") else {
        return trimmed;
    };
    // drop the info string (e.g. "json") on the opening line
    let body = rest.split_once('\n').map_or("", |(_, b)| b);
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

fn short_hash(s: &str) -> String {
    let digest = Sha256::digest(s.as_bytes());
    digest[..6].iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic QA id: hash of the fact key plus the 1-based pair ordinal.
pub fn qa_id(fact_key: &str, ordinal: usize) -> String {
    format!("qa-{}-{ordinal}", short_hash(fact_key))
}

/// Validate a generation reply against the numbered-object contract.
pub fn parse_qa_response(raw: &str, fact: &Fact) -> Result<ParsedQa, QaParseError> {
    let value: serde_json::Value =
        serde_json::from_str(strip_code_fence(raw)).map_err(|e| QaParseError::NotJson(e.to_string()))?;
    let obj = value.as_object().ok_or(QaParseError::WrongShape)?;

    let mut warnings = Vec::new();
    let mut numbered = Vec::new();
    for (key, entry) in obj {
        match key.trim().parse::<u32>() {
            Ok(n) if n > 0 => numbered.push((n, key, entry)),
            _ => warnings.push(format!("ignored non-numbered key {key:?}")),
        }
    }
    numbered.sort_by_key(|(n, _, _)| *n);

    let mut valid = Vec::new();
    for (_, key, entry) in numbered {
        let fields = entry.as_object().filter(|o| o.len() == 2);
        let text = |name| {
            fields
                .and_then(|o| o.get(name))
                .and_then(|v| v.as_str())
                .map(str::trim)
                .filter(|s| !s.is_empty())
        };
        match (text("question"), text("reference_answer")) {
            (Some(q), Some(a)) => valid.push((q.to_string(), a.to_string())),
            _ => warnings.push(format!("entry {key:?} is not a {{question, reference_answer}} object")),
        }
    }
    if valid.is_empty() {
        return Err(QaParseError::NoValidEntries);
    }
    if valid.len() > MAX_PAIRS_PER_CALL {
        warnings.push(format!(
            "reply had {} entries, kept the first {MAX_PAIRS_PER_CALL}",
            valid.len()
        ));
        valid.truncate(MAX_PAIRS_PER_CALL);
    }

    let chunk_id = fact.provenance.iter().next().cloned().unwrap_or_default();
    let pairs = valid
        .into_iter()
        .enumerate()
        .map(|(i, (question, reference_answer))| QaPair {
            qa_id: qa_id(&fact.norm_key, i + 1),
            fact_key: fact.norm_key.clone(),
            chunk_id: chunk_id.clone(),
            question,
            reference_answer,
        })
        .collect();
    Ok(ParsedQa { pairs, warnings })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    pub model: String,
    pub temperature: f64,
    pub timestamp: DateTime<Utc>,
}

/// Per-fact generation record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactOutcome {
    pub fact_key: String,
    pub attempts: u32,
    pub pairs: usize,
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl FactOutcome {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditSuite {
    pub suite_id: String,
    pub qa_pairs: Vec<QaPair>,
    pub generation_meta: GenerationMeta,
    /// One entry per fact attempted, in key order.
    pub outcomes: Vec<FactOutcome>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SuiteHeader {
    suite_id: String,
    generation_meta: GenerationMeta,
    qa_count: usize,
    facts_attempted: usize,
    facts_failed: usize,
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

impl AuditSuite {
    pub fn len(&self) -> usize {
        self.qa_pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qa_pairs.is_empty()
    }

    pub fn failed_facts(&self) -> usize {
        self.outcomes.iter().filter(|o| o.failed()).count()
    }

    /// Mean pairs per attempted fact; 0 for an empty suite.
    pub fn average_pairs_per_fact(&self) -> f64 {
        if self.outcomes.is_empty() {
            0.0
        } else {
            self.qa_pairs.len() as f64 / self.outcomes.len() as f64
        }
    }

    /// `suite.jsonl` with `.meta.json` and `.outcomes.jsonl` sidecars.
    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        jsonl::write(path, &self.qa_pairs)?;
        jsonl::write(&sidecar(path, ".outcomes.jsonl"), &self.outcomes)?;
        let header = SuiteHeader {
            suite_id: self.suite_id.clone(),
            generation_meta: self.generation_meta.clone(),
            qa_count: self.qa_pairs.len(),
            facts_attempted: self.outcomes.len(),
            facts_failed: self.failed_facts(),
        };
        jsonl::write_json(&sidecar(path, ".meta.json"), &header)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let header: SuiteHeader = jsonl::read_json(&sidecar(path, ".meta.json"))?;
        let qa_pairs: Vec<QaPair> = jsonl::read(path)?;
        let outcomes: Vec<FactOutcome> = jsonl::read(&sidecar(path, ".outcomes.jsonl"))?;
        let invalid = |reason: String| SynthError::InvalidSuite {
            path: path.to_path_buf(),
            reason,
        };
        if qa_pairs.len() != header.qa_count {
            return Err(invalid(format!(
                "header says {} pairs, file has {}",
                header.qa_count,
                qa_pairs.len()
            )));
        }
        let mut seen = HashSet::new();
        for qa in &qa_pairs {
            if !seen.insert(qa.qa_id.as_str()) {
                return Err(invalid(format!("duplicate qa_id {}", qa.qa_id)));
            }
        }
        Ok(Self {
            suite_id: header.suite_id,
            qa_pairs,
            generation_meta: header.generation_meta,
            outcomes,
        })
    }

    /// Every `fact_key` resolves in `graph`.
    pub fn check_against(&self, graph: &KnowledgeGraph) -> Result<(), String> {
        match self.qa_pairs.iter().find(|qa| !graph.contains_key(&qa.fact_key)) {
            Some(qa) => Err(format!("{} references unknown fact {:?}", qa.qa_id, qa.fact_key)),
            None => Ok(()),
        }
    }
}

fn synthesize_fact(
    fact: &Fact,
    chunks: &ChunkStore,
    llm: &dyn GenerationClient,
    cfg: &SynthesisConfig,
) -> (Vec<QaPair>, FactOutcome) {
    let mut outcome = FactOutcome {
        fact_key: fact.norm_key.clone(),
        attempts: 0,
        pairs: 0,
        error: None,
        warnings: Vec::new(),
    };
    let ctx = match retrieve_context(fact, chunks, cfg.context_budget) {
        Ok(ctx) => ctx,
        Err(e) => {
            outcome.error = Some(e.to_string());
            return (Vec::new(), outcome);
        }
    };
    let request = ChatRequest {
        model: cfg.model.clone(),
        messages: compose_prompt(fact, &ctx).into_messages(),
        temperature: cfg.temperature,
    };
    let mut last_error = String::new();
    while outcome.attempts <= cfg.max_retries {
        outcome.attempts += 1;
        let reply = llm.complete(&request);
        let parsed = reply
            .map_err(|e: ClientError| e.to_string())
            .and_then(|raw| parse_qa_response(&raw, fact).map_err(|e| e.to_string()));
        match parsed {
            Ok(parsed) => {
                outcome.pairs = parsed.pairs.len();
                outcome.warnings = parsed.warnings;
                return (parsed.pairs, outcome);
            }
            Err(e) => last_error = e,
        }
    }
    tracing::warn!(fact_key = %fact.norm_key, attempts = outcome.attempts, error = %last_error, "fact synthesis failed");
    outcome.error = Some(last_error);
    (Vec::new(), outcome)
}

/// Generate QA pairs for every fact of a test graph. Per-fact failures are
/// recorded in [`AuditSuite::outcomes`] and never abort the run.
pub fn synthesize_suite(
    graph: &KnowledgeGraph,
    chunks: &ChunkStore,
    llm: &dyn GenerationClient,
    cfg: &SynthesisConfig,
    suite_id: &str,
    timestamp: DateTime<Utc>,
) -> Result<AuditSuite, SynthError> {
    if graph.label != GraphLabel::Test {
        return Err(SynthError::NotTestGraph(graph.label));
    }
    let facts: Vec<&Fact> = graph.facts().collect();
    let results = par::bounded_map(&facts, cfg.concurrency, |fact| synthesize_fact(fact, chunks, llm, cfg));
    let mut qa_pairs = Vec::new();
    let mut outcomes = Vec::with_capacity(results.len());
    for (pairs, outcome) in results {
        qa_pairs.extend(pairs);
        outcomes.push(outcome);
    }
    Ok(AuditSuite {
        suite_id: suite_id.to_string(),
        qa_pairs,
        generation_meta: GenerationMeta {
            model: cfg.model.clone(),
            temperature: cfg.temperature,
            timestamp,
        },
        outcomes,
    })
}

/// Parse a relationship dict as rendered by [`render_relationship`].
pub fn parse_relationship(s: &str) -> Option<(String, String, String)> {
    let mut rest = s.trim().strip_prefix('{')?.strip_suffix('}')?;
    let mut values = Vec::new();
    for (i, key) in ["head", "type", "tail"].iter().enumerate() {
        if i > 0 {
            rest = rest.strip_prefix(", ")?;
        }
        rest = rest.strip_prefix(&format!("'{key}': "))?;
        let (value, tail) = parse_py_str(rest)?;
        values.push(value);
        rest = tail;
    }
    if !rest.is_empty() {
        return None;
    }
    let tail = values.pop()?;
    let relation = values.pop()?;
    let head = values.pop()?;
    Some((head, relation, tail))
}

fn parse_py_str(s: &str) -> Option<(String, &str)> {
    let quote = s.chars().next().filter(|c| *c == '\'' || *c == '"')?;
    let mut out = String::new();
    let mut chars = s.char_indices().skip(1);
    while let Some((i, c)) = chars.next() {
        match c {
            c if c == quote => return Some((out, &s[i + 1..])),
            '\\' => {
                let (_, esc) = chars.next()?;
                match esc {
                    'n' => out.push('\n'),
                    'r' => out.push('\r'),
                    't' => out.push('\t'),
                    'x' | 'u' | 'U' => {
                        let width = match esc {
                            'x' => 2,
                            'u' => 4,
                            _ => 8,
                        };
                        let hex: String = (0..width).filter_map(|_| chars.next().map(|(_, h)| h)).collect();
                        out.push(char::from_u32(u32::from_str_radix(&hex, 16).ok()?)?);
                    }
                    other => out.push(other),
                }
            }
            c => out.push(c),
        }
    }
    None
}

/// Offline generation client: reads the relationship back out of the user
/// prompt and asks about the tail and the relation. Useful for smoke runs
/// without a hosted model.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateQuizClient;

impl GenerationClient for TemplateQuizClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let user = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == client::Role::User)
            .ok_or_else(|| ClientError::Schema("no user message".into()))?;
        let line = user
            .content
            .lines()
            .rev()
            .find_map(|l| l.strip_prefix("Relationship: "))
            .ok_or_else(|| ClientError::Schema("no relationship line".into()))?;
        let (head, relation, tail) =
            parse_relationship(line).ok_or_else(|| ClientError::Schema("unreadable relationship".into()))?;
        let reply = serde_json::json!({
            "1": {
                "question": format!("According to the passage, {head} {relation} what?"),
                "reference_answer": tail,
            },
            "2": {
                "question": format!("How are {head} and {tail} related?"),
                "reference_answer": format!("{head} {relation} {tail}"),
            }
        });
        Ok(reply.to_string())
    }
}
