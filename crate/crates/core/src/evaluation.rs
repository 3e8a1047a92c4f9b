//! Judging a model's answers to an audit suite.
//!
//! A QA pair is a knowledge memorization case (KMC) under ROUGE when the
//! answer's ROUGE-L recall against the reference is exactly 1, and under
//! entailment when the NLI model labels the answer as entailing the
//! question-contextualized reference.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::client::{self, ChatMessage, ChatRequest, ClientError, GenerationClient, HttpChatClient, JsonEndpoint};
use crate::par;
use crate::synthesis::AuditSuite;

/// ROUGE recall at or above this value counts as memorized.
pub const ROUGE_KMC_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("reference has no alphanumeric tokens")]
    EmptyReference,
    #[error("no answer recorded for {0}")]
    MissingAnswer(String),
}

/// Lowercased maximal runs of alphanumeric code points.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L recall: `LCS(candidate, reference) / |reference|` over tokens.
pub fn rouge_recall(candidate: &str, reference: &str) -> Result<f64, EvalError> {
    let reference = tokenize(reference);
    if reference.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let candidate = tokenize(candidate);
    Ok(lcs_len(&candidate, &reference) as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntailmentLabel {
    Entailment,
    Neutral,
    Contradiction,
}

impl EntailmentLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            EntailmentLabel::Entailment => "entailment",
            EntailmentLabel::Neutral => "neutral",
            EntailmentLabel::Contradiction => "contradiction",
        }
    }
}

impl fmt::Display for EntailmentLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Wire response: `{"label", "scores": {label: probability}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliResponse {
    pub label: EntailmentLabel,
    pub scores: BTreeMap<EntailmentLabel, f64>,
}

pub trait EntailmentClient: Send + Sync {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliResponse, ClientError>;
}

impl<T: EntailmentClient + ?Sized> EntailmentClient for &T {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliResponse, ClientError> {
        (**self).classify(premise, hypothesis)
    }
}

impl<T: EntailmentClient + ?Sized> EntailmentClient for Box<T> {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliResponse, ClientError> {
        (**self).classify(premise, hypothesis)
    }
}

#[derive(Debug, Serialize)]
struct NliRequest<'a> {
    premise: &'a str,
    hypothesis: &'a str,
}

#[derive(Debug, Clone)]
pub struct HttpNliClient {
    endpoint: JsonEndpoint,
}

impl HttpNliClient {
    pub fn new(endpoint: JsonEndpoint) -> Self {
        Self { endpoint }
    }
}

impl EntailmentClient for HttpNliClient {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliResponse, ClientError> {
        self.endpoint.post(&NliRequest { premise, hypothesis })
    }
}

/// NLI stand-in that never claims entailment.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeutralNli;

impl EntailmentClient for NeutralNli {
    fn classify(&self, _premise: &str, _hypothesis: &str) -> Result<NliResponse, ClientError> {
        Ok(NliResponse {
            label: EntailmentLabel::Neutral,
            scores: BTreeMap::from([(EntailmentLabel::Neutral, 1.0)]),
        })
    }
}

/// Hypothesis sent to the NLI model: `"<question> <reference>"`.
pub fn entailment_hypothesis(question: &str, reference: &str) -> String {
    format!("{question} {reference}")
}

/// Classify `answer` (premise) against the question-contextualized reference
/// (hypothesis). Returns the reported label and its probability.
pub fn judge_entailment(
    answer: &str,
    reference: &str,
    question: &str,
    nli: &dyn EntailmentClient,
) -> Result<(EntailmentLabel, f64), ClientError> {
    let resp = nli.classify(answer, &entailment_hypothesis(question, reference))?;
    let score = *resp
        .scores
        .get(&resp.label)
        .ok_or_else(|| ClientError::Schema(format!("no score for label {}", resp.label)))?;
    if !(0.0..=1.0).contains(&score) {
        return Err(ClientError::Schema(format!("score {score} outside [0, 1]")));
    }
    Ok((resp.label, score))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelAnswer {
    pub qa_id: String,
    pub text: String,
    pub latency_ms: u64,
    #[serde(default)]
    pub failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Row label for reports.
    pub model_name: String,
    /// Model id sent in chat requests to the model under test.
    pub model: String,
    pub model_endpoint: Option<String>,
    pub temperature: f64,
    pub nli_backend: NliBackend,
    pub nli_endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub concurrency: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliBackend {
    #[default]
    Http,
    /// Every case is judged neutral; only the ROUGE criterion is live.
    None,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            model_name: "target".into(),
            model: "target".into(),
            model_endpoint: None,
            temperature: 0.0,
            nli_backend: NliBackend::Http,
            nli_endpoint: None,
            timeout_ms: 60_000,
            max_retries: 2,
            concurrency: 4,
        }
    }
}

impl EvaluationConfig {
    pub fn validate_answering(&self) -> Result<(), String> {
        if self.model_endpoint.is_none() {
            return Err("evaluation.model_endpoint is required".into());
        }
        self.validate_common()
    }

    pub fn validate_judging(&self) -> Result<(), String> {
        if self.nli_backend == NliBackend::Http && self.nli_endpoint.is_none() {
            return Err("evaluation.nli_endpoint is required for the http NLI backend".into());
        }
        self.validate_common()
    }

    fn validate_common(&self) -> Result<(), String> {
        if self.concurrency == 0 || self.timeout_ms == 0 {
            return Err("evaluation.concurrency and evaluation.timeout_ms must be positive".into());
        }
        Ok(())
    }

    fn endpoint(&self, url: &Option<String>, key_env: Option<&str>) -> JsonEndpoint {
        JsonEndpoint::new(
            url.clone().unwrap_or_default(),
            Duration::from_millis(self.timeout_ms),
            self.max_retries,
            key_env.and_then(client::api_key_from_env),
        )
    }

    /// Client for the model under test; key from [`client::MODEL_API_KEY_ENV`].
    pub fn build_model_client(&self) -> Result<Box<dyn GenerationClient>, String> {
        self.validate_answering()?;
        Ok(Box::new(HttpChatClient::new(
            self.endpoint(&self.model_endpoint, Some(client::MODEL_API_KEY_ENV)),
        )))
    }

    pub fn build_nli_client(&self) -> Result<Box<dyn EntailmentClient>, String> {
        self.validate_judging()?;
        Ok(match self.nli_backend {
            NliBackend::Http => Box::new(HttpNliClient::new(self.endpoint(&self.nli_endpoint, None))),
            NliBackend::None => Box::new(NeutralNli),
        })
    }
}

/// Ask the model under test every question, the question being the only
/// message. Transport failures become flagged empty answers.
pub fn ask_model(
    suite: &AuditSuite,
    model: &dyn GenerationClient,
    cfg: &EvaluationConfig,
) -> Vec<ModelAnswer> {
    par::bounded_map(&suite.qa_pairs, cfg.concurrency, |qa| {
        let request = ChatRequest {
            model: cfg.model.clone(),
            messages: vec![ChatMessage::user(qa.question.clone())],
            temperature: cfg.temperature,
        };
        let started = Instant::now();
        let result = model.complete(&request);
        let latency_ms = started.elapsed().as_millis() as u64;
        match result {
            Ok(text) => ModelAnswer {
                qa_id: qa.qa_id.clone(),
                text,
                latency_ms,
                failed: false,
                error: None,
            },
            Err(e) => ModelAnswer {
                qa_id: qa.qa_id.clone(),
                text: String::new(),
                latency_ms,
                failed: true,
                error: Some(e.to_string()),
            },
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub qa_id: String,
    pub rouge_recall: f64,
    pub entailment_label: EntailmentLabel,
    pub entailment_score: f64,
    pub kmc_rouge: bool,
    pub kmc_entail: bool,
    #[serde(default)]
    pub answer_failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_error: Option<String>,
}

impl JudgeVerdict {
    fn new(qa_id: &str, rouge_recall: f64, label: EntailmentLabel, score: f64) -> Self {
        Self {
            qa_id: qa_id.to_string(),
            rouge_recall,
            entailment_label: label,
            entailment_score: score,
            kmc_rouge: rouge_recall >= ROUGE_KMC_THRESHOLD,
            kmc_entail: label == EntailmentLabel::Entailment,
            answer_failed: false,
            judge_error: None,
        }
    }
}

/// Score every QA. Failed or blank answers are neutral non-KMCs and skip the
/// NLI call; NLI failures are recorded on the verdict as neutral.
pub fn judge_suite(
    suite: &AuditSuite,
    answers: &[ModelAnswer],
    nli: &dyn EntailmentClient,
    concurrency: usize,
) -> Result<Vec<JudgeVerdict>, EvalError> {
    let by_id: HashMap<&str, &ModelAnswer> = answers.iter().map(|a| (a.qa_id.as_str(), a)).collect();
    let mut work = Vec::with_capacity(suite.qa_pairs.len());
    for qa in &suite.qa_pairs {
        let answer = by_id
            .get(qa.qa_id.as_str())
            .ok_or_else(|| EvalError::MissingAnswer(qa.qa_id.clone()))?;
        work.push((qa, *answer));
    }
    Ok(par::bounded_map(&work, concurrency, |(qa, answer)| {
        if answer.failed {
            let mut v = JudgeVerdict::new(&qa.qa_id, 0.0, EntailmentLabel::Neutral, 0.0);
            v.answer_failed = true;
            return v;
        }
        let (rouge, rouge_err) = match rouge_recall(&answer.text, &qa.reference_answer) {
            Ok(r) => (r, None),
            Err(e) => (0.0, Some(e.to_string())),
        };
        if answer.text.trim().is_empty() {
            return JudgeVerdict::new(&qa.qa_id, rouge, EntailmentLabel::Neutral, 0.0);
        }
        let mut v = match judge_entailment(&answer.text, &qa.reference_answer, &qa.question, nli) {
            Ok((label, score)) => JudgeVerdict::new(&qa.qa_id, rouge, label, score),
            Err(e) => {
                let mut v = JudgeVerdict::new(&qa.qa_id, rouge, EntailmentLabel::Neutral, 0.0);
                v.judge_error = Some(e.to_string());
                v
            }
        };
        if let Some(e) = rouge_err {
            v.judge_error = Some(e);
        }
        v
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub suite_id: String,
    pub n_cases: usize,
    pub kmc_rouge_count: usize,
    pub kmc_entail_count: usize,
    pub mean_rouge: f64,
    pub entail_rate: f64,
    #[serde(default)]
    pub failed_answers: usize,
    #[serde(default)]
    pub judge_errors: usize,
}

pub fn aggregate(suite_id: &str, verdicts: &[JudgeVerdict]) -> AuditReport {
    let n = verdicts.len();
    let mean = |sum: f64| if n == 0 { 0.0 } else { sum / n as f64 };
    let entailed = verdicts
        .iter()
        .filter(|v| v.entailment_label == EntailmentLabel::Entailment)
        .count();
    AuditReport {
        suite_id: suite_id.to_string(),
        n_cases: n,
        kmc_rouge_count: verdicts.iter().filter(|v| v.kmc_rouge).count(),
        kmc_entail_count: verdicts.iter().filter(|v| v.kmc_entail).count(),
        mean_rouge: mean(verdicts.iter().map(|v| v.rouge_recall).sum()),
        entail_rate: mean(entailed as f64),
        failed_answers: verdicts.iter().filter(|v| v.answer_failed).count(),
        judge_errors: verdicts.iter().filter(|v| v.judge_error.is_some()).count(),
    }
}

/// Full-suite versus deduplicated-suite comparison. All fields are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpactReport {
    pub full: AuditReport,
    pub dedup: AuditReport,
    pub kmc_drop_rouge_pct: f64,
    pub kmc_drop_entail_pct: f64,
    pub rouge_inflation_pct: f64,
    pub entail_inflation_pct: f64,
}

fn relative_pct(numerator: f64, base: f64) -> f64 {
    if base > 0.0 {
        100.0 * numerator / base
    } else {
        0.0
    }
}

pub fn redundancy_impact(full: &AuditReport, dedup: &AuditReport) -> ImpactReport {
    let drop = |f: usize, d: usize| relative_pct(f as f64 - d as f64, f as f64);
    ImpactReport {
        kmc_drop_rouge_pct: drop(full.kmc_rouge_count, dedup.kmc_rouge_count),
        kmc_drop_entail_pct: drop(full.kmc_entail_count, dedup.kmc_entail_count),
        rouge_inflation_pct: relative_pct(full.mean_rouge - dedup.mean_rouge, dedup.mean_rouge),
        entail_inflation_pct: relative_pct(full.entail_rate - dedup.entail_rate, dedup.entail_rate),
        full: full.clone(),
        dedup: dedup.clone(),
    }
}

/// Plain-text KMC table: one row per method, ROUGE and Entail. counts.
pub fn render_kmc_table(rows: &[(String, AuditReport)]) -> String {
    let width = rows.iter().map(|(m, _)| m.chars().count()).max().unwrap_or(0).max("Method".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>8}", "Method", "ROUGE", "Entail.", "Cases");
    let _ = writeln!(out, "{}", "-".repeat(width + 30));
    for (method, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8}  {:>8}  {:>8}",
            method, r.kmc_rouge_count, r.kmc_entail_count, r.n_cases
        );
    }
    out
}
