#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use kgaudit_core::client::{ChatRequest, ClientError, GenerationClient, Role};
use kgaudit_core::evaluation::{EntailmentClient, EntailmentLabel, NliResponse};
use kgaudit_core::synthesis::parse_relationship;

type Handler = dyn Fn(&str, &str) -> (u16, String) + Send + Sync;

/// Minimal HTTP stub: every request is answered by `handler(path, body)`.
pub struct StubServer {
    server: Arc<tiny_http::Server>,
    thread: Option<JoinHandle<()>>,
    pub hits: Arc<AtomicUsize>,
    pub base: String,
}

impl StubServer {
    pub fn start(handler: impl Fn(&str, &str) -> (u16, String) + Send + Sync + 'static) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").expect("bind stub server"));
        let base = format!("http://{}", server.server_addr().to_ip().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let thread = {
            let server = Arc::clone(&server);
            let hits = Arc::clone(&hits);
            std::thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    hits.fetch_add(1, Ordering::SeqCst);
                    let mut body = String::new();
                    let _ = req.as_reader().read_to_string(&mut body);
                    let (status, reply) = handler(req.url(), &body);
                    let header = tiny_http::Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).unwrap();
                    let resp = tiny_http::Response::from_string(reply)
                        .with_status_code(status)
                        .with_header(header);
                    let _ = req.respond(resp);
                }
            })
        };
        Self {
            server,
            thread: Some(thread),
            hits,
            base,
        }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn relationship_of(request: &ChatRequest) -> Result<(String, String, String), ClientError> {
    let user = request
        .messages
        .iter()
        .find(|m| m.role == Role::User)
        .ok_or_else(|| ClientError::Schema("no user message".into()))?;
    let line = user
        .content
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix("Relationship: "))
        .ok_or_else(|| ClientError::Schema("no relationship".into()))?;
    parse_relationship(line).ok_or_else(|| ClientError::Schema("bad relationship".into()))
}

/// Deterministic generation mock: `k` numbered QAs per fact, questions
/// derived from the triple.
pub struct KQaMock {
    pub k: usize,
    pub calls: AtomicUsize,
}

impl KQaMock {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            calls: AtomicUsize::new(0),
        }
    }
}

impl GenerationClient for KQaMock {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let (head, relation, tail) = relationship_of(request)?;
        let body: serde_json::Map<String, serde_json::Value> = (1..=self.k)
            .map(|i| {
                (
                    i.to_string(),
                    serde_json::json!({
                        "question": format!("Q{i}: {head} {relation} what?"),
                        "reference_answer": tail,
                    }),
                )
            })
            .collect();
        Ok(serde_json::Value::Object(body).to_string())
    }
}

/// Always replies with prose instead of JSON, counting calls.
pub struct FailingLlm {
    pub calls: AtomicUsize,
}

impl FailingLlm {
    pub fn new() -> Self {
        Self {
            calls: AtomicUsize::new(0),
        }
    }
}

impl GenerationClient for FailingLlm {
    fn complete(&self, _request: &ChatRequest) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok("I cannot help with that.".into())
    }
}

/// Model under test that knows a fixed question -> answer table and refuses
/// everything else.
pub struct ScriptedModel {
    pub answers: HashMap<String, String>,
}

impl GenerationClient for ScriptedModel {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let q = &request.messages.last().expect("one message").content;
        Ok(self
            .answers
            .get(q)
            .cloned()
            .unwrap_or_else(|| "I don't know.".to_string()))
    }
}

pub struct EchoModel;

impl GenerationClient for EchoModel {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        Ok(request.messages.last().map(|m| m.content.clone()).unwrap_or_default())
    }
}

/// NLI stub: entailment iff the hypothesis (question + reference) ends with
/// the premise, i.e. the answer restates the reference.
pub struct ContainsNli;

impl EntailmentClient for ContainsNli {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliResponse, ClientError> {
        let p = premise.to_lowercase();
        let label = if !p.trim().is_empty() && hypothesis.to_lowercase().ends_with(p.trim()) {
            EntailmentLabel::Entailment
        } else {
            EntailmentLabel::Neutral
        };
        Ok(NliResponse {
            label,
            scores: BTreeMap::from([(label, 1.0)]),
        })
    }
}

/// Equality stub: entailment with probability 1 when premise == hypothesis.
pub struct EqualityNli;

impl EntailmentClient for EqualityNli {
    fn classify(&self, premise: &str, hypothesis: &str) -> Result<NliResponse, ClientError> {
        let (label, p) = if premise == hypothesis {
            (EntailmentLabel::Entailment, 1.0)
        } else {
            (EntailmentLabel::Neutral, 0.5)
        };
        Ok(NliResponse {
            label,
            scores: BTreeMap::from([(label, p)]),
        })
    }
}

pub struct PlantedCorpus {
    pub forget_only: Vec<(String, String, String)>,
    pub shared: Vec<(String, String, String)>,
    pub retain_only: Vec<(String, String, String)>,
}

const FIRST: &[&str] = &[
    "Alice", "Bruno", "Carla", "Dmitri", "Elena", "Farid", "Greta", "Hiro", "Ines", "Jonas", "Keiko", "Luca",
    "Mara", "Nils", "Olga", "Pavel", "Quinn", "Rosa", "Sven", "Tariq",
];
const ORGS: &[&str] = &[
    "Acme Labs", "Borealis Press", "Cobalt Works", "Delta Foundry", "Ember Institute", "Fjord Records",
    "Granite Bank", "Harbor Clinic", "Iris Studio", "Juniper Academy", "Kestrel Mills", "Lumen Society",
    "Meridian Hall", "Nimbus Yards", "Onyx Gallery", "Prairie College", "Quarry Guild", "Ridge Observatory",
    "Summit Forge", "Tidewater School",
];
const VERBS: &[&str] = &["works for", "attends", "founded", "wrote", "is located in"];

fn planted(i: usize) -> (String, String, String) {
    (
        format!("{} Vance", FIRST[i % FIRST.len()]),
        VERBS[i % VERBS.len()].to_string(),
        ORGS[i % ORGS.len()].to_string(),
    )
}

fn sentence((h, r, t): &(String, String, String)) -> String {
    format!("{h} {r} {t}.")
}

impl PlantedCorpus {
    pub fn new(forget_only: usize, shared: usize, retain_only: usize) -> Self {
        let all: Vec<_> = (0..forget_only + shared + retain_only).map(planted).collect();
        Self {
            forget_only: all[..forget_only].to_vec(),
            shared: all[forget_only..forget_only + shared].to_vec(),
            retain_only: all[forget_only + shared..].to_vec(),
        }
    }

    /// Forget facts spread over five documents; retain holds the shared facts
    /// plus its own.
    pub fn write(&self, forget_dir: &Path, retain_dir: &Path) {
        std::fs::create_dir_all(forget_dir).unwrap();
        std::fs::create_dir_all(retain_dir).unwrap();
        let forget: Vec<_> = self.forget_only.iter().chain(&self.shared).collect();
        for (d, group) in forget.chunks(forget.len().div_ceil(5).max(1)).enumerate() {
            let text = group
                .iter()
                .map(|f| format!("It was noted that {}", sentence(f)))
                .collect::<Vec<_>>()
                .join(" ");
            std::fs::write(forget_dir.join(format!("doc{d}.txt")), text).unwrap();
        }
        let retain: Vec<_> = self
            .shared
            .iter()
            .chain(&self.retain_only)
            .map(|f| serde_json::json!({ "text": format!("Records show {}", sentence(f)) }).to_string())
            .collect();
        std::fs::write(retain_dir.join("retain.jsonl"), retain.join("\n") + "\n").unwrap();
    }

    pub fn keys(facts: &[(String, String, String)]) -> Vec<String> {
        facts
            .iter()
            .map(|(h, r, t)| kgaudit_core::kg::norm_key(h, r, t))
            .collect()
    }
}

/// Model under test driven by a closure over the question text.
pub struct FnModel<F>(pub F);

impl<F: Fn(&str) -> String + Send + Sync> GenerationClient for FnModel<F> {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        Ok((self.0)(&request.messages.last().expect("one message").content))
    }
}

/// Config for a planted-corpus run under `root`, offline backends only.
pub fn planted_config(root: &Path, run_id: &str) -> kgaudit_core::config::Config {
    let mut cfg = kgaudit_core::config::Config {
        run_dir: root.join("runs"),
        run_id: Some(run_id.to_string()),
        ..Default::default()
    };
    cfg.corpus.forget = Some(root.join("forget"));
    cfg.corpus.retain = Some(root.join("retain"));
    cfg.synthesis.backend = kgaudit_core::synthesis::GenerationBackend::Template;
    cfg.evaluation.nli_backend = kgaudit_core::evaluation::NliBackend::None;
    cfg
}

/// Answers with the tail of any planted fact whose head appears in the
/// question, "I don't know." otherwise.
pub fn memorizer(facts: &[(String, String, String)]) -> FnModel<impl Fn(&str) -> String + Send + Sync> {
    let table: Vec<(String, String)> = facts.iter().map(|(h, _, t)| (h.clone(), t.clone())).collect();
    FnModel(move |q: &str| {
        table
            .iter()
            .find(|(h, _)| q.contains(h.as_str()))
            .map(|(_, t)| t.clone())
            .unwrap_or_else(|| "I don't know.".into())
    })
}

/// Every file under `dir` (relative path, bytes), sorted.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e.path().strip_prefix(dir).unwrap().to_string_lossy().replace('\\', "/");
            (rel, std::fs::read(e.path()).unwrap())
        })
        .collect()
}
