//! One PASS/FAIL line per acceptance criterion. Runs with the offline
//! backends only: rule-based extraction, mock LLMs and stub NLI.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{memorizer, planted_config, snapshot, KQaMock, PlantedCorpus};
use kgaudit_core::corpus::{ChunkStore, TextChunk};
use kgaudit_core::evaluation::rouge_recall;
use kgaudit_core::extraction::RuleBasedExtractor;
use kgaudit_core::kg::{intersect, subtract, Fact, GraphLabel, KnowledgeGraph};
use kgaudit_core::pipeline::Run;
use kgaudit_core::synthesis::{compose_prompt, synthesize_suite, SynthesisConfig, SYSTEM_PROMPT, USER_PROMPT_TEMPLATE};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use sha2::{Digest, Sha256};

const SYSTEM_SHA256: &str = "315b3335d9d8df5805b479da6378e3d9545dabda2734c220b7f8b466a9a21288";
const USER_SHA256: &str = "cc5851b7e0f4c427cd49ce36799b9021f90c0cb59968ed6ff21b2646fc219166";

const HEADS: &[&str] = &["Alice Vance", "alice  vance", "Bruno Ortiz", "Carla Diaz", "CARLA DIAZ", "Dmitri Ode"];
const RELS: &[&str] = &["works for", "Works  For", "founded", "attends"];
const TAILS: &[&str] = &["Acme Labs", "acme labs", "Borealis Press", "Cobalt Works", "Delta Foundry"];

fn canon(h: &str, r: &str, t: &str) -> String {
    [h, r, t]
        .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase())
        .join("\t")
}

fn random_graph(rng: &mut StdRng, label: GraphLabel) -> (KnowledgeGraph, Vec<String>) {
    let mut g = KnowledgeGraph::new(label);
    let mut keys = Vec::new();
    for i in 0..rng.gen_range(0..=50) {
        let (h, r, t) = (
            HEADS[rng.gen_range(0..HEADS.len())],
            RELS[rng.gen_range(0..RELS.len())],
            TAILS[rng.gen_range(0..TAILS.len())],
        );
        g.add_fact(Fact::new(h, r, t, format!("c{i}")).unwrap());
        keys.push(canon(h, r, t));
    }
    (g, keys)
}

fn graph_algebra() -> Result<(), String> {
    let mut rng = StdRng::seed_from_u64(7);
    for trial in 0..200 {
        let (fgt, fk) = random_graph(&mut rng, GraphLabel::Forget);
        let (ret, rk) = random_graph(&mut rng, GraphLabel::Retain);
        let mut conf = Vec::new();
        for a in &fk {
            if rk.iter().any(|b| b == a) && !conf.contains(a) {
                conf.push(a.clone());
            }
        }
        let mut rest = Vec::new();
        for a in &fk {
            if !conf.contains(a) && !rest.contains(a) {
                rest.push(a.clone());
            }
        }
        let got_conf = intersect(&fgt, &ret);
        let test = subtract(&fgt, &got_conf);
        if got_conf != conf.into_iter().collect::<BTreeSet<_>>() {
            return Err(format!("trial {trial}: intersect differs from oracle"));
        }
        if test.keys().map(str::to_owned).collect::<BTreeSet<_>>() != rest.into_iter().collect::<BTreeSet<_>>() {
            return Err(format!("trial {trial}: subtract differs from oracle"));
        }
        if test.keys().any(|k| ret.contains_key(k)) {
            return Err(format!("trial {trial}: test graph shares a key with retain"));
        }
    }
    Ok(())
}

fn lcs_oracle(a: &[&str], b: &[&str]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

fn rouge_oracle() -> Result<(), String> {
    const VOCAB: &[&str] = &["the", "cat", "sat", "on", "mat", "a", "dog", "ran"];
    let mut rng = StdRng::seed_from_u64(11);
    let seq = |rng: &mut StdRng, min: usize| -> Vec<&str> {
        (0..rng.gen_range(min..=20)).map(|_| VOCAB[rng.gen_range(0..VOCAB.len())]).collect()
    };
    for trial in 0..500 {
        let cand = seq(&mut rng, 0);
        let reference = seq(&mut rng, 1);
        let got = rouge_recall(&cand.join(" "), &reference.join(" ")).map_err(|e| e.to_string())?;
        let want = lcs_oracle(&cand, &reference) as f64 / reference.len() as f64;
        if (got - want).abs() > 1e-12 {
            return Err(format!("trial {trial}: {got} vs {want}"));
        }
        let identity = rouge_recall(&reference.join(" "), &reference.join(" ")).unwrap();
        if identity != 1.0 {
            return Err(format!("trial {trial}: identity scored {identity}"));
        }
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn prompt_fidelity() -> Result<(), String> {
    let passage = "The Greek Orthodox Church observes Lent as a period of fasting and spiritual reflection that begins on Clean Monday and lasts for 40 days. During this time, adherents follow strict dietary restrictions and increase their prayer and attendance at special services.";
    let fact = Fact::new("Lent", "religion", "Greek Orthodox", "c").unwrap();
    let p = compose_prompt(&fact, passage);
    if p.system_text != SYSTEM_PROMPT || hex(p.system_text.as_bytes()) != SYSTEM_SHA256 {
        return Err("system text differs from the pinned template".into());
    }
    if hex(USER_PROMPT_TEMPLATE.as_bytes()) != USER_SHA256 {
        return Err("user template differs from the pinned template".into());
    }
    if !SYSTEM_PROMPT.starts_with("You are an expert quiz generator")
        || !USER_PROMPT_TEMPLATE.trim_end().ends_with("Relationship: {relationship}")
    {
        return Err("template boundaries moved".into());
    }
    if !p.user_text.contains(&format!("Text: {passage}\n")) {
        return Err("context not embedded verbatim".into());
    }
    if !p
        .user_text
        .contains("Relationship: {'head': 'Lent', 'type': 'religion', 'tail': 'Greek Orthodox'}")
    {
        return Err("relationship dict not embedded verbatim".into());
    }
    Ok(())
}

fn dedup_soundness() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = PlantedCorpus::new(10, 5, 0);
    corpus.write(&dir.path().join("forget"), &dir.path().join("retain"));
    let mut cfg = planted_config(dir.path(), "acceptance");
    cfg.pipeline.emit_full_suite = true;
    let mut run = Run::open(cfg).map_err(|e| e.to_string())?;
    let (_, suite) = run
        .run_generation(&RuleBasedExtractor::default(), &KQaMock::new(2))
        .map_err(|e| e.to_string())?;
    let s = run.load_dedup_summary().map_err(|e| e.to_string())?;
    if (s.initial_facts, s.overlap_facts, s.final_facts) != (15, 5, 10) {
        return Err(format!(
            "graph sizes {}/{}/{}, expected 15/5/10",
            s.initial_facts, s.overlap_facts, s.final_facts
        ));
    }
    let shared: BTreeSet<String> = PlantedCorpus::keys(&corpus.shared).into_iter().collect();
    if suite.qa_pairs.iter().any(|qa| shared.contains(&qa.fact_key)) {
        return Err("deduplicated suite anchors a shared fact".into());
    }
    let (_, dedup) = run
        .run_audit(&memorizer(&corpus.shared), &common::ContainsNli)
        .map_err(|e| e.to_string())?;
    let impact = run.load_impact().map_err(|e| e.to_string())?.ok_or("no full-suite report")?;
    if dedup.kmc_rouge_count != 0 || dedup.kmc_entail_count != 0 {
        return Err(format!("dedup suite has {} / {} KMCs", dedup.kmc_rouge_count, dedup.kmc_entail_count));
    }
    if impact.full.kmc_rouge_count == 0 || impact.full.kmc_entail_count == 0 {
        return Err("full suite shows no KMCs".into());
    }
    Ok(())
}

fn suite_cap_and_coverage() -> Result<(), String> {
    let n = 12;
    let chunks: ChunkStore = (0..n)
        .map(|i| TextChunk {
            chunk_id: format!("c{i}"),
            doc_id: "d".into(),
            start: 0,
            end: 4,
            text: "text".into(),
        })
        .collect();
    let mut g = KnowledgeGraph::new(GraphLabel::Test);
    for i in 0..n {
        g.add_fact(Fact::new(format!("Head {i}"), "rel", format!("Tail {i}"), format!("c{i}")).unwrap());
    }
    let stamp = chrono::DateTime::UNIX_EPOCH;
    for k in 1..=5 {
        let suite = synthesize_suite(&g, &chunks, &KQaMock::new(k), &SynthesisConfig::default(), "s", stamp)
            .map_err(|e| e.to_string())?;
        if suite.len() != k * g.len() {
            return Err(format!("k={k}: {} pairs for {} facts", suite.len(), g.len()));
        }
        let covered: BTreeSet<&str> = suite.qa_pairs.iter().map(|q| q.fact_key.as_str()).collect();
        if covered != g.keys().collect() {
            return Err(format!("k={k}: not every fact is covered"));
        }
    }
    Ok(())
}

/// Answer latency is wall-clock; everything else must match byte for byte.
fn comparable(files: BTreeMap<String, Vec<u8>>) -> BTreeMap<String, Vec<u8>> {
    files
        .into_iter()
        .map(|(rel, bytes)| {
            if !rel.ends_with("answers.jsonl") {
                return (rel, bytes);
            }
            let text = String::from_utf8(bytes).unwrap();
            let stripped: String = text
                .lines()
                .map(|l| {
                    let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                    v.as_object_mut().unwrap().remove("latency_ms");
                    v.to_string() + "\n"
                })
                .collect();
            (rel, stripped.into_bytes())
        })
        .collect()
}

fn resumability() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = PlantedCorpus::new(8, 4, 2);
    corpus.write(&dir.path().join("forget"), &dir.path().join("retain"));
    let mut cfg = planted_config(dir.path(), "resume");
    cfg.pipeline.emit_full_suite = true;
    let full_run = |run: &mut Run| -> Result<(), String> {
        run.run_generation(&RuleBasedExtractor::default(), &KQaMock::new(3))
            .map_err(|e| e.to_string())?;
        run.run_audit(&memorizer(&corpus.shared), &common::ContainsNli)
            .map_err(|e| e.to_string())?;
        run.report().map_err(|e| e.to_string())?;
        Ok(())
    };
    let mut run = Run::open(cfg.clone()).map_err(|e| e.to_string())?;
    full_run(&mut run)?;
    let before = comparable(snapshot(run.root()));
    for stage in ["dedup", "synthesize", "answer", "judge", "report"] {
        std::fs::remove_dir_all(run.path(stage)).map_err(|e| e.to_string())?;
    }
    let mut run = Run::open(cfg).map_err(|e| e.to_string())?;
    full_run(&mut run)?;
    let after = comparable(snapshot(run.root()));
    if before != after {
        let differing: Vec<_> = before
            .keys()
            .chain(after.keys())
            .filter(|k| before.get(*k) != after.get(*k))
            .collect();
        return Err(format!("artifacts differ: {differing:?}"));
    }
    Ok(())
}

/// Builds every backend from a config with no endpoints at all and runs the
/// whole pipeline on them.
fn offline_only() -> Result<(), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = PlantedCorpus::new(6, 2, 1);
    corpus.write(&dir.path().join("forget"), &dir.path().join("retain"));
    let cfg = planted_config(dir.path(), "offline");
    if cfg.extractor.endpoint_url.is_some()
        || cfg.synthesis.endpoint_url.is_some()
        || cfg.evaluation.nli_endpoint.is_some()
        || cfg.evaluation.model_endpoint.is_some()
    {
        return Err("offline config names an endpoint".into());
    }
    let extractor = cfg.extractor.build()?;
    let llm = cfg.synthesis.build_client()?;
    let nli = cfg.evaluation.build_nli_client()?;
    let mut run = Run::open(cfg).map_err(|e| e.to_string())?;
    let (_, suite) = run.run_generation(extractor.as_ref(), llm.as_ref()).map_err(|e| e.to_string())?;
    if suite.is_empty() {
        return Err("template generator produced no questions".into());
    }
    run.run_audit(&memorizer(&corpus.forget_only), nli.as_ref())
        .map_err(|e| e.to_string())?;
    run.report().map_err(|e| e.to_string())?;
    Ok(())
}

type Criterion = (&'static str, Option<Duration>, fn() -> Result<(), String>);

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("graph algebra oracle (200 trials)", Some(Duration::from_secs(5)), graph_algebra),
        ("ROUGE-L oracle (500 trials)", Some(Duration::from_secs(5)), rouge_oracle),
        ("prompt fidelity on the Lent example", None, prompt_fidelity),
        ("end-to-end dedup soundness", Some(Duration::from_secs(10)), dedup_soundness),
        ("suite cap and coverage, k = 1..5", None, suite_cap_and_coverage),
        ("resumability is byte-identical", None, resumability),
        ("runs with offline backends only", None, offline_only),
    ];
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let started = Instant::now();
        let result = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r,
            Err(_) => Err("panicked".into()),
        };
        let elapsed = started.elapsed();
        let result = result.and_then(|()| match budget {
            Some(b) if elapsed > b => Err(format!("took {elapsed:.2?}, budget {b:?}")),
            _ => Ok(()),
        });
        match result {
            Ok(()) => println!("PASS  {name} ({elapsed:.2?})"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
