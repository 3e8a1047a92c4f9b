//! Stage orchestration with on-disk checkpoints.
//!
//! Layout under `<run_dir>/<run_id>/`:
//!
//! ```text
//! manifest.json
//! ingest/      forget_chunks.jsonl retain_chunks.jsonl summary.json
//! extract/     forget_graph.jsonl retain_graph.jsonl (+ .meta.json) report.json
//! dedup/       test_graph.jsonl (+ .meta.json) conflicts.jsonl summary.json
//! synthesize/  suite.jsonl (+ sidecars) [full_suite.jsonl (+ sidecars)]
//! answer/      answers.jsonl [full_answers.jsonl] meta.json
//! judge/       verdicts.jsonl report.json [full_verdicts.jsonl full_report.json impact.json]
//! report/      report.txt
//! ```
//!
//! A stage counts as done when the manifest says so and every file it lists
//! for that stage still exists. Re-executing a stage marks every later stage
//! pending.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};

use crate::client::GenerationClient;
use crate::config::{Config, ConfigError};
use crate::corpus::{self, ChunkStore, CorpusError, CorpusLabel, TextChunk};
use crate::evaluation::{
    self, AuditReport, EntailmentClient, EvalError, ImpactReport, JudgeVerdict, ModelAnswer,
};
use crate::extraction::{self, BuildReport, Extractor};
use crate::jsonl::{self, JsonlError};
use crate::kg::{self, GraphStats, KgError, KnowledgeGraph, NORMALIZATION_VERSION};
use crate::synthesis::{self, AuditSuite, SynthError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Extract,
    Dedup,
    Synthesize,
    Answer,
    Judge,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Extract,
        Stage::Dedup,
        Stage::Synthesize,
        Stage::Answer,
        Stage::Judge,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Extract => "extract",
            Stage::Dedup => "dedup",
            Stage::Synthesize => "synthesize",
            Stage::Answer => "answer",
            Stage::Judge => "judge",
            Stage::Report => "report",
        }
    }

    fn prerequisite(self) -> Option<Stage> {
        let idx = Stage::ALL.iter().position(|s| *s == self)?;
        idx.checked_sub(1).map(|i| Stage::ALL[i])
    }

    fn downstream(self) -> impl Iterator<Item = Stage> {
        Stage::ALL.into_iter().filter(move |s| *s > self)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    #[default]
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    pub normalization_version: String,
    pub generation_fingerprint: String,
    pub stage_status: BTreeMap<Stage, StageStatus>,
    /// Files written by each stage, relative to the run directory.
    pub artifact_paths: BTreeMap<Stage, Vec<String>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub stage_notes: BTreeMap<Stage, String>,
    pub config_snapshot: serde_json::Value,
}

impl RunManifest {
    pub fn status(&self, stage: Stage) -> StageStatus {
        self.stage_status.get(&stage).copied().unwrap_or_default()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run {run_id} was started with different generation settings; use a new run_id")]
    ConfigMismatch { run_id: String },
    #[error("run {run_id} uses normalization {found}, this build uses {expected}")]
    NormalizationMismatch {
        run_id: String,
        found: String,
        expected: String,
    },
    #[error("stage {stage} needs {needs} to be done first")]
    StageNotReady { stage: Stage, needs: Stage },
    #[error("forget corpus contains no documents")]
    EmptyForgetCorpus,
    #[error("synthesis failed for all {0} facts")]
    SynthesisFailed(usize),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Result of one stage execution.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    /// Failed units exceeded `pipeline.failure_threshold`.
    pub partial: bool,
    pub summary: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub forget_documents: usize,
    pub retain_documents: usize,
    pub forget_chunks: usize,
    pub retain_chunks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractSummary {
    pub forget: BuildReport,
    pub retain: BuildReport,
}

/// Fact counts before and after removing retain overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupSummary {
    pub initial_facts: usize,
    pub overlap_facts: usize,
    pub final_facts: usize,
    pub forget: GraphStats,
    pub retain: GraphStats,
    pub test: GraphStats,
}

mod files {
    pub const FORGET_CHUNKS: &str = "ingest/forget_chunks.jsonl";
    pub const RETAIN_CHUNKS: &str = "ingest/retain_chunks.jsonl";
    pub const INGEST_SUMMARY: &str = "ingest/summary.json";
    pub const FORGET_GRAPH: &str = "extract/forget_graph.jsonl";
    pub const RETAIN_GRAPH: &str = "extract/retain_graph.jsonl";
    pub const EXTRACT_REPORT: &str = "extract/report.json";
    pub const TEST_GRAPH: &str = "dedup/test_graph.jsonl";
    pub const CONFLICTS: &str = "dedup/conflicts.jsonl";
    pub const DEDUP_SUMMARY: &str = "dedup/summary.json";
    pub const SUITE: &str = "synthesize/suite.jsonl";
    pub const FULL_SUITE: &str = "synthesize/full_suite.jsonl";
    pub const ANSWERS: &str = "answer/answers.jsonl";
    pub const FULL_ANSWERS: &str = "answer/full_answers.jsonl";
    pub const ANSWER_META: &str = "answer/meta.json";
    pub const VERDICTS: &str = "judge/verdicts.jsonl";
    pub const JUDGE_REPORT: &str = "judge/report.json";
    pub const FULL_VERDICTS: &str = "judge/full_verdicts.jsonl";
    pub const FULL_REPORT: &str = "judge/full_report.json";
    pub const IMPACT: &str = "judge/impact.json";
    pub const REPORT_TEXT: &str = "report/report.txt";

    pub fn with_suffix(path: &str, suffix: &str) -> String {
        format!("{path}{suffix}")
    }

    pub fn graph(path: &str) -> Vec<String> {
        vec![path.to_string(), with_suffix(path, ".meta.json")]
    }

    pub fn suite(path: &str) -> Vec<String> {
        vec![
            path.to_string(),
            with_suffix(path, ".meta.json"),
            with_suffix(path, ".outcomes.jsonl"),
        ]
    }
}

/// One run directory and its manifest.
#[derive(Debug)]
pub struct Run {
    cfg: Config,
    root: PathBuf,
    manifest: RunManifest,
}

impl Run {
    /// Open or create the run described by `cfg`. Nothing is written until a
    /// stage executes.
    pub fn open(cfg: Config) -> Result<Self, PipelineError> {
        cfg.validate_basic()?;
        let root = cfg.run_root();
        let run_id = cfg.effective_run_id();
        let manifest_path = root.join("manifest.json");
        let fingerprint = cfg.generation_fingerprint();
        let manifest = if manifest_path.exists() {
            let m: RunManifest = jsonl::read_json(&manifest_path)?;
            if m.generation_fingerprint != fingerprint {
                return Err(PipelineError::ConfigMismatch { run_id });
            }
            if m.normalization_version != NORMALIZATION_VERSION {
                return Err(PipelineError::NormalizationMismatch {
                    run_id,
                    found: m.normalization_version,
                    expected: NORMALIZATION_VERSION.into(),
                });
            }
            m
        } else {
            RunManifest {
                run_id,
                created_at: Utc::now().trunc_subsecs(0),
                normalization_version: NORMALIZATION_VERSION.into(),
                generation_fingerprint: fingerprint,
                stage_status: Stage::ALL.iter().map(|s| (*s, StageStatus::Pending)).collect(),
                artifact_paths: BTreeMap::new(),
                stage_notes: BTreeMap::new(),
                config_snapshot: serde_json::to_value(&cfg).expect("config serializes"),
            }
        };
        Ok(Self { cfg, root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Done in the manifest and every recorded artifact present.
    pub fn is_done(&self, stage: Stage) -> bool {
        self.manifest.status(stage) == StageStatus::Done
            && self
                .manifest
                .artifact_paths
                .get(&stage)
                .is_some_and(|files| files.iter().all(|f| self.path(f).is_file()))
    }

    fn save_manifest(&self) -> Result<(), PipelineError> {
        jsonl::write_json(&self.root.join("manifest.json"), &self.manifest)?;
        Ok(())
    }

    fn require(&self, stage: Stage) -> Result<(), PipelineError> {
        match stage.prerequisite() {
            Some(needs) if !self.is_done(needs) => Err(PipelineError::StageNotReady { stage, needs }),
            _ => Ok(()),
        }
    }

    fn begin(&mut self, stage: Stage) -> Result<(), PipelineError> {
        self.require(stage)?;
        let dir = self.root.join(stage.as_str());
        fs::create_dir_all(&dir).map_err(|source| PipelineError::Io { path: dir, source })?;
        self.manifest.stage_status.insert(stage, StageStatus::Pending);
        for later in stage.downstream() {
            self.manifest.stage_status.insert(later, StageStatus::Pending);
        }
        Ok(())
    }

    fn finish<T>(
        &mut self,
        stage: Stage,
        result: Result<(Vec<String>, StageOutcome, T), PipelineError>,
    ) -> Result<(StageOutcome, T), PipelineError> {
        match result {
            Ok((files, outcome, value)) => {
                self.manifest.stage_status.insert(stage, StageStatus::Done);
                self.manifest.artifact_paths.insert(stage, files);
                if outcome.partial {
                    self.manifest.stage_notes.insert(stage, outcome.summary.clone());
                } else {
                    self.manifest.stage_notes.remove(&stage);
                }
                self.save_manifest()?;
                Ok((outcome, value))
            }
            Err(e) => {
                self.manifest.stage_status.insert(stage, StageStatus::Failed);
                self.manifest.stage_notes.insert(stage, e.to_string());
                self.save_manifest()?;
                Err(e)
            }
        }
    }

    fn partial(&self, failed: usize, total: usize) -> bool {
        total > 0 && failed as f64 / total as f64 > self.cfg.pipeline.failure_threshold
    }

    pub fn load_chunks(&self, label: CorpusLabel) -> Result<Vec<TextChunk>, PipelineError> {
        let rel = match label {
            CorpusLabel::Forget => files::FORGET_CHUNKS,
            CorpusLabel::Retain => files::RETAIN_CHUNKS,
        };
        Ok(corpus::read_chunks(&self.path(rel))?)
    }

    pub fn chunk_store(&self) -> Result<ChunkStore, PipelineError> {
        Ok(self.load_chunks(CorpusLabel::Forget)?.into_iter().collect())
    }

    pub fn load_graph(&self, label: kg::GraphLabel) -> Result<KnowledgeGraph, PipelineError> {
        let rel = match label {
            kg::GraphLabel::Forget => files::FORGET_GRAPH,
            kg::GraphLabel::Retain => files::RETAIN_GRAPH,
            kg::GraphLabel::Test => files::TEST_GRAPH,
        };
        Ok(KnowledgeGraph::load(&self.path(rel))?)
    }

    pub fn load_conflicts(&self) -> Result<BTreeSet<String>, PipelineError> {
        Ok(jsonl::read::<String>(&self.path(files::CONFLICTS))?.into_iter().collect())
    }

    pub fn load_suite(&self) -> Result<AuditSuite, PipelineError> {
        Ok(AuditSuite::load(&self.path(files::SUITE))?)
    }

    pub fn load_full_suite(&self) -> Result<Option<AuditSuite>, PipelineError> {
        let path = self.path(files::FULL_SUITE);
        if self.stage_file_listed(Stage::Synthesize, files::FULL_SUITE) {
            Ok(Some(AuditSuite::load(&path)?))
        } else {
            Ok(None)
        }
    }

    pub fn load_report(&self) -> Result<AuditReport, PipelineError> {
        Ok(jsonl::read_json(&self.path(files::JUDGE_REPORT))?)
    }

    pub fn load_impact(&self) -> Result<Option<ImpactReport>, PipelineError> {
        if self.stage_file_listed(Stage::Judge, files::IMPACT) {
            Ok(Some(jsonl::read_json(&self.path(files::IMPACT))?))
        } else {
            Ok(None)
        }
    }

    pub fn load_dedup_summary(&self) -> Result<DedupSummary, PipelineError> {
        Ok(jsonl::read_json(&self.path(files::DEDUP_SUMMARY))?)
    }

    fn stage_file_listed(&self, stage: Stage, rel: &str) -> bool {
        self.manifest
            .artifact_paths
            .get(&stage)
            .is_some_and(|f| f.iter().any(|p| p == rel))
    }

    /// Load both corpora and persist their chunks.
    pub fn ingest(&mut self) -> Result<StageOutcome, PipelineError> {
        self.cfg.validate_generation()?;
        self.begin(Stage::Ingest)?;
        let result = self.do_ingest();
        self.finish(Stage::Ingest, result).map(|(o, _)| o)
    }

    fn do_ingest(&self) -> Result<(Vec<String>, StageOutcome, ()), PipelineError> {
        let chunk_cfg = self.cfg.corpus.chunk_config();
        let forget_path = self.cfg.corpus.forget.as_deref().expect("validated");
        let retain_path = self.cfg.corpus.retain.as_deref().expect("validated");
        let forget_docs = corpus::load_corpus(forget_path, CorpusLabel::Forget)?;
        if forget_docs.is_empty() {
            return Err(PipelineError::EmptyForgetCorpus);
        }
        let retain_docs = corpus::load_corpus(retain_path, CorpusLabel::Retain)?;
        let forget_chunks = corpus::segment_corpus(&forget_docs, &chunk_cfg);
        let retain_chunks = corpus::segment_corpus(&retain_docs, &chunk_cfg);
        corpus::write_chunks(&self.path(files::FORGET_CHUNKS), &forget_chunks)?;
        corpus::write_chunks(&self.path(files::RETAIN_CHUNKS), &retain_chunks)?;
        let summary = IngestSummary {
            forget_documents: forget_docs.len(),
            retain_documents: retain_docs.len(),
            forget_chunks: forget_chunks.len(),
            retain_chunks: retain_chunks.len(),
        };
        jsonl::write_json(&self.path(files::INGEST_SUMMARY), &summary)?;
        let outcome = StageOutcome {
            stage: Stage::Ingest,
            partial: false,
            summary: format!(
                "forget: {} documents, {} chunks; retain: {} documents, {} chunks",
                summary.forget_documents, summary.forget_chunks, summary.retain_documents, summary.retain_chunks
            ),
        };
        let written = vec![
            files::FORGET_CHUNKS.into(),
            files::RETAIN_CHUNKS.into(),
            files::INGEST_SUMMARY.into(),
        ];
        Ok((written, outcome, ()))
    }

    /// Build the forget and retain graphs.
    pub fn extract(&mut self, extractor: &dyn Extractor) -> Result<StageOutcome, PipelineError> {
        self.begin(Stage::Extract)?;
        let result = self.do_extract(extractor);
        self.finish(Stage::Extract, result).map(|(o, _)| o)
    }

    fn do_extract(&self, extractor: &dyn Extractor) -> Result<(Vec<String>, StageOutcome, ()), PipelineError> {
        let concurrency = self.cfg.extractor.concurrency;
        let forget = extraction::build_graph(
            &self.load_chunks(CorpusLabel::Forget)?,
            extractor,
            CorpusLabel::Forget,
            concurrency,
        );
        let retain = extraction::build_graph(
            &self.load_chunks(CorpusLabel::Retain)?,
            extractor,
            CorpusLabel::Retain,
            concurrency,
        );
        forget.graph.save(&self.path(files::FORGET_GRAPH))?;
        retain.graph.save(&self.path(files::RETAIN_GRAPH))?;
        let summary = ExtractSummary {
            forget: forget.report,
            retain: retain.report,
        };
        jsonl::write_json(&self.path(files::EXTRACT_REPORT), &summary)?;

        let failed = summary.forget.failures.len() + summary.retain.failures.len();
        let total = summary.forget.chunks_total + summary.retain.chunks_total;
        let outcome = StageOutcome {
            stage: Stage::Extract,
            partial: self.partial(failed, total),
            summary: format!(
                "forget graph: {} facts; retain graph: {} facts; {failed}/{total} chunks failed",
                forget.graph.len(),
                retain.graph.len()
            ),
        };
        let mut written = files::graph(files::FORGET_GRAPH);
        written.extend(files::graph(files::RETAIN_GRAPH));
        written.push(files::EXTRACT_REPORT.into());
        Ok((written, outcome, ()))
    }

    /// Conflict set and test graph.
    pub fn dedup(&mut self) -> Result<(StageOutcome, DedupSummary), PipelineError> {
        self.begin(Stage::Dedup)?;
        let result = self.do_dedup();
        self.finish(Stage::Dedup, result)
    }

    fn do_dedup(&self) -> Result<(Vec<String>, StageOutcome, DedupSummary), PipelineError> {
        let forget = self.load_graph(kg::GraphLabel::Forget)?;
        let retain = self.load_graph(kg::GraphLabel::Retain)?;
        let conflicts = kg::intersect(&forget, &retain);
        let test = kg::subtract(&forget, &conflicts);
        test.save(&self.path(files::TEST_GRAPH))?;
        jsonl::write(&self.path(files::CONFLICTS), &conflicts)?;
        let summary = DedupSummary {
            initial_facts: forget.len(),
            overlap_facts: conflicts.len(),
            final_facts: test.len(),
            forget: forget.stats(),
            retain: retain.stats(),
            test: test.stats(),
        };
        jsonl::write_json(&self.path(files::DEDUP_SUMMARY), &summary)?;
        let outcome = StageOutcome {
            stage: Stage::Dedup,
            partial: false,
            summary: format!(
                "initial facts: {}, overlap: {}, final facts: {}",
                summary.initial_facts, summary.overlap_facts, summary.final_facts
            ),
        };
        let mut written = files::graph(files::TEST_GRAPH);
        written.push(files::CONFLICTS.into());
        written.push(files::DEDUP_SUMMARY.into());
        Ok((written, outcome, summary))
    }

    /// Generate the deduplicated suite and, if configured, the full suite.
    pub fn synthesize(&mut self, llm: &dyn GenerationClient) -> Result<(StageOutcome, AuditSuite), PipelineError> {
        self.begin(Stage::Synthesize)?;
        let result = self.do_synthesize(llm);
        self.finish(Stage::Synthesize, result)
    }

    fn do_synthesize(
        &self,
        llm: &dyn GenerationClient,
    ) -> Result<(Vec<String>, StageOutcome, AuditSuite), PipelineError> {
        let chunks = self.chunk_store()?;
        let test = self.load_graph(kg::GraphLabel::Test)?;
        let scfg = &self.cfg.synthesis;
        let run_id = &self.manifest.run_id;
        let stamp = self.manifest.created_at;
        let suite = synthesis::synthesize_suite(&test, &chunks, llm, scfg, &format!("{run_id}/dedup"), stamp)?;
        if !test.is_empty() && suite.failed_facts() == test.len() {
            return Err(PipelineError::SynthesisFailed(test.len()));
        }
        suite.save(&self.path(files::SUITE))?;
        let mut written = files::suite(files::SUITE);
        let mut failed = suite.failed_facts();
        let mut attempted = suite.outcomes.len();

        if self.cfg.pipeline.emit_full_suite {
            // Shared facts only; test-fact pairs are reused from the dedup suite.
            let forget = self.load_graph(kg::GraphLabel::Forget)?;
            let shared = kg::subtract(&forget, &test.keys().map(str::to_owned).collect());
            let extra = synthesis::synthesize_suite(&shared, &chunks, llm, scfg, "", stamp)?;
            failed += extra.failed_facts();
            attempted += extra.outcomes.len();
            let mut qa_pairs = suite.qa_pairs.clone();
            qa_pairs.extend(extra.qa_pairs);
            let mut outcomes = suite.outcomes.clone();
            outcomes.extend(extra.outcomes);
            outcomes.sort_by(|a, b| a.fact_key.cmp(&b.fact_key));
            let full = AuditSuite {
                suite_id: format!("{run_id}/full"),
                qa_pairs,
                generation_meta: suite.generation_meta.clone(),
                outcomes,
            };
            full.save(&self.path(files::FULL_SUITE))?;
            written.extend(files::suite(files::FULL_SUITE));
        }

        let outcome = StageOutcome {
            stage: Stage::Synthesize,
            partial: self.partial(failed, attempted),
            summary: format!(
                "{} facts, {} QA pairs (average {:.2}), {} facts failed",
                suite.outcomes.len(),
                suite.len(),
                suite.average_pairs_per_fact(),
                suite.failed_facts()
            ),
        };
        Ok((written, outcome, suite))
    }

    /// Query the model under test with every question.
    pub fn answer(&mut self, model: &dyn GenerationClient) -> Result<StageOutcome, PipelineError> {
        self.begin(Stage::Answer)?;
        let result = self.do_answer(model);
        self.finish(Stage::Answer, result).map(|(o, _)| o)
    }

    fn do_answer(&self, model: &dyn GenerationClient) -> Result<(Vec<String>, StageOutcome, ()), PipelineError> {
        let ecfg = &self.cfg.evaluation;
        let suite = self.load_suite()?;
        let answers = evaluation::ask_model(&suite, model, ecfg);
        jsonl::write(&self.path(files::ANSWERS), &answers)?;
        let mut written = vec![files::ANSWERS.to_string()];
        let mut failed = answers.iter().filter(|a| a.failed).count();
        let mut total = answers.len();
        if let Some(full) = self.load_full_suite()? {
            let full_answers = evaluation::ask_model(&full, model, ecfg);
            failed += full_answers.iter().filter(|a| a.failed).count();
            total += full_answers.len();
            jsonl::write(&self.path(files::FULL_ANSWERS), &full_answers)?;
            written.push(files::FULL_ANSWERS.into());
        }
        jsonl::write_json(&self.path(files::ANSWER_META), ecfg)?;
        written.push(files::ANSWER_META.into());
        let outcome = StageOutcome {
            stage: Stage::Answer,
            partial: self.partial(failed, total),
            summary: format!("{total} questions asked, {failed} failed"),
        };
        Ok((written, outcome, ()))
    }

    /// Score answers, aggregate, and compare against the full suite when present.
    pub fn judge(&mut self, nli: &dyn EntailmentClient) -> Result<(StageOutcome, AuditReport), PipelineError> {
        self.begin(Stage::Judge)?;
        let result = self.do_judge(nli);
        self.finish(Stage::Judge, result)
    }

    fn judge_one(
        &self,
        suite: &AuditSuite,
        answers_rel: &str,
        verdicts_rel: &str,
        report_rel: &str,
        nli: &dyn EntailmentClient,
    ) -> Result<AuditReport, PipelineError> {
        let answers: Vec<ModelAnswer> = jsonl::read(&self.path(answers_rel))?;
        let verdicts: Vec<JudgeVerdict> =
            evaluation::judge_suite(suite, &answers, nli, self.cfg.evaluation.concurrency)?;
        jsonl::write(&self.path(verdicts_rel), &verdicts)?;
        let report = evaluation::aggregate(&suite.suite_id, &verdicts);
        jsonl::write_json(&self.path(report_rel), &report)?;
        Ok(report)
    }

    fn do_judge(&self, nli: &dyn EntailmentClient) -> Result<(Vec<String>, StageOutcome, AuditReport), PipelineError> {
        let suite = self.load_suite()?;
        let report = self.judge_one(&suite, files::ANSWERS, files::VERDICTS, files::JUDGE_REPORT, nli)?;
        let mut written = vec![files::VERDICTS.to_string(), files::JUDGE_REPORT.to_string()];
        let mut summary = format!(
            "{} cases: {} ROUGE KMCs, {} entailment KMCs",
            report.n_cases, report.kmc_rouge_count, report.kmc_entail_count
        );
        if self.stage_file_listed(Stage::Answer, files::FULL_ANSWERS) {
            if let Some(full) = self.load_full_suite()? {
                let full_report =
                    self.judge_one(&full, files::FULL_ANSWERS, files::FULL_VERDICTS, files::FULL_REPORT, nli)?;
                let impact = evaluation::redundancy_impact(&full_report, &report);
                jsonl::write_json(&self.path(files::IMPACT), &impact)?;
                written.extend([files::FULL_VERDICTS.into(), files::FULL_REPORT.into(), files::IMPACT.into()]);
                summary.push_str(&format!(
                    "; full suite: {} ROUGE KMCs, {} entailment KMCs",
                    full_report.kmc_rouge_count, full_report.kmc_entail_count
                ));
            }
        }
        let errors = report.judge_errors;
        let outcome = StageOutcome {
            stage: Stage::Judge,
            partial: self.partial(errors, report.n_cases),
            summary,
        };
        Ok((written, outcome, report))
    }

    /// Render the KMC table for this run.
    pub fn report(&mut self) -> Result<(StageOutcome, String), PipelineError> {
        self.begin(Stage::Report)?;
        let result = self.do_report();
        self.finish(Stage::Report, result)
    }

    pub fn render_report(&self) -> Result<String, PipelineError> {
        let report = self.load_report()?;
        let name = self.cfg.evaluation.model_name.clone();
        let mut rows = vec![(name.clone(), report)];
        let impact = self.load_impact()?;
        if let Some(impact) = &impact {
            rows.push((format!("{name} (full suite)"), impact.full.clone()));
        }
        let mut text = evaluation::render_kmc_table(&rows);
        if let Some(i) = impact {
            text.push_str(&format!(
                "\nRedundancy impact: ROUGE KMCs -{:.1}%, entailment KMCs -{:.1}%, \
                 mean ROUGE inflation {:.1}%, entailment-rate inflation {:.1}%\n",
                i.kmc_drop_rouge_pct, i.kmc_drop_entail_pct, i.rouge_inflation_pct, i.entail_inflation_pct
            ));
        }
        Ok(text)
    }

    fn do_report(&self) -> Result<(Vec<String>, StageOutcome, String), PipelineError> {
        let text = self.render_report()?;
        let path = self.path(files::REPORT_TEXT);
        fs::write(&path, &text).map_err(|source| PipelineError::Io { path, source })?;
        let outcome = StageOutcome {
            stage: Stage::Report,
            partial: false,
            summary: format!("wrote {}", files::REPORT_TEXT),
        };
        Ok((vec![files::REPORT_TEXT.into()], outcome, text))
    }

    /// Run every generation stage that is not already done and return the
    /// deduplicated suite.
    pub fn run_generation(
        &mut self,
        extractor: &dyn Extractor,
        llm: &dyn GenerationClient,
    ) -> Result<(Vec<StageOutcome>, AuditSuite), PipelineError> {
        self.cfg.validate_generation()?;
        let mut outcomes = Vec::new();
        if !self.is_done(Stage::Ingest) {
            outcomes.push(self.ingest()?);
        }
        if !self.is_done(Stage::Extract) {
            outcomes.push(self.extract(extractor)?);
        }
        if !self.is_done(Stage::Dedup) {
            outcomes.push(self.dedup()?.0);
        }
        if !self.is_done(Stage::Synthesize) {
            let (outcome, suite) = self.synthesize(llm)?;
            outcomes.push(outcome);
            return Ok((outcomes, suite));
        }
        Ok((outcomes, self.load_suite()?))
    }

    /// Answer, judge and aggregate over the persisted suite.
    pub fn run_audit(
        &mut self,
        model: &dyn GenerationClient,
        nli: &dyn EntailmentClient,
    ) -> Result<(Vec<StageOutcome>, AuditReport), PipelineError> {
        let answered = self.answer(model)?;
        let (judged, report) = self.judge(nli)?;
        Ok((vec![answered, judged], report))
    }
}
