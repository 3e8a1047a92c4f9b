//! Run configuration: a TOML file overlaid with `section.key=value` overrides.
//!
//! Precedence is defaults < file < overrides, applied in the order given.
//! Unknown keys anywhere are rejected. API keys are never part of the config;
//! they come from the environment (see [`crate::client`]).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::ChunkConfig;
use crate::evaluation::EvaluationConfig;
use crate::extraction::ExtractorConfig;
use crate::synthesis::SynthesisConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid override {0:?}: expected section.key=value")]
    BadOverride(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub forget: Option<PathBuf>,
    pub retain: Option<PathBuf>,
    pub window_words: usize,
    pub overlap_words: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let chunk = ChunkConfig::default();
        Self {
            forget: None,
            retain: None,
            window_words: chunk.window_words,
            overlap_words: chunk.overlap_words,
        }
    }
}

impl CorpusConfig {
    pub fn chunk_config(&self) -> ChunkConfig {
        ChunkConfig {
            window_words: self.window_words,
            overlap_words: self.overlap_words,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Also synthesize, answer and judge the non-deduplicated suite.
    pub emit_full_suite: bool,
    /// Fraction of failed units (chunks, facts, questions) above which a
    /// stage reports partial failure.
    pub failure_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            emit_full_suite: false,
            failure_threshold: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run_dir: PathBuf,
    /// Defaults to a fingerprint of the generation settings.
    pub run_id: Option<String>,
    pub corpus: CorpusConfig,
    pub extractor: ExtractorConfig,
    pub synthesis: SynthesisConfig,
    pub evaluation: EvaluationConfig,
    pub pipeline: PipelineConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs"),
            run_id: None,
            corpus: CorpusConfig::default(),
            extractor: ExtractorConfig::default(),
            synthesis: SynthesisConfig::default(),
            evaluation: EvaluationConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

/// Parse an override value as a TOML literal, falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, path: &str, raw: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::BadOverride(format!("{path}={raw}")));
    }
    let (leaf, sections) = parts.split_last().expect("split yields at least one part");
    let mut cursor = table;
    for section in sections {
        let entry = cursor
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| ConfigError::BadOverride(format!("{path}: {section} is not a section")))?;
    }
    cursor.insert(leaf.to_string(), override_value(raw));
    Ok(())
}

impl Config {
    /// Build from an optional TOML file plus `(path, value)` overrides.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
                    path: path.to_path_buf(),
                    source,
                })?;
                toml::from_str::<toml::Table>(&text).map_err(|e| ConfigError::Parse(e.to_string()))?
            }
            None => toml::Table::new(),
        };
        for (path, value) in overrides {
            apply_override(&mut table, path, value)?;
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate_basic()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate_basic()?;
        Ok(cfg)
    }

    /// Checks that hold for every subcommand.
    pub fn validate_basic(&self) -> Result<(), ConfigError> {
        self.corpus
            .chunk_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.pipeline.failure_threshold) {
            return Err(ConfigError::Invalid("pipeline.failure_threshold must be within [0, 1]".into()));
        }
        if let Some(id) = &self.run_id {
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                return Err(ConfigError::Invalid(format!("run_id {id:?} is not a plain directory name")));
            }
        }
        Ok(())
    }

    /// Everything the generation stages need, including that both corpus
    /// paths exist.
    pub fn validate_generation(&self) -> Result<(), ConfigError> {
        self.validate_basic()?;
        for (name, path) in [("corpus.forget", &self.corpus.forget), ("corpus.retain", &self.corpus.retain)] {
            match path {
                None => return Err(ConfigError::Invalid(format!("{name} is not set"))),
                Some(p) if !p.exists() => {
                    return Err(ConfigError::Invalid(format!("{name} {} does not exist", p.display())))
                }
                Some(_) => {}
            }
        }
        self.extractor.validate().map_err(ConfigError::Invalid)?;
        self.synthesis.validate().map_err(ConfigError::Invalid)?;
        Ok(())
    }

    /// Hash of the settings that determine generation artifacts.
    pub fn generation_fingerprint(&self) -> String {
        let view = serde_json::json!({
            "corpus": self.corpus,
            "extractor": self.extractor,
            "synthesis": self.synthesis,
            "emit_full_suite": self.pipeline.emit_full_suite,
        });
        let digest = Sha256::digest(view.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn effective_run_id(&self) -> String {
        self.run_id
            .clone()
            .unwrap_or_else(|| format!("run-{}", &self.generation_fingerprint()[..12]))
    }

    pub fn run_root(&self) -> PathBuf {
        self.run_dir.join(self.effective_run_id())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::Backend;

    #[test]
    fn defaults_match_documented_values() {
        let cfg = Config::default();
        assert_eq!(cfg.corpus.window_words, 256);
        assert_eq!(cfg.corpus.overlap_words, 32);
        assert_eq!(cfg.synthesis.temperature, 0.2);
        assert_eq!(cfg.synthesis.context_budget, 4_000);
        assert_eq!(cfg.synthesis.max_retries, 2);
    }

    #[test]
    fn file_then_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.toml");
        std::fs::write(
            &path,
            "run_dir = \"out\"\n[corpus]\nwindow_words = 64\n[synthesis]\ntemperature = 0.7\n",
        )
        .unwrap();
        let cfg = Config::load(
            Some(&path),
            &[
                ("synthesis.temperature".into(), "0.1".into()),
                ("extractor.backend".into(), "remote".into()),
                ("extractor.endpoint_url".into(), "http://localhost:9/extract".into()),
                ("extractor.verbs".into(), "[\"loves\"]".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.run_dir, PathBuf::from("out"));
        assert_eq!(cfg.corpus.window_words, 64);
        assert_eq!(cfg.synthesis.temperature, 0.1);
        assert_eq!(cfg.extractor.backend, Backend::Remote);
        assert_eq!(cfg.extractor.verbs, ["loves"]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(Config::from_toml_str("bogus = 1"), Err(ConfigError::Parse(_))));
        assert!(matches!(
            Config::from_toml_str("[synthesis]\napi_key = \"x\""),
            Err(ConfigError::Parse(_))
        ));
        assert!(Config::load(None, &[("corpus.nope".into(), "1".into())]).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::from_toml_str("[corpus]\nwindow_words = 4\noverlap_words = 4").is_err());
        assert!(Config::from_toml_str("run_id = \"../x\"").is_err());
        assert!(Config::load(None, &[("a..b".into(), "1".into())]).is_err());
    }

    #[test]
    fn generation_validation_requires_existing_corpora() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = Config::default();
        cfg.synthesis.backend = crate::synthesis::GenerationBackend::Template;
        cfg.corpus.forget = Some(dir.path().to_path_buf());
        assert!(cfg.validate_generation().is_err());
        cfg.corpus.retain = Some(dir.path().join("missing"));
        assert!(cfg.validate_generation().is_err());
        cfg.corpus.retain = Some(dir.path().to_path_buf());
        cfg.validate_generation().unwrap();
    }

    #[test]
    fn run_id_tracks_generation_settings_only() {
        let a = Config::default();
        let mut b = a.clone();
        b.evaluation.model_endpoint = Some("http://x".into());
        assert_eq!(a.effective_run_id(), b.effective_run_id());
        b.corpus.window_words = 10;
        assert_ne!(a.effective_run_id(), b.effective_run_id());
    }
}
