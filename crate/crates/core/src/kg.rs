//! Knowledge-graph model and the set algebra used for redundancy removal.
//!
//! Facts are keyed by a canonical string built from the normalized head,
//! relation and tail. Two triples are the same fact exactly when their keys
//! are equal; there is no alias or embedding matching.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::CorpusLabel;
use crate::jsonl::{self, JsonlError};

/// Bumped whenever [`normalize_surface`] or the key layout changes.
pub const NORMALIZATION_VERSION: &str = "nfc-lower-ws/1";

/// Separator between key components. Normalized surfaces never contain a tab.
const KEY_SEPARATOR: char = '\t';

/// NFC, lowercase, whitespace runs collapsed to one space, trimmed.
pub fn normalize_surface(s: &str) -> String {
    let lowered: String = s.nfc().collect::<String>().to_lowercase();
    let mut out = String::with_capacity(lowered.len());
    for word in lowered.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    // lowercasing can produce decomposed sequences
    out.nfc().collect()
}

pub fn norm_key(head: &str, relation: &str, tail: &str) -> String {
    let mut key = normalize_surface(head);
    key.push(KEY_SEPARATOR);
    key.push_str(&normalize_surface(relation));
    key.push(KEY_SEPARATOR);
    key.push_str(&normalize_surface(tail));
    key
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphLabel {
    Forget,
    Retain,
    Test,
}

impl From<CorpusLabel> for GraphLabel {
    fn from(label: CorpusLabel) -> Self {
        match label {
            CorpusLabel::Forget => GraphLabel::Forget,
            CorpusLabel::Retain => GraphLabel::Retain,
        }
    }
}

impl fmt::Display for GraphLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphLabel::Forget => "forget",
            GraphLabel::Retain => "retain",
            GraphLabel::Test => "test",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum KgError {
    #[error("fact has an empty {part} after normalization")]
    EmptySurface { part: &'static str },
    #[error("fact has no provenance")]
    NoProvenance,
    #[error("{path}: stored key {stored:?} does not match recomputed key {expected:?}")]
    KeyMismatch {
        path: PathBuf,
        stored: String,
        expected: String,
    },
    #[error("{path}: graph written with normalization {found}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("{path}: duplicate key {key:?}")]
    DuplicateKey { path: PathBuf, key: String },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

/// A `(head, relation, tail)` triple with the chunks it was extracted from.
///
/// The surfaces are kept un-normalized so prompts can quote them as written.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub norm_key: String,
    pub provenance: BTreeSet<String>,
}

impl Fact {
    pub fn new(
        head: impl Into<String>,
        relation: impl Into<String>,
        tail: impl Into<String>,
        chunk_id: impl Into<String>,
    ) -> Result<Self, KgError> {
        let (head, relation, tail) = (head.into(), relation.into(), tail.into());
        for (part, s) in [("head", &head), ("relation", &relation), ("tail", &tail)] {
            if normalize_surface(s).is_empty() {
                return Err(KgError::EmptySurface { part });
            }
        }
        Ok(Self {
            norm_key: norm_key(&head, &relation, &tail),
            head,
            relation,
            tail,
            provenance: BTreeSet::from([chunk_id.into()]),
        })
    }

    fn surfaces(&self) -> (&str, &str, &str) {
        (&self.head, &self.relation, &self.tail)
    }

    /// Fold `other` (same key) into `self`. Surfaces resolve to the
    /// lexicographically smallest variant so the result is insertion-order
    /// independent.
    fn merge(&mut self, other: Fact) {
        debug_assert_eq!(self.norm_key, other.norm_key);
        if other.surfaces() < self.surfaces() {
            self.head = other.head;
            self.relation = other.relation;
            self.tail = other.tail;
        }
        self.provenance.extend(other.provenance);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub fact_count: usize,
    pub entity_count: usize,
    pub relation_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeGraph {
    pub label: GraphLabel,
    facts: BTreeMap<String, Fact>,
}

impl KnowledgeGraph {
    pub fn new(label: GraphLabel) -> Self {
        Self {
            label,
            facts: BTreeMap::new(),
        }
    }

    /// Insert `fact`, unioning provenance if its key is already present.
    pub fn add_fact(&mut self, fact: Fact) {
        match self.facts.get_mut(&fact.norm_key) {
            Some(existing) => existing.merge(fact),
            None => {
                self.facts.insert(fact.norm_key.clone(), fact);
            }
        }
    }

    pub fn get(&self, key: &str) -> Option<&Fact> {
        self.facts.get(key)
    }

    pub fn contains_key(&self, key: &str) -> bool {
        self.facts.contains_key(key)
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }

    /// Facts in key order.
    pub fn facts(&self) -> impl Iterator<Item = &Fact> {
        self.facts.values()
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.facts.keys().map(String::as_str)
    }

    pub fn stats(&self) -> GraphStats {
        let mut entities = HashSet::new();
        let mut relations = HashSet::new();
        for fact in self.facts.values() {
            let mut parts = fact.norm_key.split(KEY_SEPARATOR);
            let (head, rel, tail) = (parts.next(), parts.next(), parts.next());
            entities.extend(head);
            entities.extend(tail);
            relations.extend(rel);
        }
        GraphStats {
            fact_count: self.facts.len(),
            entity_count: entities.len(),
            relation_count: relations.len(),
        }
    }

    /// Write facts as JSONL plus a `<file>.meta.json` header.
    pub fn save(&self, path: &Path) -> Result<(), KgError> {
        jsonl::write(path, self.facts.values())?;
        let header = GraphHeader {
            normalization_version: NORMALIZATION_VERSION.to_string(),
            label: self.label,
            fact_count: self.facts.len(),
        };
        jsonl::write_json(&header_path(path), &header)?;
        Ok(())
    }

    /// Read a graph written by [`KnowledgeGraph::save`], re-deriving every key.
    pub fn load(path: &Path) -> Result<Self, KgError> {
        let header: GraphHeader = jsonl::read_json(&header_path(path))?;
        if header.normalization_version != NORMALIZATION_VERSION {
            return Err(KgError::VersionMismatch {
                path: path.to_path_buf(),
                found: header.normalization_version,
                expected: NORMALIZATION_VERSION.to_string(),
            });
        }
        let mut graph = KnowledgeGraph::new(header.label);
        for fact in jsonl::read::<Fact>(path)? {
            let expected = norm_key(&fact.head, &fact.relation, &fact.tail);
            if expected != fact.norm_key {
                return Err(KgError::KeyMismatch {
                    path: path.to_path_buf(),
                    stored: fact.norm_key,
                    expected,
                });
            }
            if fact.provenance.is_empty() {
                return Err(KgError::NoProvenance);
            }
            if graph.facts.contains_key(&fact.norm_key) {
                return Err(KgError::DuplicateKey {
                    path: path.to_path_buf(),
                    key: fact.norm_key,
                });
            }
            graph.facts.insert(fact.norm_key.clone(), fact);
        }
        Ok(graph)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphHeader {
    normalization_version: String,
    label: GraphLabel,
    fact_count: usize,
}

fn header_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Keys present in both graphs: the conflict set.
pub fn intersect(forget: &KnowledgeGraph, retain: &KnowledgeGraph) -> BTreeSet<String> {
    let (small, large) = if forget.len() <= retain.len() {
        (forget, retain)
    } else {
        (retain, forget)
    };
    small
        .keys()
        .filter(|k| large.contains_key(k))
        .map(str::to_owned)
        .collect()
}

/// `forget` with every key in `conflicts` removed, labeled as the test graph.
/// Keys in `conflicts` that are absent from `forget` are ignored.
pub fn subtract(forget: &KnowledgeGraph, conflicts: &BTreeSet<String>) -> KnowledgeGraph {
    KnowledgeGraph {
        label: GraphLabel::Test,
        facts: forget
            .facts
            .iter()
            .filter(|(k, _)| !conflicts.contains(*k))
            .map(|(k, f)| (k.clone(), f.clone()))
            .collect(),
    }
}
