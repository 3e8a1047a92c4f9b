//! Corpus loading and word-window segmentation.
//!
//! A corpus is either a single file or a directory walked in sorted order.
//! `.jsonl` files contribute one document per line (`{"text": ...}`); any
//! other file is one plain-text document. Documents are cut into windows of
//! `window_words` words whose starts advance by `window_words - overlap_words`.
//! A word is a maximal run of non-whitespace code points.
//!
//! Chunk spans are half-open code-point ranges. The first chunk of a document
//! starts at 0, every chunk extends up to the first word of the following
//! window (so inter-word whitespace is covered), and the last chunk ends at the
//! end of the document.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusLabel {
    Forget,
    Retain,
}

impl CorpusLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            CorpusLabel::Forget => "forget",
            CorpusLabel::Retain => "retain",
        }
    }
}

impl fmt::Display for CorpusLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub label: CorpusLabel,
    pub text: String,
    pub source_path: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextChunk {
    pub chunk_id: String,
    pub doc_id: String,
    /// Inclusive start, in code points.
    pub start: usize,
    /// Exclusive end, in code points.
    pub end: usize,
    pub text: String,
}

impl TextChunk {
    pub fn span(&self) -> Range<usize> {
        self.start..self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkConfig {
    pub window_words: usize,
    pub overlap_words: usize,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self {
            window_words: 256,
            overlap_words: 32,
        }
    }
}

impl ChunkConfig {
    pub fn new(window_words: usize, overlap_words: usize) -> Result<Self, CorpusError> {
        let cfg = Self {
            window_words,
            overlap_words,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.window_words == 0 || self.overlap_words >= self.window_words {
            return Err(CorpusError::InvalidChunkConfig {
                window_words: self.window_words,
                overlap_words: self.overlap_words,
            });
        }
        Ok(())
    }

    pub fn step(&self) -> usize {
        self.window_words - self.overlap_words
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not valid UTF-8")]
    InvalidUtf8 { path: PathBuf },
    #[error("{path}:{line}: {reason}")]
    BadJsonlLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("chunk config requires 0 <= overlap_words < window_words (got window {window_words}, overlap {overlap_words})")]
    InvalidChunkConfig {
        window_words: usize,
        overlap_words: usize,
    },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

/// Load every document under `path` with the given label.
///
/// Empty or whitespace-only documents are skipped; an empty directory yields
/// an empty list.
pub fn load_corpus(path: &Path, label: CorpusLabel) -> Result<Vec<Document>, CorpusError> {
    let meta = fs::metadata(path).map_err(|source| CorpusError::Unreadable {
        path: path.to_path_buf(),
        source,
    })?;

    let files: Vec<PathBuf> = if meta.is_dir() {
        let mut files = Vec::new();
        for entry in walkdir::WalkDir::new(path).sort_by_file_name() {
            let entry = entry.map_err(|e| CorpusError::Unreadable {
                path: e.path().unwrap_or(path).to_path_buf(),
                source: e.into(),
            })?;
            let hidden = entry.file_name().to_string_lossy().starts_with('.');
            if entry.file_type().is_file() && !hidden {
                files.push(entry.into_path());
            }
        }
        files
    } else {
        vec![path.to_path_buf()]
    };

    let mut docs = Vec::new();
    for file in files {
        let rel = if meta.is_dir() {
            file.strip_prefix(path).unwrap_or(&file).to_path_buf()
        } else {
            PathBuf::from(file.file_name().unwrap_or(file.as_os_str()))
        };
        let rel = rel.to_string_lossy().replace('\\', "/");
        let source_path = file.to_string_lossy().into_owned();
        let bytes = fs::read(&file).map_err(|source| CorpusError::Unreadable {
            path: file.clone(),
            source,
        })?;
        let text = String::from_utf8(bytes).map_err(|_| CorpusError::InvalidUtf8 { path: file.clone() })?;

        if file.extension().is_some_and(|ext| ext == "jsonl") {
            for (idx, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let bad = |reason: String| CorpusError::BadJsonlLine {
                    path: file.clone(),
                    line: idx + 1,
                    reason,
                };
                let value: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
                let body = match value.get("text") {
                    Some(serde_json::Value::String(s)) => s.clone(),
                    Some(_) => return Err(bad("`text` is not a string".into())),
                    None => return Err(bad("missing `text` field".into())),
                };
                if body.trim().is_empty() {
                    continue;
                }
                docs.push(Document {
                    doc_id: format!("{label}:{rel}:{}", idx + 1),
                    label,
                    text: body,
                    source_path: source_path.clone(),
                });
            }
        } else if !text.trim().is_empty() {
            docs.push(Document {
                doc_id: format!("{label}:{rel}"),
                label,
                text,
                source_path,
            });
        }
    }
    Ok(docs)
}

struct Word {
    cp_start: usize,
    byte_start: usize,
}

fn words(text: &str) -> Vec<Word> {
    let mut out = Vec::new();
    let mut in_word = false;
    for (cp, (byte, ch)) in text.char_indices().enumerate() {
        if ch.is_whitespace() {
            in_word = false;
        } else if !in_word {
            in_word = true;
            out.push(Word {
                cp_start: cp,
                byte_start: byte,
            });
        }
    }
    out
}

/// Segment one document. Zero words yields zero chunks.
pub fn segment_document(doc: &Document, cfg: &ChunkConfig) -> Vec<TextChunk> {
    let words = words(&doc.text);
    if words.is_empty() {
        return Vec::new();
    }
    let total_cp = doc.text.chars().count();
    let step = cfg.step();
    let mut chunks = Vec::new();
    let mut first = 0;
    loop {
        let past_last = first + cfg.window_words;
        let (cp_start, byte_start) = if first == 0 {
            (0, 0)
        } else {
            (words[first].cp_start, words[first].byte_start)
        };
        let (cp_end, byte_end) = match words.get(past_last) {
            Some(w) => (w.cp_start, w.byte_start),
            None => (total_cp, doc.text.len()),
        };
        chunks.push(TextChunk {
            chunk_id: format!("{}#{:05}", doc.doc_id, chunks.len()),
            doc_id: doc.doc_id.clone(),
            start: cp_start,
            end: cp_end,
            text: doc.text[byte_start..byte_end].to_string(),
        });
        if past_last >= words.len() {
            break;
        }
        first += step;
    }
    chunks
}

pub fn segment_corpus(docs: &[Document], cfg: &ChunkConfig) -> Vec<TextChunk> {
    docs.iter().flat_map(|d| segment_document(d, cfg)).collect()
}

/// Chunks keyed by id; iteration order is chunk-id order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChunkStore {
    chunks: BTreeMap<String, TextChunk>,
}

impl ChunkStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, chunk: TextChunk) {
        self.chunks.insert(chunk.chunk_id.clone(), chunk);
    }

    pub fn get(&self, chunk_id: &str) -> Option<&TextChunk> {
        self.chunks.get(chunk_id)
    }

    pub fn contains(&self, chunk_id: &str) -> bool {
        self.chunks.contains_key(chunk_id)
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TextChunk> {
        self.chunks.values()
    }
}

impl FromIterator<TextChunk> for ChunkStore {
    fn from_iter<I: IntoIterator<Item = TextChunk>>(iter: I) -> Self {
        let mut store = ChunkStore::new();
        store.extend(iter);
        store
    }
}

impl Extend<TextChunk> for ChunkStore {
    fn extend<I: IntoIterator<Item = TextChunk>>(&mut self, iter: I) {
        for chunk in iter {
            self.insert(chunk);
        }
    }
}

pub fn write_chunks(path: &Path, chunks: &[TextChunk]) -> Result<(), CorpusError> {
    Ok(jsonl::write(path, chunks)?)
}

pub fn read_chunks(path: &Path) -> Result<Vec<TextChunk>, CorpusError> {
    Ok(jsonl::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(text: &str) -> Document {
        Document {
            doc_id: "forget:a.txt".into(),
            label: CorpusLabel::Forget,
            text: text.into(),
            source_path: "a.txt".into(),
        }
    }

    fn numbered_words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn single_window_is_whole_document() {
        let d = doc(&numbered_words(100));
        let chunks = segment_document(&d, &ChunkConfig::new(100, 0).unwrap());
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, d.text);
        assert_eq!(chunks[0].span(), 0..d.text.chars().count());
        assert_eq!(chunks[0].chunk_id, "forget:a.txt#00000");
    }

    #[test]
    fn overlapping_windows_start_at_step() {
        let d = doc(&numbered_words(150));
        let chunks = segment_document(&d, &ChunkConfig::new(100, 50).unwrap());
        assert_eq!(chunks.len(), 2);
        assert!(chunks[1].text.starts_with("w50 "));
        assert!(chunks[1].text.ends_with("w149"));
        assert_eq!(chunks[0].text.split_whitespace().count(), 100);
        assert_eq!(chunks[1].text.split_whitespace().count(), 100);
    }

    #[test]
    fn empty_document_has_no_chunks() {
        assert!(segment_document(&doc(""), &ChunkConfig::default()).is_empty());
        assert!(segment_document(&doc("  \n "), &ChunkConfig::default()).is_empty());
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(ChunkConfig::new(0, 0).is_err());
        assert!(ChunkConfig::new(10, 10).is_err());
        assert!(ChunkConfig::new(10, 9).is_ok());
    }

    fn text_strategy() -> impl Strategy<Value = String> {
        proptest::collection::vec(
            prop_oneof![
                "[a-zé]{1,6}".prop_map(|s| s),
                Just(" ".to_string()),
                Just("\n\t".to_string()),
                Just("  ".to_string()),
            ],
            0..80,
        )
        .prop_map(|parts| parts.concat())
    }

    proptest! {
        #[test]
        fn chunks_cover_and_reconstruct(text in text_strategy(), window in 1usize..12, overlap_seed in 0usize..12) {
            let overlap = overlap_seed % window;
            let cfg = ChunkConfig::new(window, overlap).unwrap();
            let d = doc(&text);
            let chunks = segment_document(&d, &cfg);
            let chars: Vec<char> = text.chars().collect();
            if text.split_whitespace().next().is_none() {
                prop_assert!(chunks.is_empty());
                return Ok(());
            }
            prop_assert_eq!(chunks[0].start, 0);
            prop_assert_eq!(chunks.last().unwrap().end, chars.len());

            let mut rebuilt = String::new();
            let mut covered = 0;
            for (i, c) in chunks.iter().enumerate() {
                let slice: String = chars[c.start..c.end].iter().collect();
                prop_assert_eq!(&slice, &c.text);
                prop_assert!(c.text.split_whitespace().count() <= window);
                prop_assert!(c.start <= covered);
                rebuilt.extend(&chars[covered..c.end]);
                covered = c.end;
                if i + 1 < chunks.len() {
                    let next = &chunks[i + 1];
                    let shared: String = chars[next.start..c.end].iter().collect();
                    prop_assert_eq!(shared.split_whitespace().count(), overlap);
                }
            }
            prop_assert_eq!(rebuilt, text.clone());
            prop_assert_eq!(segment_document(&d, &cfg), chunks);
        }
    }
}
