//! Document store and benchmark loading.
//!
//! A store is a single directory holding an append-only `documents.jsonl`
//! file and a sidecar `documents.idx` mapping each doc id to its byte offset.
//! The sidecar is rebuilt on open when missing. Stores are read-only once
//! opened; ingestion takes `&mut self`, so there is exactly one writer.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retrieval::tokenize;

pub const DOCUMENTS_FILE: &str = "documents.jsonl";
pub const INDEX_FILE: &str = "documents.idx";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("malformed record at line {0}")]
    MalformedRecord(usize),
    #[error("duplicate doc_id {0:?}")]
    DuplicateDocId(String),
    #[error("document {0:?} has empty text")]
    EmptyText(String),
    #[error("document {0:?} not found")]
    NotFound(String),
    #[error("question at line {0} has no gold label")]
    MissingGold(usize),
    #[error("bad option label {label:?} at line {line}")]
    BadLabel { line: usize, label: String },
    #[error("corrupt store index: {0}")]
    CorruptIndex(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Pubmed,
    Statpearls,
    Textbook,
    Wikipedia,
    Other,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
    pub source: Source,
}

/// Multiple-choice option label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    A,
    B,
    C,
    D,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::A, Label::B, Label::C, Label::D];

    pub fn as_char(self) -> char {
        match self {
            Label::A => 'A',
            Label::B => 'B',
            Label::C => 'C',
            Label::D => 'D',
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_char())
    }
}

impl FromStr for Label {
    type Err = String;

    /// Case-insensitive; surrounding whitespace is ignored.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(Label::A),
            "B" | "b" => Ok(Label::B),
            "C" | "c" => Ok(Label::C),
            "D" | "d" => Ok(Label::D),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkQuestion {
    pub q_id: String,
    pub question: String,
    pub options: BTreeMap<Label, String>,
    pub gold: Label,
}

impl BenchmarkQuestion {
    pub fn option_text(&self, label: Label) -> &str {
        self.options.get(&label).map(String::as_str).unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub doc_count: usize,
    pub total_tokens: usize,
    pub avg_doc_len: f64,
}

impl CorpusStats {
    pub fn from_documents<'a>(docs: impl IntoIterator<Item = &'a Document>) -> Self {
        let (doc_count, total_tokens) = docs
            .into_iter()
            .fold((0usize, 0usize), |(n, t), d| (n + 1, t + doc_token_count(d)));
        let avg_doc_len = if doc_count == 0 {
            0.0
        } else {
            total_tokens as f64 / doc_count as f64
        };
        Self {
            doc_count,
            total_tokens,
            avg_doc_len,
        }
    }
}

/// Tokens counted over title and text, the same view the sparse index uses.
pub(crate) fn doc_token_count(doc: &Document) -> usize {
    tokenize(&doc.title).len() + tokenize(&doc.text).len()
}

/// Parses a corpus file, validating every record. Any failure rejects the
/// whole batch.
pub fn parse_corpus_file(path: &Path) -> Result<Vec<Document>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document =
            serde_json::from_str(&line).map_err(|_| CorpusError::MalformedRecord(line_no))?;
        if doc.doc_id.is_empty() {
            return Err(CorpusError::MalformedRecord(line_no));
        }
        if doc.text.trim().is_empty() {
            return Err(CorpusError::EmptyText(doc.doc_id));
        }
        if !seen.insert(doc.doc_id.clone()) {
            return Err(CorpusError::DuplicateDocId(doc.doc_id));
        }
        docs.push(doc);
    }
    Ok(docs)
}

#[derive(Deserialize)]
struct RawQuestion {
    q_id: String,
    question: String,
    options: BTreeMap<String, String>,
    #[serde(default)]
    gold: Option<String>,
}

/// Loads a benchmark file, preserving file order.
pub fn load_benchmark(path: &Path) -> Result<Vec<BenchmarkQuestion>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_question(&line, line_no)?);
    }
    Ok(out)
}

pub(crate) fn parse_question(line: &str, line_no: usize) -> Result<BenchmarkQuestion, CorpusError> {
    let raw: RawQuestion =
        serde_json::from_str(line).map_err(|_| CorpusError::MalformedRecord(line_no))?;
    if raw.options.len() != 4 {
        return Err(CorpusError::MalformedRecord(line_no));
    }
    let mut options = BTreeMap::new();
    for (key, text) in raw.options {
        let label = key
            .parse::<Label>()
            .map_err(|label| CorpusError::BadLabel { line: line_no, label })?;
        if options.insert(label, text).is_some() {
            return Err(CorpusError::MalformedRecord(line_no));
        }
    }
    let gold = match raw.gold.as_deref().map(str::trim) {
        None | Some("") => return Err(CorpusError::MissingGold(line_no)),
        Some(g) => g
            .parse::<Label>()
            .map_err(|label| CorpusError::BadLabel { line: line_no, label })?,
    };
    Ok(BenchmarkQuestion {
        q_id: raw.q_id,
        question: raw.question,
        options,
        gold,
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

enum Backing {
    Disk {
        file: Mutex<BufReader<File>>,
        offsets: HashMap<String, u64>,
    },
    Memory {
        docs: HashMap<String, Document>,
    },
}

/// Document store. `order` keeps ingestion order, which fixes document
/// numbering inside the sparse index.
pub struct DocumentStore {
    dir: Option<PathBuf>,
    order: Vec<String>,
    backing: Backing,
}

impl fmt::Debug for DocumentStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DocumentStore")
            .field("dir", &self.dir)
            .field("docs", &self.order.len())
            .finish()
    }
}

impl DocumentStore {
    /// Opens (or creates) a store directory.
    pub fn open(dir: &Path) -> Result<Self, CorpusError> {
        fs::create_dir_all(dir)?;
        let docs_path = dir.join(DOCUMENTS_FILE);
        if !docs_path.exists() {
            File::create(&docs_path)?;
        }
        let idx_path = dir.join(INDEX_FILE);
        let entries = if idx_path.exists() {
            read_index(&idx_path)?
        } else {
            let entries = scan_offsets(&docs_path)?;
            write_index(&idx_path, &entries)?;
            entries
        };
        let mut offsets = HashMap::with_capacity(entries.len());
        let mut order = Vec::with_capacity(entries.len());
        for (id, off) in entries {
            if offsets.insert(id.clone(), off).is_some() {
                return Err(CorpusError::CorruptIndex(format!("duplicate id {id:?}")));
            }
            order.push(id);
        }
        Ok(Self {
            dir: Some(dir.to_path_buf()),
            order,
            backing: Backing::Disk {
                file: Mutex::new(BufReader::new(File::open(&docs_path)?)),
                offsets,
            },
        })
    }

    /// In-memory store, used by tests and fixtures.
    pub fn from_documents(docs: Vec<Document>) -> Result<Self, CorpusError> {
        let mut map = HashMap::with_capacity(docs.len());
        let mut order = Vec::with_capacity(docs.len());
        for doc in docs {
            if doc.text.trim().is_empty() {
                return Err(CorpusError::EmptyText(doc.doc_id));
            }
            if map.contains_key(&doc.doc_id) {
                return Err(CorpusError::DuplicateDocId(doc.doc_id));
            }
            order.push(doc.doc_id.clone());
            map.insert(doc.doc_id.clone(), doc);
        }
        Ok(Self {
            dir: None,
            order,
            backing: Backing::Memory { docs: map },
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        match &self.backing {
            Backing::Disk { offsets, .. } => offsets.contains_key(doc_id),
            Backing::Memory { docs } => docs.contains_key(doc_id),
        }
    }

    /// Doc ids in ingestion order.
    pub fn doc_ids(&self) -> &[String] {
        &self.order
    }

    /// Validates and appends every document in `path`. Duplicates, against the
    /// file itself or the existing store, reject the whole batch.
    pub fn ingest_corpus(&mut self, path: &Path) -> Result<CorpusStats, CorpusError> {
        let docs = parse_corpus_file(path)?;
        self.ingest_documents(docs)?;
        self.stats()
    }

    pub fn ingest_documents(&mut self, docs: Vec<Document>) -> Result<(), CorpusError> {
        let mut batch = HashSet::new();
        for d in &docs {
            if d.text.trim().is_empty() {
                return Err(CorpusError::EmptyText(d.doc_id.clone()));
            }
            if self.contains(&d.doc_id) || !batch.insert(d.doc_id.as_str()) {
                return Err(CorpusError::DuplicateDocId(d.doc_id.clone()));
            }
        }
        match &mut self.backing {
            Backing::Memory { docs: map } => {
                for d in docs {
                    self.order.push(d.doc_id.clone());
                    map.insert(d.doc_id.clone(), d);
                }
            }
            Backing::Disk { file, offsets } => {
                let dir = self.dir.as_ref().expect("disk store has a directory");
                let docs_path = dir.join(DOCUMENTS_FILE);
                let mut out = OpenOptions::new().append(true).open(&docs_path)?;
                let mut pos = out.seek(SeekFrom::End(0))?;
                let mut buf = Vec::new();
                let mut new_entries = Vec::with_capacity(docs.len());
                for d in &docs {
                    let start = pos + buf.len() as u64;
                    serde_json::to_writer(&mut buf, d).map_err(std::io::Error::other)?;
                    buf.push(b'\n');
                    new_entries.push((d.doc_id.clone(), start));
                }
                out.write_all(&buf)?;
                out.flush()?;
                pos += buf.len() as u64;
                debug_assert_eq!(pos, out.metadata()?.len());
                for (id, off) in new_entries {
                    self.order.push(id.clone());
                    offsets.insert(id, off);
                }
                let entries: Vec<(String, u64)> =
                    self.order.iter().map(|id| (id.clone(), offsets[id])).collect();
                write_index(&dir.join(INDEX_FILE), &entries)?;
                *file = Mutex::new(BufReader::new(File::open(&docs_path)?));
            }
        }
        Ok(())
    }

    pub fn get_document(&self, doc_id: &str) -> Result<Document, CorpusError> {
        match &self.backing {
            Backing::Memory { docs } => docs
                .get(doc_id)
                .cloned()
                .ok_or_else(|| CorpusError::NotFound(doc_id.to_string())),
            Backing::Disk { file, offsets } => {
                let off = *offsets
                    .get(doc_id)
                    .ok_or_else(|| CorpusError::NotFound(doc_id.to_string()))?;
                let mut reader = file.lock().unwrap_or_else(|e| e.into_inner());
                reader.seek(SeekFrom::Start(off))?;
                let mut line = String::new();
                reader.read_line(&mut line)?;
                let doc: Document = serde_json::from_str(&line)
                    .map_err(|e| CorpusError::CorruptIndex(format!("{doc_id}: {e}")))?;
                if doc.doc_id != doc_id {
                    return Err(CorpusError::CorruptIndex(format!(
                        "offset for {doc_id:?} points at {:?}",
                        doc.doc_id
                    )));
                }
                Ok(doc)
            }
        }
    }

    /// All documents in ingestion order.
    pub fn documents(&self) -> Result<Vec<Document>, CorpusError> {
        match &self.backing {
            Backing::Memory { docs } => Ok(self.order.iter().map(|id| docs[id].clone()).collect()),
            Backing::Disk { file, .. } => {
                let mut reader = file.lock().unwrap_or_else(|e| e.into_inner());
                reader.seek(SeekFrom::Start(0))?;
                let mut text = String::new();
                reader.read_to_string(&mut text)?;
                text.lines()
                    .enumerate()
                    .filter(|(_, l)| !l.trim().is_empty())
                    .map(|(i, l)| {
                        serde_json::from_str(l).map_err(|_| CorpusError::MalformedRecord(i + 1))
                    })
                    .collect()
            }
        }
    }

    pub fn stats(&self) -> Result<CorpusStats, CorpusError> {
        Ok(CorpusStats::from_documents(&self.documents()?))
    }
}

fn scan_offsets(docs_path: &Path) -> Result<Vec<(String, u64)>, CorpusError> {
    #[derive(Deserialize)]
    struct IdOnly {
        doc_id: String,
    }
    let mut reader = BufReader::new(File::open(docs_path)?);
    let mut entries = Vec::new();
    let mut offset = 0u64;
    let mut line = String::new();
    let mut line_no = 0;
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        if !line.trim().is_empty() {
            let rec: IdOnly =
                serde_json::from_str(&line).map_err(|_| CorpusError::MalformedRecord(line_no))?;
            entries.push((rec.doc_id, offset));
        }
        offset += n as u64;
    }
    Ok(entries)
}

fn read_index(path: &Path) -> Result<Vec<(String, u64)>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let entry: (String, u64) =
            serde_json::from_str(&line).map_err(|e| CorpusError::CorruptIndex(e.to_string()))?;
        entries.push(entry);
    }
    Ok(entries)
}

fn write_index(path: &Path, entries: &[(String, u64)]) -> Result<(), CorpusError> {
    write_jsonl(path, entries)?;
    Ok(())
}
