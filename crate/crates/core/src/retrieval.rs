//! Hybrid retrieval: a BM25 inverted index, pluggable dense retrievers, and
//! reciprocal rank fusion over their ranked lists.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusError, Document, DocumentStore};
use crate::gateway::GatewayError;

pub const SPARSE_INDEX_FILE: &str = "sparse_index.json";
pub const DEFAULT_K_RRF: f64 = 60.0;
pub const DEFAULT_DEPTH: usize = 32;
/// Per-retriever candidate depth before fusion.
pub const DEFAULT_CANDIDATE_DEPTH: usize = 100;
pub const BM25_RETRIEVER_ID: &str = "bm25";

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,
    #[error("rrf_fuse needs at least one ranked list")]
    NoLists,
    #[error("k_rrf must be positive, got {0}")]
    BadRrfConstant(f64),
    #[error("invalid ranked list from {retriever}: {reason}")]
    InvalidRankedList { retriever: String, reason: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("index io: {0}")]
    Io(#[from] std::io::Error),
    #[error("index decode: {0}")]
    Decode(#[from] serde_json::Error),
}

/// Lowercases and splits on any run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Inverted index. Postings are `(doc number, term frequency)` sorted by doc
/// number; doc numbers follow store ingestion order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseIndex {
    pub params: Bm25Params,
    doc_ids: Vec<String>,
    doc_lens: Vec<u32>,
    avg_len: f64,
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

impl SparseIndex {
    pub fn build(store: &DocumentStore) -> Result<Self, RetrievalError> {
        Self::from_documents(&store.documents()?)
    }

    pub fn from_documents(docs: &[Document]) -> Result<Self, RetrievalError> {
        if docs.is_empty() {
            return Err(RetrievalError::EmptyCorpus);
        }
        let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
        let mut doc_ids = Vec::with_capacity(docs.len());
        let mut doc_lens = Vec::with_capacity(docs.len());
        for (n, doc) in docs.iter().enumerate() {
            let mut tokens = tokenize(&doc.title);
            tokens.extend(tokenize(&doc.text));
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for (term, count) in tf {
                postings.entry(term).or_default().push((n as u32, count));
            }
            doc_ids.push(doc.doc_id.clone());
            doc_lens.push(tokens.len() as u32);
        }
        let total: u64 = doc_lens.iter().map(|&l| l as u64).sum();
        Ok(Self {
            params: Bm25Params::default(),
            avg_len: total as f64 / docs.len() as f64,
            doc_ids,
            doc_lens,
            postings,
        })
    }

    pub fn with_params(mut self, params: Bm25Params) -> Self {
        self.params = params;
        self
    }

    pub fn doc_count(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn avg_len(&self) -> f64 {
        self.avg_len
    }

    pub fn doc_len(&self, doc_id: &str) -> Option<u32> {
        self.doc_ids
            .iter()
            .position(|d| d == doc_id)
            .map(|i| self.doc_lens[i])
    }

    pub fn df(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// Frequency of `term` in `doc_id`.
    pub fn tf(&self, term: &str, doc_id: &str) -> u32 {
        let Some(n) = self.doc_ids.iter().position(|d| d == doc_id) else {
            return 0;
        };
        self.postings
            .get(term)
            .and_then(|p| p.binary_search_by_key(&(n as u32), |&(d, _)| d).ok().map(|i| p[i].1))
            .unwrap_or(0)
    }

    /// Doc ids containing `term`, in index order.
    pub fn posting_docs(&self, term: &str) -> Vec<&str> {
        self.postings
            .get(term)
            .map(|p| p.iter().map(|&(d, _)| self.doc_ids[d as usize].as_str()).collect())
            .unwrap_or_default()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count() as f64;
        let df = self.df(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    pub fn save(&self, dir: &Path) -> Result<(), RetrievalError> {
        let mut w = BufWriter::new(File::create(dir.join(SPARSE_INDEX_FILE))?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, RetrievalError> {
        let r = BufReader::new(File::open(dir.join(SPARSE_INDEX_FILE))?);
        Ok(serde_json::from_reader(r)?)
    }
}

/// Ranked output of one retriever, descending by score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub retriever_id: String,
    pub entries: Vec<(String, f64)>,
}

impl RankedList {
    /// Validates the invariants: no duplicate ids, scores non-increasing.
    pub fn new(retriever_id: impl Into<String>, entries: Vec<(String, f64)>) -> Result<Self, RetrievalError> {
        let retriever_id = retriever_id.into();
        let mut seen = HashSet::with_capacity(entries.len());
        for (i, (id, score)) in entries.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                return Err(RetrievalError::InvalidRankedList {
                    retriever: retriever_id,
                    reason: format!("duplicate doc_id {id:?}"),
                });
            }
            if score.is_nan() || (i > 0 && *score > entries[i - 1].1) {
                return Err(RetrievalError::InvalidRankedList {
                    retriever: retriever_id,
                    reason: format!("scores not non-increasing at position {i}"),
                });
            }
        }
        Ok(Self {
            retriever_id,
            entries,
        })
    }

    pub fn empty(retriever_id: impl Into<String>) -> Self {
        Self {
            retriever_id: retriever_id.into(),
            entries: Vec::new(),
        }
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(d, _)| d.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Descending score, ties broken by ascending doc id.
fn rank_order(a: &(String, f64), b: &(String, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

pub fn bm25_rank(index: &SparseIndex, query: &str, top_n: usize) -> RankedList {
    let mut terms = tokenize(query);
    terms.sort();
    terms.dedup();
    let Bm25Params { k1, b } = index.params;
    let mut scores: HashMap<u32, f64> = HashMap::new();
    for term in &terms {
        let Some(posting) = index.postings.get(term) else {
            continue;
        };
        let idf = index.idf(term);
        for &(doc, tf) in posting {
            let tf = tf as f64;
            let len_norm = 1.0 - b + b * index.doc_lens[doc as usize] as f64 / index.avg_len;
            *scores.entry(doc).or_default() += idf * tf * (k1 + 1.0) / (tf + k1 * len_norm);
        }
    }
    let mut entries: Vec<(String, f64)> = scores
        .into_iter()
        .filter(|&(_, s)| s > 0.0)
        .map(|(d, s)| (index.doc_ids[d as usize].clone(), s))
        .collect();
    entries.sort_by(rank_order);
    entries.truncate(top_n);
    RankedList {
        retriever_id: BM25_RETRIEVER_ID.to_string(),
        entries,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedRanking {
    pub entries: Vec<(String, f64)>,
}

impl FusedRanking {
    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(d, _)| d.as_str())
    }
}

/// Reciprocal rank fusion: `score(d) = Σ 1/(k_rrf + rank)`, rank from 1.
pub fn rrf_fuse(lists: &[RankedList], k_rrf: f64) -> Result<FusedRanking, RetrievalError> {
    if lists.is_empty() {
        return Err(RetrievalError::NoLists);
    }
    if !(k_rrf > 0.0) || !k_rrf.is_finite() {
        return Err(RetrievalError::BadRrfConstant(k_rrf));
    }
    let mut scores: HashMap<&str, f64> = HashMap::new();
    for list in lists {
        for (rank0, (doc, _)) in list.entries.iter().enumerate() {
            *scores.entry(doc.as_str()).or_default() += 1.0 / (k_rrf + (rank0 + 1) as f64);
        }
    }
    let mut entries: Vec<(String, f64)> =
        scores.into_iter().map(|(d, s)| (d.to_string(), s)).collect();
    entries.sort_by(rank_order);
    Ok(FusedRanking { entries })
}

/// Documents bound to a query at one iteration of the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSet {
    pub query_text: String,
    pub iteration: usize,
    pub docs: Vec<Document>,
    /// Fused score per entry of `docs`.
    pub scores: Vec<f64>,
}

impl EvidenceSet {
    pub fn new(query_text: impl Into<String>, iteration: usize, docs: Vec<Document>) -> Self {
        let scores = vec![0.0; docs.len()];
        Self {
            query_text: query_text.into(),
            iteration,
            docs,
            scores,
        }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn doc_ids(&self) -> Vec<String> {
        self.docs.iter().map(|d| d.doc_id.clone()).collect()
    }
}

/// A dense retriever reachable through the gateway (or a test double).
pub trait DenseRetriever: Send + Sync {
    fn retriever_id(&self) -> &str;
    fn search(&self, query: &str, top_n: usize) -> Result<RankedList, GatewayError>;
}

pub struct HybridRetriever {
    store: Arc<DocumentStore>,
    index: Arc<SparseIndex>,
    dense: Vec<Arc<dyn DenseRetriever>>,
    pub k_rrf: f64,
    pub candidate_depth: usize,
}

impl HybridRetriever {
    pub fn new(store: Arc<DocumentStore>, index: Arc<SparseIndex>) -> Self {
        Self {
            store,
            index,
            dense: Vec::new(),
            k_rrf: DEFAULT_K_RRF,
            candidate_depth: DEFAULT_CANDIDATE_DEPTH,
        }
    }

    pub fn with_dense(mut self, retriever: Arc<dyn DenseRetriever>) -> Self {
        self.dense.push(retriever);
        self
    }

    pub fn store(&self) -> &Arc<DocumentStore> {
        &self.store
    }

    pub fn index(&self) -> &SparseIndex {
        &self.index
    }

    /// BM25 plus every dense list, fused. Dense calls for one query run
    /// concurrently and are joined in registration order.
    pub fn ranked_lists(&self, query: &str) -> Result<Vec<RankedList>, RetrievalError> {
        let mut lists = vec![bm25_rank(&self.index, query, self.candidate_depth)];
        let dense: Vec<Result<RankedList, GatewayError>> = match self.dense.len() {
            0 => Vec::new(),
            1 => vec![self.dense[0].search(query, self.candidate_depth)],
            _ => std::thread::scope(|s| {
                let handles: Vec<_> = self
                    .dense
                    .iter()
                    .map(|d| s.spawn(move || d.search(query, self.candidate_depth)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("dense search thread panicked"))
                    .collect()
            }),
        };
        for list in dense {
            lists.push(list?);
        }
        Ok(lists)
    }

    pub fn fuse(&self, query: &str) -> Result<FusedRanking, RetrievalError> {
        rrf_fuse(&self.ranked_lists(query)?, self.k_rrf)
    }

    /// Top `depth` fused documents. Ids a dense service returns that are not
    /// in the store are skipped.
    pub fn retrieve(&self, query: &str, depth: usize, iteration: usize) -> Result<EvidenceSet, RetrievalError> {
        let fused = self.fuse(query)?;
        let mut docs = Vec::with_capacity(depth.min(fused.entries.len()));
        let mut scores = Vec::with_capacity(docs.capacity());
        for (id, score) in &fused.entries {
            if docs.len() == depth {
                break;
            }
            match self.store.get_document(id) {
                Ok(doc) => {
                    docs.push(doc);
                    scores.push(*score);
                }
                Err(CorpusError::NotFound(_)) => continue,
                Err(e) => return Err(e.into()),
            }
        }
        Ok(EvidenceSet {
            query_text: query.to_string(),
            iteration,
            docs,
            scores,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Source;

    pub(crate) fn doc(id: &str, text: &str) -> Document {
        Document {
            doc_id: id.into(),
            title: String::new(),
            text: text.into(),
            source: Source::Other,
        }
    }

    fn toy() -> Vec<Document> {
        vec![
            doc("d1", "heart attack symptoms"),
            doc("d2", "heart failure"),
            doc("d3", "renal failure causes"),
        ]
    }

    fn list(id: &str, docs: &[&str]) -> RankedList {
        let n = docs.len();
        RankedList::new(
            id,
            docs.iter().enumerate().map(|(i, d)| (d.to_string(), (n - i) as f64)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn tokenize_rules() {
        assert_eq!(tokenize("Heart Failure, acute!"), ["heart", "failure", "acute"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("T5-XXL"), ["t5", "xxl"]);
    }

    #[test]
    fn index_counts() {
        let idx = SparseIndex::from_documents(&toy()).unwrap();
        assert_eq!(idx.df("heart"), 2);
        assert_eq!(idx.posting_docs("heart"), ["d1", "d2"]);
        assert_eq!(idx.tf("failure", "d3"), 1);
        assert_eq!(idx.doc_len("d3"), Some(3));
        assert!((idx.avg_len() - 8.0 / 3.0).abs() < 1e-15);
        assert_eq!(idx, SparseIndex::from_documents(&toy()).unwrap());
        assert!(matches!(SparseIndex::from_documents(&[]), Err(RetrievalError::EmptyCorpus)));
    }

    #[test]
    fn bm25_worked_example() {
        let idx = SparseIndex::from_documents(&toy()).unwrap();
        let r = bm25_rank(&idx, "heart", 10);
        // values from an independent evaluation of the formula
        assert_eq!(r.entries[0].0, "d2");
        assert!((r.entries[0].1 - 0.523_548_346_501_579).abs() < 1e-12);
        assert_eq!(r.entries[1].0, "d1");
        assert!((r.entries[1].1 - 0.447_138_587_822_970_2).abs() < 1e-12);
        assert_eq!(r.len(), 2);
        assert!(bm25_rank(&idx, "kidney", 10).is_empty());
        assert!(bm25_rank(&idx, "", 10).is_empty());
        let twice = bm25_rank(&idx, "heart heart", 10);
        assert_eq!(twice, r);
    }

    #[test]
    fn rrf_examples() {
        let single = rrf_fuse(&[list("a", &["d1", "d2"])], 60.0).unwrap();
        assert_eq!(single.doc_ids().collect::<Vec<_>>(), ["d1", "d2"]);

        let fused = rrf_fuse(&[list("a", &["d1", "d2", "d3"]), list("b", &["d3", "d2", "d1"])], 60.0).unwrap();
        assert_eq!(fused.doc_ids().collect::<Vec<_>>(), ["d1", "d3", "d2"]);
        assert!((fused.entries[0].1 - (1.0 / 61.0 + 1.0 / 63.0)).abs() < 1e-15);
        assert!((fused.entries[0].1 - 0.032_266_4).abs() < 1e-7);
        assert!((fused.entries[2].1 - 0.032_258_1).abs() < 1e-7);

        let dom = rrf_fuse(
            &[list("a", &["x", "y"]), list("b", &["x", "z"]), list("c", &["x", "y", "z"])],
            60.0,
        )
        .unwrap();
        assert_eq!(dom.entries[0].0, "x");

        assert!(matches!(rrf_fuse(&[], 60.0), Err(RetrievalError::NoLists)));
        assert!(matches!(rrf_fuse(&[list("a", &["x"])], 0.0), Err(RetrievalError::BadRrfConstant(_))));
    }

    #[test]
    fn ranked_list_invariants() {
        assert!(RankedList::new("x", vec![("a".into(), 1.0), ("a".into(), 0.5)]).is_err());
        assert!(RankedList::new("x", vec![("a".into(), 1.0), ("b".into(), 2.0)]).is_err());
        assert!(RankedList::new("x", vec![("a".into(), 1.0), ("b".into(), 1.0)]).is_ok());
    }

    struct Reversed(Arc<SparseIndex>);

    impl DenseRetriever for Reversed {
        fn retriever_id(&self) -> &str {
            "rev"
        }
        fn search(&self, query: &str, top_n: usize) -> Result<RankedList, GatewayError> {
            let mut ids: Vec<String> = bm25_rank(&self.0, query, top_n).doc_ids().map(String::from).collect();
            ids.reverse();
            let n = ids.len();
            Ok(RankedList {
                retriever_id: "rev".into(),
                entries: ids.into_iter().enumerate().map(|(i, d)| (d, (n - i) as f64)).collect(),
            })
        }
    }

    #[test]
    fn retrieve_truncates_and_fuses() {
        let docs: Vec<Document> = (0..10).map(|i| doc(&format!("d{i}"), &format!("heart x{i}"))).collect();
        let store = Arc::new(DocumentStore::from_documents(docs.clone()).unwrap());
        let index = Arc::new(SparseIndex::from_documents(&docs).unwrap());
        let r = HybridRetriever::new(store.clone(), index.clone());
        let ev = r.retrieve("heart", 32, 0).unwrap();
        assert_eq!(ev.len(), 10);
        let bm = bm25_rank(&index, "heart", 32);
        assert_eq!(ev.doc_ids(), bm.doc_ids().map(String::from).collect::<Vec<_>>());
        assert_eq!(r.retrieve("heart", 4, 0).unwrap().len(), 4);

        let r = HybridRetriever::new(store, index.clone()).with_dense(Arc::new(Reversed(index.clone())));
        let ev = r.retrieve("heart x3", 32, 1).unwrap();
        let bm = bm25_rank(&index, "heart x3", 100);
        let rev = Reversed(index).search("heart x3", 100).unwrap();
        let expected = rrf_fuse(&[bm, rev], 60.0).unwrap();
        assert_eq!(ev.doc_ids(), expected.doc_ids().map(String::from).collect::<Vec<_>>());
        assert_eq!(ev.iteration, 1);
    }
}
