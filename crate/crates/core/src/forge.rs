//! Preference-corpus construction.
//!
//! Candidate evidence is split into five-document subsets of varying
//! entailment mix. Drafts from a primary and an alternative drafter over each
//! subset become verified positives or one of four hallucination negatives:
//!
//! | category          | emitted when                                         |
//! |-------------------|------------------------------------------------------|
//! | faulty reasoning  | NLI(r', D) = not_entail                              |
//! | missing answer    | q stable, ψ(q) correct, ψ(q \| r') ≠ ψ(q)            |
//! | over-refusal      | alt refuses, NLI(r, D) = entail, ψ(q \| r) = ψ(q)    |
//! | misattribution    | Sim(D, D') > δ, NLI(r, D') = not_entail              |
//!
//! Every negative records the oracle outcomes that justified it so the label
//! can be re-checked from the record alone.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Mutex;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BenchmarkQuestion, CorpusError, Document, DocumentStore, Label};
use crate::gateway::{Gateway, GatewayError, NliLabel, Role};
use crate::medrank::{DifficultyGroup, Stratification};
use crate::retrieval::{EvidenceSet, HybridRetriever};
use crate::verdict::{parse_verdict, render_verdict, CiteStatement, Verdict, VerdictError, VerdictKind};

pub const DOCSET_SIZE: usize = 5;
pub const DEFAULT_DELTA: f64 = 0.8;
/// Target `(entail, not_entail)` mixes, tried in this order.
pub const COMPOSITIONS: [(usize, usize); 6] = [(5, 0), (4, 1), (3, 2), (2, 3), (1, 4), (0, 5)];

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("need at least {DOCSET_SIZE} candidate documents, got {0}")]
    TooFewCandidates(usize),
    #[error("unparseable draft ({reason}): {raw:?}")]
    UnparseableDraft { raw: String, reason: VerdictError },
    #[error("document sets must be non-empty")]
    EmptySet,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    FaultyReasoning,
    MissingAnswer,
    OverRefusal,
    Misattribution,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::FaultyReasoning,
        Category::MissingAnswer,
        Category::OverRefusal,
        Category::Misattribution,
    ];
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::FaultyReasoning => "faulty_reasoning",
            Category::MissingAnswer => "missing_answer",
            Category::OverRefusal => "over_refusal",
            Category::Misattribution => "misattribution",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComposedDocSet {
    pub q_id: String,
    pub doc_ids: Vec<String>,
    pub labels: Vec<NliLabel>,
    pub composition: (usize, usize),
}

/// Hypothesis used to label single documents: the question followed by the
/// gold option text.
pub fn answer_hypothesis(question: &BenchmarkQuestion) -> String {
    format!("{} Answer: {}", question.question, question.option_text(question.gold))
}

/// Builds one subset per achievable composition, filling each label class in
/// the given (fused-rank) order.
pub fn compose_from_labels(q_id: &str, doc_ids: &[String], labels: &[NliLabel]) -> Vec<ComposedDocSet> {
    let entail: Vec<usize> = (0..doc_ids.len()).filter(|&i| labels[i].is_entail()).collect();
    let not: Vec<usize> = (0..doc_ids.len()).filter(|&i| !labels[i].is_entail()).collect();
    COMPOSITIONS
        .iter()
        .filter(|&&(e, n)| entail.len() >= e && not.len() >= n)
        .map(|&(e, n)| {
            let mut picked: Vec<usize> = entail[..e].iter().chain(&not[..n]).copied().collect();
            picked.sort_unstable();
            ComposedDocSet {
                q_id: q_id.to_string(),
                doc_ids: picked.iter().map(|&i| doc_ids[i].clone()).collect(),
                labels: picked.iter().map(|&i| labels[i]).collect(),
                composition: (e, n),
            }
        })
        .collect()
}

/// Labels every candidate with NLI(d, q, a) and composes the subsets.
pub fn compose_document_sets(
    question: &BenchmarkQuestion,
    candidates: &EvidenceSet,
    gateway: &Gateway,
) -> Result<Vec<ComposedDocSet>, ForgeError> {
    if candidates.len() < DOCSET_SIZE {
        return Err(ForgeError::TooFewCandidates(candidates.len()));
    }
    let hypothesis = answer_hypothesis(question);
    let labels = candidates
        .docs
        .iter()
        .map(|d| gateway.call_nli(&[d.text.as_str()], &hypothesis))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(compose_from_labels(&question.q_id, &candidates.doc_ids(), &labels))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Draft {
    pub role: Role,
    pub verdict: Verdict,
    pub raw: String,
}

pub fn draft_reasoning(
    question: &BenchmarkQuestion,
    docs: &[Document],
    role: Role,
    gateway: &Gateway,
) -> Result<Draft, ForgeError> {
    let raw = gateway.call_drafter(role, question, docs)?;
    let verdict = parse_verdict(&raw, docs.len()).map_err(|reason| ForgeError::UnparseableDraft {
        raw: raw.clone(),
        reason,
    })?;
    Ok(Draft { role, verdict, raw })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositiveCheck {
    pub verified: bool,
    pub answer: Option<Label>,
    pub reason: Option<String>,
}

/// ψ(q, r) must return the gold label. Gateway failures count as unverified.
pub fn verify_positive(question: &BenchmarkQuestion, reasoning: &Verdict, gateway: &Gateway) -> PositiveCheck {
    match gateway.call_generator(question, Some(reasoning)) {
        Ok(a) => PositiveCheck {
            verified: a == question.gold,
            answer: Some(a),
            reason: (a != question.gold).then(|| format!("generator answered {a}, gold {}", question.gold)),
        },
        Err(e) => PositiveCheck {
            verified: false,
            answer: None,
            reason: Some(e.to_string()),
        },
    }
}

/// Oracle outcomes behind a negative sample.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OracleEvidence {
    /// NLI of the sample's reasoning against its documents (r' vs D for faulty
    /// reasoning, r vs D for over-refusal, r vs D' for misattribution).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nli: Option<NliLabel>,
    /// ψ(q) without reasoning.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi_plain: Option<Label>,
    /// ψ(q | reasoning).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi_with: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<DifficultyGroup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Original evidence D for misattribution samples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_doc_ids: Option<Vec<String>>,
    /// Per-document NLI labels of the reasoning, kept so any-document
    /// entailment can be audited alongside the concatenated premise.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_doc_nli: Vec<NliLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeSample {
    pub q_id: String,
    pub doc_ids: Vec<String>,
    pub verdict: Verdict,
    pub category: Category,
    pub evidence: OracleEvidence,
    pub provenance: Vec<String>,
}

impl NegativeSample {
    /// Re-evaluates the category predicate from the recorded evidence.
    pub fn predicate_holds(&self) -> bool {
        let ev = &self.evidence;
        match self.category {
            Category::FaultyReasoning => self.verdict.is_cite_reason() && ev.nli == Some(NliLabel::NotEntail),
            Category::MissingAnswer => {
                ev.group == Some(DifficultyGroup::Stable)
                    && ev.psi_plain.is_some()
                    && ev.psi_plain == ev.gold
                    && ev.psi_with.is_some()
                    && ev.psi_with != ev.psi_plain
            }
            Category::OverRefusal => {
                self.verdict.kind() == VerdictKind::NegativeKnowledgeAssertion
                    && ev.nli == Some(NliLabel::Entail)
                    && ev.psi_plain.is_some()
                    && ev.psi_with == ev.psi_plain
            }
            Category::Misattribution => {
                matches!((ev.similarity, ev.delta), (Some(s), Some(d)) if s > d)
                    && ev.nli == Some(NliLabel::NotEntail)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveKind {
    /// Verified citation-grounded reasoning.
    Reasoning,
    /// Legitimate refusal over evidence with no entailing document.
    Refusal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositiveSample {
    pub q_id: String,
    pub doc_ids: Vec<String>,
    pub verdict: Verdict,
    pub kind: PositiveKind,
    pub group: Option<DifficultyGroup>,
    pub provenance: Vec<String>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Mean over `d'` in `target` of the max cosine against `source`.
pub fn mean_of_max_cosine(source: &[Vec<f64>], target: &[Vec<f64>]) -> Result<f64, ForgeError> {
    if source.is_empty() || target.is_empty() {
        return Err(ForgeError::EmptySet);
    }
    let total: f64 = target
        .iter()
        .map(|t| source.iter().map(|s| cosine(s, t)).fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Ok(total / target.len() as f64)
}

/// Ids from `pool` ordered by max cosine against `source`, descending, ties
/// by id; the first `size` are kept.
pub fn rank_distractors(source: &[Vec<f64>], pool: &[(String, Vec<f64>)], size: usize) -> Vec<String> {
    let mut scored: Vec<(f64, &str)> = pool
        .iter()
        .map(|(id, e)| {
            let best = source.iter().map(|s| cosine(s, e)).fold(f64::NEG_INFINITY, f64::max);
            (best, id.as_str())
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().take(size).map(|(_, id)| id.to_string()).collect()
}

fn premise_texts(docs: &[Document]) -> Vec<&str> {
    docs.iter().map(|d| d.text.as_str()).collect()
}

/// Oracle access for the constructors, with per-run caches so repeated
/// lookups of ψ(q) and embeddings stay consistent.
pub struct Forge<'a> {
    gateway: &'a Gateway,
    store: &'a DocumentStore,
    pub delta: f64,
    psi_plain: Mutex<HashMap<String, Result<Label, String>>>,
    embeddings: Mutex<HashMap<String, Vec<f64>>>,
}

impl<'a> Forge<'a> {
    pub fn new(gateway: &'a Gateway, store: &'a DocumentStore) -> Self {
        Self {
            gateway,
            store,
            delta: DEFAULT_DELTA,
            psi_plain: Mutex::new(HashMap::new()),
            embeddings: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_delta(mut self, delta: f64) -> Self {
        self.delta = delta;
        self
    }

    fn model(&self, role: Role) -> String {
        self.gateway
            .endpoint(role)
            .map(|e| e.model_name.clone())
            .unwrap_or_else(|_| role.to_string())
    }

    pub fn resolve(&self, doc_ids: &[String]) -> Result<Vec<Document>, ForgeError> {
        Ok(doc_ids
            .iter()
            .map(|id| self.store.get_document(id))
            .collect::<Result<_, _>>()?)
    }

    /// ψ(q) with no reasoning, cached per question.
    pub fn psi_plain(&self, question: &BenchmarkQuestion) -> Result<Label, ForgeError> {
        let mut cache = self.psi_plain.lock().unwrap_or_else(|e| e.into_inner());
        let entry = cache
            .entry(question.q_id.clone())
            .or_insert_with(|| self.gateway.call_generator(question, None).map_err(|e| e.to_string()));
        entry.clone().map_err(|m| {
            ForgeError::Gateway(GatewayError::Transport {
                role: Role::Generator,
                message: m,
            })
        })
    }

    pub fn embedding(&self, doc: &Document) -> Result<Vec<f64>, ForgeError> {
        if let Some(v) = self.embeddings.lock().unwrap_or_else(|e| e.into_inner()).get(&doc.doc_id) {
            return Ok(v.clone());
        }
        let v = self.gateway.embed(&doc.text)?;
        self.embeddings
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(doc.doc_id.clone(), v.clone());
        Ok(v)
    }

    pub fn set_similarity(&self, d: &[Document], d_prime: &[Document]) -> Result<f64, ForgeError> {
        let src = d.iter().map(|x| self.embedding(x)).collect::<Result<Vec<_>, _>>()?;
        let tgt = d_prime.iter().map(|x| self.embedding(x)).collect::<Result<Vec<_>, _>>()?;
        mean_of_max_cosine(&src, &tgt)
    }

    /// NLI of the reasoning's statements against the concatenated documents,
    /// plus per-document labels.
    fn reasoning_nli(&self, reasoning: &Verdict, docs: &[Document]) -> Result<(NliLabel, Vec<NliLabel>), ForgeError> {
        let hypothesis = reasoning.plain_text();
        let joint = self.gateway.call_nli(&premise_texts(docs), &hypothesis)?;
        let per_doc = docs
            .iter()
            .map(|d| self.gateway.call_nli(&[d.text.as_str()], &hypothesis))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((joint, per_doc))
    }

    /// Faulty reasoning: the alternative drafter's reasoning is not entailed by
    /// the documents.
    pub fn build_faulty_reasoning(
        &self,
        question: &BenchmarkQuestion,
        docs: &[Document],
        alt: &Draft,
    ) -> Result<Option<NegativeSample>, ForgeError> {
        if !alt.verdict.is_cite_reason() {
            return Ok(None);
        }
        let (nli, per_doc_nli) = self.reasoning_nli(&alt.verdict, docs)?;
        if nli.is_entail() {
            return Ok(None);
        }
        Ok(Some(NegativeSample {
            q_id: question.q_id.clone(),
            doc_ids: docs.iter().map(|d| d.doc_id.clone()).collect(),
            verdict: alt.verdict.clone(),
            category: Category::FaultyReasoning,
            evidence: OracleEvidence {
                nli: Some(nli),
                per_doc_nli,
                ..Default::default()
            },
            provenance: vec![self.model(alt.role), self.model(Role::Nli)],
        }))
    }

    /// Missing answer: on a stable question that ψ answers correctly alone,
    /// the alternative reasoning changes ψ's answer.
    pub fn build_missing_answer(
        &self,
        question: &BenchmarkQuestion,
        group: Option<DifficultyGroup>,
        docs: &[Document],
        alt: &Draft,
    ) -> Result<Option<NegativeSample>, ForgeError> {
        if group != Some(DifficultyGroup::Stable) || !alt.verdict.is_cite_reason() {
            return Ok(None);
        }
        let plain = self.psi_plain(question)?;
        if plain != question.gold {
            return Ok(None);
        }
        let with = self.gateway.call_generator(question, Some(&alt.verdict))?;
        if with == plain {
            return Ok(None);
        }
        Ok(Some(NegativeSample {
            q_id: question.q_id.clone(),
            doc_ids: docs.iter().map(|d| d.doc_id.clone()).collect(),
            verdict: alt.verdict.clone(),
            category: Category::MissingAnswer,
            evidence: OracleEvidence {
                psi_plain: Some(plain),
                psi_with: Some(with),
                gold: Some(question.gold),
                group,
                ..Default::default()
            },
            provenance: vec![self.model(alt.role), self.model(Role::Generator)],
        }))
    }

    /// Over-refusal: the alternative drafter refuses although the primary
    /// reasoning is entailed and leaves ψ's answer unchanged.
    pub fn build_over_refusal(
        &self,
        question: &BenchmarkQuestion,
        docs: &[Document],
        primary: &Draft,
        alt: &Draft,
    ) -> Result<Option<NegativeSample>, ForgeError> {
        if !primary.verdict.is_cite_reason() || alt.verdict.is_cite_reason() {
            return Ok(None);
        }
        let (nli, per_doc_nli) = self.reasoning_nli(&primary.verdict, docs)?;
        if !nli.is_entail() {
            return Ok(None);
        }
        let with = self.gateway.call_generator(question, Some(&primary.verdict))?;
        let plain = self.psi_plain(question)?;
        if with != plain {
            return Ok(None);
        }
        Ok(Some(NegativeSample {
            q_id: question.q_id.clone(),
            doc_ids: docs.iter().map(|d| d.doc_id.clone()).collect(),
            verdict: alt.verdict.clone(),
            category: Category::OverRefusal,
            evidence: OracleEvidence {
                nli: Some(nli),
                psi_plain: Some(plain),
                psi_with: Some(with),
                per_doc_nli,
                ..Default::default()
            },
            provenance: vec![self.model(primary.role), self.model(alt.role), self.model(Role::Nli)],
        }))
    }

    /// The `size` store documents outside `docs` closest to any of them by
    /// cosine, ties by doc id.
    pub fn select_distractors(&self, docs: &[Document], size: usize) -> Result<Vec<Document>, ForgeError> {
        let src = docs.iter().map(|d| self.embedding(d)).collect::<Result<Vec<_>, _>>()?;
        let mut pool = Vec::new();
        for id in self.store.doc_ids() {
            if docs.iter().any(|d| &d.doc_id == id) {
                continue;
            }
            let doc = self.store.get_document(id)?;
            let e = self.embedding(&doc)?;
            pool.push((doc.doc_id, e));
        }
        rank_distractors(&src, &pool, size)
            .into_iter()
            .map(|id| Ok(self.store.get_document(&id)?))
            .collect()
    }

    /// Misattribution: valid reasoning over D re-attached to a distractor set
    /// D' that is similar to D but does not entail it.
    pub fn build_misattribution(
        &self,
        question: &BenchmarkQuestion,
        docs: &[Document],
        reasoning: &Verdict,
    ) -> Result<Option<NegativeSample>, ForgeError> {
        if !reasoning.is_cite_reason() || reasoning.validate(docs.len()).is_err() {
            return Ok(None);
        }
        let distractors = self.select_distractors(docs, docs.len())?;
        if distractors.is_empty() {
            return Ok(None);
        }
        let sim = self.set_similarity(docs, &distractors)?;
        if !(sim > self.delta) {
            return Ok(None);
        }
        let (nli, per_doc_nli) = self.reasoning_nli(reasoning, &distractors)?;
        if nli.is_entail() {
            return Ok(None);
        }
        Ok(Some(NegativeSample {
            q_id: question.q_id.clone(),
            doc_ids: distractors.iter().map(|d| d.doc_id.clone()).collect(),
            verdict: reasoning.clone(),
            category: Category::Misattribution,
            evidence: OracleEvidence {
                nli: Some(nli),
                similarity: Some(sim),
                delta: Some(self.delta),
                source_doc_ids: Some(docs.iter().map(|d| d.doc_id.clone()).collect()),
                per_doc_nli,
                ..Default::default()
            },
            provenance: vec![self.model(Role::PrimaryDrafter), self.model(Role::Embedder), self.model(Role::Nli)],
        }))
    }

    /// Runs every constructor over one question's candidates.
    pub fn forge_question(
        &self,
        question: &BenchmarkQuestion,
        group: Option<DifficultyGroup>,
        candidates: &EvidenceSet,
    ) -> Result<QuestionForge, ForgeError> {
        let docsets = compose_document_sets(question, candidates, self.gateway)?;
        let mut out = QuestionForge {
            docsets: docsets.clone(),
            ..Default::default()
        };
        for set in &docsets {
            let docs = self.resolve(&set.doc_ids)?;
            let tag = format!("{} {:?}", question.q_id, set.composition);
            let primary = match draft_reasoning(question, &docs, Role::PrimaryDrafter, self.gateway) {
                Ok(d) => Some(d),
                Err(e) => {
                    out.log.push(format!("{tag}: primary draft quarantined: {e}"));
                    None
                }
            };
            let alt = match draft_reasoning(question, &docs, Role::AltDrafter, self.gateway) {
                Ok(d) => Some(d),
                Err(e) => {
                    out.log.push(format!("{tag}: alt draft quarantined: {e}"));
                    None
                }
            };

            if let Some(p) = &primary {
                match &p.verdict {
                    Verdict::CiteReason { .. } => {
                        let check = verify_positive(question, &p.verdict, self.gateway);
                        if check.verified {
                            out.positives.push(PositiveSample {
                                q_id: question.q_id.clone(),
                                doc_ids: set.doc_ids.clone(),
                                verdict: p.verdict.clone(),
                                kind: PositiveKind::Reasoning,
                                group,
                                provenance: vec![self.model(p.role), self.model(Role::Generator)],
                            });
                        } else if let Some(r) = check.reason {
                            out.log.push(format!("{tag}: positive unverified: {r}"));
                        }
                    }
                    Verdict::NegativeKnowledgeAssertion { .. } if set.composition.0 == 0 => {
                        out.positives.push(PositiveSample {
                            q_id: question.q_id.clone(),
                            doc_ids: set.doc_ids.clone(),
                            verdict: p.verdict.clone(),
                            kind: PositiveKind::Refusal,
                            group,
                            provenance: vec![self.model(p.role)],
                        });
                    }
                    Verdict::NegativeKnowledgeAssertion { .. } => {}
                }
            }

            let mut attempt = |r: Result<Option<NegativeSample>, ForgeError>, what: &str| match r {
                Ok(Some(mut s)) => {
                    s.evidence.group = s.evidence.group.or(group);
                    out.negatives.push(s);
                }
                Ok(None) => {}
                Err(e) => out.log.push(format!("{tag}: {what} skipped: {e}")),
            };
            if let Some(a) = &alt {
                attempt(self.build_faulty_reasoning(question, &docs, a), "faulty_reasoning");
                attempt(self.build_missing_answer(question, group, &docs, a), "missing_answer");
            }
            if let (Some(p), Some(a)) = (&primary, &alt) {
                attempt(self.build_over_refusal(question, &docs, p, a), "over_refusal");
            }
            if let Some(p) = &primary {
                attempt(self.build_misattribution(question, &docs, &p.verdict), "misattribution");
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuestionForge {
    pub docsets: Vec<ComposedDocSet>,
    pub positives: Vec<PositiveSample>,
    pub negatives: Vec<NegativeSample>,
    pub log: Vec<String>,
}

/// Samples and log from forging a whole benchmark.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForgeRun {
    pub positives: Vec<PositiveSample>,
    pub negatives: Vec<NegativeSample>,
    pub log: Vec<String>,
}

/// Forges every question not rejected by stratification, in input order,
/// over its first-round retrieval candidates.
pub fn forge_corpus(
    forge: &Forge<'_>,
    questions: &[BenchmarkQuestion],
    stratification: &Stratification,
    retriever: &HybridRetriever,
    depth: usize,
) -> ForgeRun {
    let mut run = ForgeRun::default();
    for q in questions {
        if stratification.rejects.iter().any(|r| r.q_id == q.q_id) {
            run.log.push(format!("{}: rejected by stratification", q.q_id));
            continue;
        }
        let group = stratification.group_of(&q.q_id);
        let result = retriever
            .retrieve(&q.question, depth, 0)
            .map_err(|e| e.to_string())
            .and_then(|ev| forge.forge_question(q, group, &ev).map_err(|e| e.to_string()));
        match result {
            Ok(qf) => {
                run.positives.extend(qf.positives);
                run.negatives.extend(qf.negatives);
                run.log.extend(qf.log);
            }
            Err(e) => run.log.push(format!("{}: skipped: {e}", q.q_id)),
        }
    }
    run
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptDoc {
    pub doc_id: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub question: String,
    pub options: BTreeMap<Label, String>,
    pub docs: Vec<PromptDoc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub q_id: String,
    pub prompt: Prompt,
    pub chosen: Verdict,
    pub rejected: Verdict,
    pub category: Category,
    pub group: Option<DifficultyGroup>,
    pub provenance: Vec<String>,
}

/// Line format of the preference corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub q_id: String,
    pub prompt: Prompt,
    pub chosen_text: String,
    pub rejected_text: String,
    pub category: Category,
    pub provenance: Vec<String>,
}

impl From<&PreferencePair> for PreferenceRecord {
    fn from(p: &PreferencePair) -> Self {
        Self {
            q_id: p.q_id.clone(),
            prompt: p.prompt.clone(),
            chosen_text: render_verdict(&p.chosen),
            rejected_text: render_verdict(&p.rejected),
            category: p.category,
            provenance: p.provenance.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalancePolicy {
    /// Pair each negative with a positive of the same question only.
    #[default]
    PerQuestion,
    /// Negatives without a same-question positive borrow one, sampled with a
    /// fixed seed from positives of the same difficulty group (any group when
    /// none exists).
    CrossQuestion { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub pairs: usize,
    pub per_category: BTreeMap<Category, usize>,
    /// Negatives that made it into pairs, by difficulty group then category.
    pub per_group: BTreeMap<String, BTreeMap<Category, usize>>,
    pub positives: BTreeMap<PositiveKind, usize>,
    pub negatives: usize,
    pub delta: f64,
    pub policy: BalancePolicy,
    pub endpoints: BTreeMap<String, String>,
    pub unpairable: Vec<String>,
}

/// The same reasoning with every citation moved `offset` documents later.
pub fn shift_citations(verdict: &Verdict, offset: usize) -> Verdict {
    match verdict {
        Verdict::CiteReason { statements } => Verdict::CiteReason {
            statements: statements
                .iter()
                .map(|s| CiteStatement {
                    text: s.text.clone(),
                    citations: s.citations.iter().map(|c| c + offset).collect(),
                })
                .collect(),
        },
        other => other.clone(),
    }
}

fn group_name(g: Option<DifficultyGroup>) -> String {
    match g {
        Some(DifficultyGroup::Stable) => "stable".into(),
        Some(DifficultyGroup::Medium) => "medium".into(),
        Some(DifficultyGroup::Challenging) => "challenging".into(),
        None => "unknown".into(),
    }
}

/// Pairs each negative with a positive of the same question, preferring one
/// over the same documents, otherwise cycling through that question's
/// positives.
pub fn emit_preference_corpus(
    questions: &[BenchmarkQuestion],
    positives: &[PositiveSample],
    negatives: &[NegativeSample],
    policy: BalancePolicy,
    store: &DocumentStore,
    gateway: &Gateway,
    delta: f64,
) -> Result<(Vec<PreferencePair>, Manifest), ForgeError> {
    let by_id: HashMap<&str, &BenchmarkQuestion> = questions.iter().map(|q| (q.q_id.as_str(), q)).collect();
    let mut pos_by_q: HashMap<&str, Vec<&PositiveSample>> = HashMap::new();
    for p in positives {
        pos_by_q.entry(p.q_id.as_str()).or_default().push(p);
    }
    let mut rng = match policy {
        BalancePolicy::CrossQuestion { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        BalancePolicy::PerQuestion => None,
    };
    let mut manifest = Manifest {
        delta,
        policy,
        negatives: negatives.len(),
        endpoints: gateway
            .endpoints()
            .iter()
            .map(|e| (e.role.to_string(), e.model_name.clone()))
            .collect(),
        ..Default::default()
    };
    for p in positives {
        *manifest.positives.entry(p.kind).or_default() += 1;
    }
    let mut cursor: HashMap<&str, usize> = HashMap::new();
    let mut used_positive: HashMap<(&str, &[String]), bool> = HashMap::new();
    let mut pairs = Vec::new();

    for neg in negatives {
        let Some(question) = by_id.get(neg.q_id.as_str()) else {
            manifest.unpairable.push(format!("{} {}: unknown question", neg.q_id, neg.category));
            continue;
        };
        let own = pos_by_q.get(neg.q_id.as_str()).map(Vec::as_slice).unwrap_or(&[]);
        let resolve = |ids: &[String]| {
            ids.iter()
                .map(|id| store.get_document(id).map(|d| PromptDoc { doc_id: d.doc_id, title: d.title, text: d.text }))
                .collect::<Result<Vec<_>, _>>()
        };
        // Misattribution pairs share a prompt holding D then D': the chosen
        // reasoning cites D, the rejected cites the same positions in D'.
        let (chosen, docs, rejected) = if neg.category == Category::Misattribution {
            let source = neg.evidence.source_doc_ids.clone().unwrap_or_default();
            match own.iter().find(|p| p.doc_ids == source && p.verdict == neg.verdict) {
                Some(p) => {
                    let mut docs = resolve(&source)?;
                    docs.extend(resolve(&neg.doc_ids)?);
                    (Some(*p), docs, shift_citations(&neg.verdict, source.len()))
                }
                None => (None, Vec::new(), neg.verdict.clone()),
            }
        } else {
            let candidates: Vec<&PositiveSample> = own.iter().copied().filter(|p| p.verdict != neg.verdict).collect();
            let chosen = if candidates.is_empty() {
                match rng.as_mut() {
                    Some(rng) => {
                        let group = neg.evidence.group;
                        let same: Vec<&PositiveSample> = positives
                            .iter()
                            .filter(|p| p.group == group && p.verdict != neg.verdict)
                            .collect();
                        let pool: Vec<&PositiveSample> = if same.is_empty() {
                            positives.iter().filter(|p| p.verdict != neg.verdict).collect()
                        } else {
                            same
                        };
                        pool.choose(rng).copied()
                    }
                    None => None,
                }
            } else if let Some(p) = candidates.iter().find(|p| p.doc_ids == neg.doc_ids) {
                Some(*p)
            } else {
                let c = cursor.entry(neg.q_id.as_str()).or_default();
                let p = candidates[*c % candidates.len()];
                *c += 1;
                Some(p)
            };
            (chosen, resolve(&neg.doc_ids)?, neg.verdict.clone())
        };
        let Some(chosen) = chosen else {
            manifest
                .unpairable
                .push(format!("{} {}: no positive to pair with", neg.q_id, neg.category));
            continue;
        };
        used_positive.insert((chosen.q_id.as_str(), chosen.doc_ids.as_slice()), true);
        let mut provenance = chosen.provenance.clone();
        provenance.extend(neg.provenance.iter().cloned());
        provenance.dedup();
        *manifest.per_category.entry(neg.category).or_default() += 1;
        *manifest
            .per_group
            .entry(group_name(neg.evidence.group))
            .or_default()
            .entry(neg.category)
            .or_default() += 1;
        pairs.push(PreferencePair {
            q_id: neg.q_id.clone(),
            prompt: Prompt {
                question: question.question.clone(),
                options: question.options.clone(),
                docs,
            },
            chosen: chosen.verdict.clone(),
            rejected,
            category: neg.category,
            group: neg.evidence.group,
            provenance,
        });
    }
    for p in positives {
        if !used_positive.contains_key(&(p.q_id.as_str(), p.doc_ids.as_slice())) {
            manifest
                .unpairable
                .push(format!("{} positive over {:?}: no negative to pair with", p.q_id, p.doc_ids));
        }
    }
    manifest.pairs = pairs.len();
    Ok((pairs, manifest))
}
