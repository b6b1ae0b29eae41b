//! The retrieve → verify → refine loop.
//!
//! Each round retrieves on the current query, shows the verifier the top
//! `verifier_view` documents (documents shown in earlier rounds are demoted
//! below unseen ones), and either stops on valid reasoning or rewrites the
//! query from the verifier's gap analysis. The generator runs exactly once:
//! on the validated reasoning, or with no reasoning after the last round.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BenchmarkQuestion, Label};
use crate::gateway::{Gateway, GatewayError, Role};
use crate::retrieval::{EvidenceSet, HybridRetriever, RetrievalError, DEFAULT_DEPTH};
use crate::verdict::{GapAnalysis, Verdict};

pub const FOCUS_MARKER: &str = " ; focus: ";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub t_max: usize,
    pub depth: usize,
    pub verifier_view: usize,
    pub enable_iteration: bool,
    pub enable_mtam_verifier: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            t_max: 3,
            depth: DEFAULT_DEPTH,
            verifier_view: 5,
            enable_iteration: true,
            enable_mtam_verifier: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.t_max == 0 {
            return Err(PipelineError::InvalidConfig("t_max must be >= 1".into()));
        }
        if self.verifier_view == 0 || self.verifier_view > self.depth {
            return Err(PipelineError::InvalidConfig(format!(
                "verifier_view {} must be in 1..=depth ({})",
                self.verifier_view, self.depth
            )));
        }
        Ok(())
    }

    pub fn verifier_role(&self) -> Role {
        if self.enable_mtam_verifier {
            Role::Verifier
        } else {
            Role::BaseVerifier
        }
    }

    /// Rounds actually allowed: one when iteration is disabled.
    pub fn max_rounds(&self) -> usize {
        if self.enable_iteration {
            self.t_max
        } else {
            1
        }
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline config: {0}")]
    InvalidConfig(String),
    #[error("gap analysis is empty")]
    EmptyGap,
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundVerdict {
    CiteReason,
    NegativeKnowledgeAssertion,
    /// Verifier reply could not be parsed; treated as a refusal with no gap.
    Unparseable,
    /// Retrieval returned nothing to show.
    NoEvidence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub iteration: usize,
    pub query: String,
    pub doc_ids: Vec<String>,
    pub verifier_role: Role,
    pub verifier_raw: Option<String>,
    pub verdict_kind: RoundVerdict,
    pub gap_terms: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Validated,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub rounds: Vec<RoundRecord>,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub q_id: String,
    pub predicted: Label,
    pub gold: Label,
    pub trace: IterationTrace,
    pub final_verdict: Option<Verdict>,
}

/// A question that aborted, with the rounds completed before the error.
#[derive(Debug)]
pub struct PipelineFailure {
    pub q_id: String,
    pub error: PipelineError,
    pub rounds: Vec<RoundRecord>,
}

pub type QuestionResult = Result<AnswerRecord, PipelineFailure>;

/// `question ; focus: a; b`. Any existing focus clause is replaced.
pub fn augment_query(question: &str, gap: &GapAnalysis) -> Result<String, PipelineError> {
    if gap.is_empty() {
        return Err(PipelineError::EmptyGap);
    }
    let base = strip_focus(question);
    Ok(format!("{base}{FOCUS_MARKER}{}", gap.missing_aspects.join("; ")))
}

pub fn strip_focus(query: &str) -> &str {
    query.find(FOCUS_MARKER).map_or(query, |i| &query[..i])
}

/// Unseen documents first, then already-shown ones, each group in fused
/// order; truncated to `view`.
fn verifier_view(evidence: &EvidenceSet, seen: &HashSet<String>, view: usize) -> EvidenceSet {
    let (unseen, shown): (Vec<_>, Vec<_>) = evidence
        .docs
        .iter()
        .zip(&evidence.scores)
        .partition(|(d, _)| !seen.contains(&d.doc_id));
    let (docs, scores) = unseen.into_iter().chain(shown).take(view).map(|(d, s)| (d.clone(), *s)).unzip();
    EvidenceSet {
        query_text: evidence.query_text.clone(),
        iteration: evidence.iteration,
        docs,
        scores,
    }
}

pub struct Pipeline {
    retriever: Arc<HybridRetriever>,
    gateway: Arc<Gateway>,
}

impl Pipeline {
    pub fn new(retriever: Arc<HybridRetriever>, gateway: Arc<Gateway>) -> Self {
        Self { retriever, gateway }
    }

    pub fn gateway(&self) -> &Arc<Gateway> {
        &self.gateway
    }

    pub fn retriever(&self) -> &Arc<HybridRetriever> {
        &self.retriever
    }

    pub fn answer_question(&self, question: &BenchmarkQuestion, config: &PipelineConfig) -> QuestionResult {
        let mut rounds = Vec::new();
        let fail = |error: PipelineError, rounds: Vec<RoundRecord>| PipelineFailure {
            q_id: question.q_id.clone(),
            error,
            rounds,
        };
        if let Err(e) = config.validate() {
            return Err(fail(e, rounds));
        }
        let role = config.verifier_role();
        let mut query = question.question.clone();
        let mut seen: HashSet<String> = HashSet::new();

        for t in 0..config.max_rounds() {
            let evidence = match self.retriever.retrieve(&query, config.depth, t) {
                Ok(ev) => ev,
                Err(e) => return Err(fail(e.into(), rounds)),
            };
            let view = verifier_view(&evidence, &seen, config.verifier_view);
            let mut record = RoundRecord {
                iteration: t,
                query: query.clone(),
                doc_ids: view.doc_ids(),
                verifier_role: role,
                verifier_raw: None,
                verdict_kind: RoundVerdict::NoEvidence,
                gap_terms: Vec::new(),
            };
            if view.is_empty() {
                rounds.push(record);
                continue;
            }
            seen.extend(view.doc_ids());
            match self.gateway.call_verifier(role, question, &view) {
                Ok(reply) => {
                    record.verifier_raw = Some(reply.raw);
                    match reply.output.verdict {
                        verdict @ Verdict::CiteReason { .. } => {
                            record.verdict_kind = RoundVerdict::CiteReason;
                            rounds.push(record);
                            return match self.gateway.call_generator(question, Some(&verdict)) {
                                Ok(predicted) => Ok(AnswerRecord {
                                    q_id: question.q_id.clone(),
                                    predicted,
                                    gold: question.gold,
                                    trace: IterationTrace {
                                        rounds,
                                        outcome: Outcome::Validated,
                                    },
                                    final_verdict: Some(verdict),
                                }),
                                Err(e) => Err(fail(e.into(), rounds)),
                            };
                        }
                        Verdict::NegativeKnowledgeAssertion { .. } => {
                            record.verdict_kind = RoundVerdict::NegativeKnowledgeAssertion;
                            let gap = reply.output.gap.unwrap_or_default();
                            record.gap_terms = gap.missing_aspects.clone();
                            if let Ok(next) = augment_query(&question.question, &gap) {
                                query = next;
                            }
                        }
                    }
                }
                Err(GatewayError::UnparseableVerdict { raw, .. }) => {
                    record.verifier_raw = Some(raw);
                    record.verdict_kind = RoundVerdict::Unparseable;
                }
                Err(e) => {
                    rounds.push(record);
                    return Err(fail(e.into(), rounds));
                }
            }
            rounds.push(record);
        }

        match self.gateway.call_generator(question, None) {
            Ok(predicted) => Ok(AnswerRecord {
                q_id: question.q_id.clone(),
                predicted,
                gold: question.gold,
                trace: IterationTrace {
                    rounds,
                    outcome: Outcome::Fallback,
                },
                final_verdict: None,
            }),
            Err(e) => Err(fail(e.into(), rounds)),
        }
    }

    /// Answers every question with up to `parallelism` workers. Results come
    /// back in input order; a failing question does not stop the batch.
    pub fn answer_batch(
        &self,
        questions: &[BenchmarkQuestion],
        config: &PipelineConfig,
        parallelism: usize,
    ) -> Vec<QuestionResult> {
        let workers = parallelism.clamp(1, questions.len().max(1));
        if workers == 1 {
            return questions.iter().map(|q| self.answer_question(q, config)).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<QuestionResult>>> =
            Mutex::new(std::iter::repeat_with(|| None).take(questions.len()).collect());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(q) = questions.get(i) else { break };
                    let r = self.answer_question(q, config);
                    slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .unwrap_or_else(|e| e.into_inner())
            .into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect()
    }
}

/// One line of the trace file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLine {
    pub q_id: String,
    #[serde(flatten)]
    pub body: TraceBody,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TraceBody {
    Answered { record: AnswerRecord },
    Error { error: String, rounds: Vec<RoundRecord> },
}

impl From<&QuestionResult> for TraceLine {
    fn from(r: &QuestionResult) -> Self {
        match r {
            Ok(record) => TraceLine {
                q_id: record.q_id.clone(),
                body: TraceBody::Answered { record: record.clone() },
            },
            Err(f) => TraceLine {
                q_id: f.q_id.clone(),
                body: TraceBody::Error {
                    error: f.error.to_string(),
                    rounds: f.rounds.clone(),
                },
            },
        }
    }
}

pub fn write_traces(path: &Path, results: &[QuestionResult]) -> std::io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in results {
        serde_json::to_writer(&mut w, &TraceLine::from(r))?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_traces(path: &Path) -> std::io::Result<Vec<TraceLine>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}
