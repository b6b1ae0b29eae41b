//! Exact-match scoring, benchmark runs, and the hallucination auditor.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BenchmarkQuestion, CorpusError, Document, DocumentStore, Label};
use crate::forge::{answer_hypothesis, Category};
use crate::gateway::{Gateway, GatewayError, NliLabel};
use crate::pipeline::{
    write_traces, AnswerRecord, Outcome, Pipeline, PipelineConfig, QuestionResult, RoundVerdict, TraceBody, TraceLine,
};
use crate::verdict::Verdict;

pub const SUMMARY_FILE: &str = "summary.json";
pub const PER_QUESTION_FILE: &str = "per_question.jsonl";
pub const TRACES_FILE: &str = "traces.jsonl";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("benchmark has no questions")]
    EmptyBenchmark,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Case-insensitive label equality; anything that is not an option label
/// never matches.
pub fn exact_match(predicted: &str, gold: &str) -> bool {
    match (predicted.parse::<Label>(), gold.parse::<Label>()) {
        (Ok(a), Ok(b)) => a == b,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionEval {
    pub q_id: String,
    pub predicted: Option<Label>,
    pub gold: Label,
    pub correct: bool,
    pub rounds_used: usize,
    pub outcome: Option<Outcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub n: usize,
    pub correct: usize,
    pub em: f64,
    pub failures: usize,
    pub per_question: Vec<QuestionEval>,
}

impl EvalReport {
    pub fn from_results(dataset: &str, questions: &[BenchmarkQuestion], results: &[QuestionResult]) -> Self {
        let per_question: Vec<QuestionEval> = questions
            .iter()
            .zip(results)
            .map(|(q, r)| match r {
                Ok(rec) => QuestionEval {
                    q_id: rec.q_id.clone(),
                    predicted: Some(rec.predicted),
                    gold: q.gold,
                    correct: exact_match(&rec.predicted.to_string(), &q.gold.to_string()),
                    rounds_used: rec.trace.rounds.len(),
                    outcome: Some(rec.trace.outcome),
                    error: None,
                },
                Err(f) => QuestionEval {
                    q_id: f.q_id.clone(),
                    predicted: None,
                    gold: q.gold,
                    correct: false,
                    rounds_used: f.rounds.len(),
                    outcome: None,
                    error: Some(f.error.to_string()),
                },
            })
            .collect();
        let n = per_question.len();
        let correct = per_question.iter().filter(|q| q.correct).count();
        Self {
            dataset: dataset.to_string(),
            n,
            correct,
            em: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            failures: per_question.iter().filter(|q| q.error.is_some()).count(),
            per_question,
        }
    }
}

pub fn run_benchmark(
    dataset: &str,
    questions: &[BenchmarkQuestion],
    pipeline: &Pipeline,
    config: &PipelineConfig,
    parallelism: usize,
) -> Result<(EvalReport, Vec<QuestionResult>), EvalError> {
    if questions.is_empty() {
        return Err(EvalError::EmptyBenchmark);
    }
    let results = pipeline.answer_batch(questions, config, parallelism);
    Ok((EvalReport::from_results(dataset, questions, &results), results))
}

/// Writes the summary object, per-question lines, and traces into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport, results: &[QuestionResult]) -> Result<(), EvalError> {
    std::fs::create_dir_all(dir)?;
    #[derive(Serialize)]
    struct Summary<'a> {
        dataset: &'a str,
        n: usize,
        correct: usize,
        em: f64,
        failures: usize,
    }
    let summary = Summary {
        dataset: &report.dataset,
        n: report.n,
        correct: report.correct,
        em: report.em,
        failures: report.failures,
    };
    std::fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    let mut w = BufWriter::new(File::create(dir.join(PER_QUESTION_FILE))?);
    for q in &report.per_question {
        serde_json::to_writer(&mut w, q)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    write_traces(&dir.join(TRACES_FILE), results)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStat {
    pub count: usize,
    pub denominator: usize,
    pub denominator_definition: String,
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordAudit {
    pub q_id: String,
    pub categories: Vec<Category>,
    /// Per statement: NLI of the statement against its cited documents.
    pub statement_nli: Vec<NliLabel>,
    /// Per statement: whether some uncited shown document entails it.
    pub supported_elsewhere: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence_entails_gold: Option<NliLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_with_verdict: Option<Label>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unauditable {
    pub q_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinationReport {
    pub audited: usize,
    pub categories: BTreeMap<Category, CategoryStat>,
    pub records: Vec<RecordAudit>,
    pub unauditable: Vec<Unauditable>,
}

const CITED_DENOMINATOR: &str = "audited records whose final verdict is citation-grounded reasoning";
const REFUSAL_DENOMINATOR: &str = "audited records that fell back after refusing in every answered round";

#[derive(Debug, Error)]
enum AuditFailure {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{0}")]
    Other(String),
}

fn texts(docs: &[Document]) -> Vec<&str> {
    docs.iter().map(|d| d.text.as_str()).collect()
}

fn audit_record(
    record: &AnswerRecord,
    question: &BenchmarkQuestion,
    store: &DocumentStore,
    gateway: &Gateway,
) -> Result<RecordAudit, AuditFailure> {
    let mut audit = RecordAudit {
        q_id: record.q_id.clone(),
        categories: Vec::new(),
        statement_nli: Vec::new(),
        supported_elsewhere: Vec::new(),
        evidence_entails_gold: None,
        answer_with_verdict: None,
    };
    match (&record.final_verdict, record.trace.outcome) {
        (Some(verdict @ Verdict::CiteReason { statements }), _) => {
            let round = record
                .trace
                .rounds
                .iter()
                .rev()
                .find(|r| r.verdict_kind == RoundVerdict::CiteReason)
                .ok_or_else(|| AuditFailure::Other("no citation round in trace".into()))?;
            let shown = round
                .doc_ids
                .iter()
                .map(|id| store.get_document(id))
                .collect::<Result<Vec<_>, _>>()?;
            verdict
                .validate(shown.len())
                .map_err(|e| AuditFailure::Other(e.to_string()))?;
            let (mut faulty, mut misattributed) = (false, false);
            for s in statements {
                let cited: Vec<Document> = s.citations.iter().map(|&c| shown[c - 1].clone()).collect();
                let nli = gateway.call_nli(&texts(&cited), &s.text)?;
                let mut elsewhere = false;
                if !nli.is_entail() {
                    for (i, d) in shown.iter().enumerate() {
                        if s.citations.contains(&(i + 1)) {
                            continue;
                        }
                        if gateway.call_nli(&[d.text.as_str()], &s.text)?.is_entail() {
                            elsewhere = true;
                            break;
                        }
                    }
                    if elsewhere {
                        misattributed = true;
                    } else {
                        faulty = true;
                    }
                }
                audit.statement_nli.push(nli);
                audit.supported_elsewhere.push(elsewhere);
            }
            audit.answer_with_verdict = Some(record.predicted);
            if faulty {
                audit.categories.push(Category::FaultyReasoning);
            }
            if record.predicted != question.gold {
                audit.categories.push(Category::MissingAnswer);
            }
            if misattributed {
                audit.categories.push(Category::Misattribution);
            }
        }
        (_, Outcome::Fallback) => {
            let refusals: Vec<_> = record
                .trace
                .rounds
                .iter()
                .filter(|r| r.verdict_kind == RoundVerdict::NegativeKnowledgeAssertion)
                .collect();
            if refusals.is_empty() {
                return Ok(audit);
            }
            let hypothesis = answer_hypothesis(question);
            let mut label = NliLabel::NotEntail;
            for r in refusals {
                let shown = r
                    .doc_ids
                    .iter()
                    .map(|id| store.get_document(id))
                    .collect::<Result<Vec<_>, _>>()?;
                if gateway.call_nli(&texts(&shown), &hypothesis)?.is_entail() {
                    label = NliLabel::Entail;
                    break;
                }
            }
            audit.evidence_entails_gold = Some(label);
            if label.is_entail() {
                audit.categories.push(Category::OverRefusal);
            }
        }
        _ => {}
    }
    audit.categories.sort();
    Ok(audit)
}

fn is_refusal_fallback(a: &RecordAudit) -> bool {
    a.evidence_entails_gold.is_some()
}

fn is_cited(a: &RecordAudit) -> bool {
    a.answer_with_verdict.is_some()
}

/// Audits answered traces. Records whose oracle calls fail, or that never
/// produced an answer, are listed as unauditable and left out of every
/// denominator.
pub fn audit_hallucinations(
    traces: &[TraceLine],
    questions: &[BenchmarkQuestion],
    store: &DocumentStore,
    gateway: &Gateway,
) -> HallucinationReport {
    let by_id: HashMap<&str, &BenchmarkQuestion> = questions.iter().map(|q| (q.q_id.as_str(), q)).collect();
    let mut records = Vec::new();
    let mut unauditable = Vec::new();
    for line in traces {
        let reason = match (&line.body, by_id.get(line.q_id.as_str())) {
            (TraceBody::Error { error, .. }, _) => Some(format!("no answer: {error}")),
            (TraceBody::Answered { .. }, None) => Some("unknown question".to_string()),
            (TraceBody::Answered { record }, Some(q)) => match audit_record(record, q, store, gateway) {
                Ok(a) => {
                    records.push(a);
                    None
                }
                Err(e) => Some(e.to_string()),
            },
        };
        if let Some(reason) = reason {
            unauditable.push(Unauditable {
                q_id: line.q_id.clone(),
                reason,
            });
        }
    }
    let cited = records.iter().filter(|a| is_cited(a)).count();
    let refused = records.iter().filter(|a| is_refusal_fallback(a)).count();
    let categories = Category::ALL
        .iter()
        .map(|&c| {
            let count = records.iter().filter(|a| a.categories.contains(&c)).count();
            let (denominator, def) = match c {
                Category::OverRefusal => (refused, REFUSAL_DENOMINATOR),
                _ => (cited, CITED_DENOMINATOR),
            };
            let proportion = if denominator == 0 {
                0.0
            } else {
                count as f64 / denominator as f64
            };
            (
                c,
                CategoryStat {
                    count,
                    denominator,
                    denominator_definition: def.to_string(),
                    proportion,
                },
            )
        })
        .collect();
    HallucinationReport {
        audited: records.len(),
        categories,
        records,
        unauditable,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Source;
    use crate::gateway::{keys, Role, ScriptedMock, MOCK_WILDCARD};
    use crate::pipeline::{IterationTrace, RoundRecord};
    use crate::verdict::parse_verdict;

    #[test]
    fn exact_match_cases() {
        assert!(exact_match("B", "B"));
        assert!(exact_match("b", "B"));
        assert!(!exact_match("A", "B"));
        assert!(!exact_match("E", "E"));
    }

    fn doc(i: usize) -> Document {
        Document {
            doc_id: format!("d{i}"),
            title: String::new(),
            text: format!("fact {i}"),
            source: Source::Other,
        }
    }

    fn question() -> BenchmarkQuestion {
        BenchmarkQuestion {
            q_id: "q1".into(),
            question: "what?".into(),
            options: Label::ALL.iter().map(|l| (*l, format!("opt {l}"))).collect(),
            gold: Label::A,
        }
    }

    fn round(kind: RoundVerdict) -> RoundRecord {
        RoundRecord {
            iteration: 0,
            query: "what?".into(),
            doc_ids: vec!["d0".into(), "d1".into(), "d2".into()],
            verifier_role: Role::Verifier,
            verifier_raw: None,
            verdict_kind: kind,
            gap_terms: vec![],
        }
    }

    fn cited_line(text: &str, predicted: Label) -> TraceLine {
        let v = parse_verdict(text, 3).unwrap();
        TraceLine {
            q_id: "q1".into(),
            body: TraceBody::Answered {
                record: AnswerRecord {
                    q_id: "q1".into(),
                    predicted,
                    gold: Label::A,
                    trace: IterationTrace {
                        rounds: vec![round(RoundVerdict::CiteReason)],
                        outcome: Outcome::Validated,
                    },
                    final_verdict: Some(v),
                },
            },
        }
    }

    fn setup(mock: ScriptedMock) -> (DocumentStore, Gateway) {
        (
            DocumentStore::from_documents((0..3).map(doc).collect()).unwrap(),
            Gateway::mocked(mock, &[]),
        )
    }

    fn cats(r: &HallucinationReport) -> Vec<Category> {
        r.records[0].categories.clone()
    }

    #[test]
    fn faulty_vs_misattribution() {
        let mut mock = ScriptedMock::new();
        mock.script(Role::Nli, keys::nli("fact 1", "supported by d2"), &["entail"]);
        mock.script(Role::Nli, MOCK_WILDCARD, &["not_entail"]);
        let (store, gw) = setup(mock);
        let q = [question()];
        let r = audit_hallucinations(&[cited_line("unsupported [Doc 1]", Label::A)], &q, &store, &gw);
        assert_eq!(cats(&r), [Category::FaultyReasoning]);
        let r = audit_hallucinations(&[cited_line("supported by d2 [Doc 1]", Label::A)], &q, &store, &gw);
        assert_eq!(cats(&r), [Category::Misattribution]);
        assert_eq!(r.categories[&Category::FaultyReasoning].count, 0);
        assert_eq!(r.categories[&Category::Misattribution].denominator, 1);
    }

    #[test]
    fn missing_answer_and_clean() {
        let mut mock = ScriptedMock::new();
        mock.script(Role::Nli, MOCK_WILDCARD, &["entail"]);
        let (store, gw) = setup(mock);
        let q = [question()];
        let r = audit_hallucinations(&[cited_line("ok [Doc 1]", Label::C)], &q, &store, &gw);
        assert_eq!(cats(&r), [Category::MissingAnswer]);
        let r = audit_hallucinations(&[cited_line("ok [Doc 1]", Label::A)], &q, &store, &gw);
        assert!(cats(&r).is_empty());
    }

    #[test]
    fn over_refusal_and_unauditable() {
        let refused = TraceLine {
            q_id: "q1".into(),
            body: TraceBody::Answered {
                record: AnswerRecord {
                    q_id: "q1".into(),
                    predicted: Label::B,
                    gold: Label::A,
                    trace: IterationTrace {
                        rounds: vec![round(RoundVerdict::NegativeKnowledgeAssertion)],
                        outcome: Outcome::Fallback,
                    },
                    final_verdict: None,
                },
            },
        };
        let mut mock = ScriptedMock::new();
        mock.script(Role::Nli, MOCK_WILDCARD, &["entail", "!timeout"]);
        let (store, gw) = setup(mock);
        let q = [question()];
        let r = audit_hallucinations(std::slice::from_ref(&refused), &q, &store, &gw);
        assert_eq!(cats(&r), [Category::OverRefusal]);
        assert_eq!(r.categories[&Category::OverRefusal].proportion, 1.0);
        let r = audit_hallucinations(&[refused], &q, &store, &gw);
        assert_eq!(r.audited, 0);
        assert_eq!(r.unauditable.len(), 1);
        assert_eq!(r.categories[&Category::OverRefusal].proportion, 0.0);
    }
}
