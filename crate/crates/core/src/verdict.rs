//! Dual verdicts: citation-grounded reasoning or a structured refusal.
//!
//! Text format: `statement_1 [Doc 1] statement_2 [Doc 2][Doc 3]`. Each
//! statement owns the maximal run of citation tokens that follows it. A text
//! whose first words match the refusal prefix (case-insensitive) is a
//! refusal.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NKA_SENTENCE: &str =
    "Insufficient evidence was identified in the retrieved content to support a medically reliable answer.";
pub const NKA_PREFIX: &str = "Insufficient evidence was identified";

/// `[Doc N]` with optional whitespace inside the brackets and before the number.
static CITATION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\[\s*Doc\s*([0-9]+)\s*\]").expect("citation regex"));

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum VerdictError {
    #[error("citation [Doc {0}] out of range")]
    CitationOutOfRange(u64),
    #[error("trailing statement has no citation: {0:?}")]
    UncitedStatement(String),
    #[error("empty verdict")]
    EmptyVerdict,
    #[error("verdict is not citation-grounded reasoning")]
    NotCiteReason,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CiteStatement {
    pub text: String,
    /// 1-based indices into the presented evidence.
    pub citations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Verdict {
    CiteReason { statements: Vec<CiteStatement> },
    NegativeKnowledgeAssertion { text: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictKind {
    CiteReason,
    NegativeKnowledgeAssertion,
}

/// Missing evidence aspects the verifier wants the next query to target.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GapAnalysis {
    pub missing_aspects: Vec<String>,
}

impl GapAnalysis {
    pub const MAX_ASPECTS: usize = 5;

    /// Trims, drops empties, keeps at most five aspects.
    pub fn new<I, S>(aspects: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            missing_aspects: aspects
                .into_iter()
                .map(|s| s.as_ref().trim().to_string())
                .filter(|s| !s.is_empty())
                .take(Self::MAX_ASPECTS)
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.missing_aspects.is_empty()
    }
}

fn is_nka_text(text: &str) -> bool {
    text.get(..NKA_PREFIX.len())
        .is_some_and(|head| head.eq_ignore_ascii_case(NKA_PREFIX))
}

impl Verdict {
    pub fn nka() -> Self {
        Verdict::NegativeKnowledgeAssertion {
            text: NKA_SENTENCE.to_string(),
        }
    }

    pub fn kind(&self) -> VerdictKind {
        match self {
            Verdict::CiteReason { .. } => VerdictKind::CiteReason,
            Verdict::NegativeKnowledgeAssertion { .. } => VerdictKind::NegativeKnowledgeAssertion,
        }
    }

    pub fn is_cite_reason(&self) -> bool {
        matches!(self, Verdict::CiteReason { .. })
    }

    pub fn statements(&self) -> &[CiteStatement] {
        match self {
            Verdict::CiteReason { statements } => statements,
            Verdict::NegativeKnowledgeAssertion { .. } => &[],
        }
    }

    /// Statement texts without citation markers, space-joined. For a refusal,
    /// the refusal text.
    pub fn plain_text(&self) -> String {
        match self {
            Verdict::CiteReason { statements } => statements
                .iter()
                .map(|s| s.text.as_str())
                .collect::<Vec<_>>()
                .join(" "),
            Verdict::NegativeKnowledgeAssertion { text } => text.clone(),
        }
    }

    /// Checks the invariants that make `parse_verdict(render_verdict(v))`
    /// return `v` when `num_docs` documents were presented.
    pub fn validate(&self, num_docs: usize) -> Result<(), VerdictError> {
        match self {
            Verdict::NegativeKnowledgeAssertion { text } => {
                if text.trim() != text || !is_nka_text(text) {
                    return Err(VerdictError::EmptyVerdict);
                }
            }
            Verdict::CiteReason { statements } => {
                if statements.is_empty() {
                    return Err(VerdictError::EmptyVerdict);
                }
                for (i, s) in statements.iter().enumerate() {
                    if s.text.is_empty() || s.text.trim() != s.text || CITATION.is_match(&s.text) {
                        return Err(VerdictError::UncitedStatement(s.text.clone()));
                    }
                    if i == 0 && is_nka_text(&s.text) {
                        return Err(VerdictError::UncitedStatement(s.text.clone()));
                    }
                    if s.citations.is_empty() {
                        return Err(VerdictError::UncitedStatement(s.text.clone()));
                    }
                    if let Some(&bad) = s.citations.iter().find(|&&c| c == 0 || c > num_docs) {
                        return Err(VerdictError::CitationOutOfRange(bad as u64));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Parses model output into a verdict, bounds-checking citations against
/// `num_docs` presented documents.
pub fn parse_verdict(text: &str, num_docs: usize) -> Result<Verdict, VerdictError> {
    let text = text.trim();
    if text.is_empty() {
        return Err(VerdictError::EmptyVerdict);
    }
    if is_nka_text(text) {
        return Ok(Verdict::NegativeKnowledgeAssertion {
            text: text.to_string(),
        });
    }

    let mut statements: Vec<CiteStatement> = Vec::new();
    let mut cursor = 0;
    for m in CITATION.captures_iter(text) {
        let whole = m.get(0).expect("group 0");
        let n: u64 = m[1].parse().unwrap_or(u64::MAX);
        if n == 0 || n > num_docs as u64 {
            return Err(VerdictError::CitationOutOfRange(n));
        }
        let between = text[cursor..whole.start()].trim();
        if between.is_empty() {
            // continuation of the previous statement's citation run
            match statements.last_mut() {
                Some(s) => s.citations.push(n as usize),
                None => return Err(VerdictError::EmptyVerdict),
            }
        } else {
            statements.push(CiteStatement {
                text: between.to_string(),
                citations: vec![n as usize],
            });
        }
        cursor = whole.end();
    }
    let trailing = text[cursor..].trim();
    if !trailing.is_empty() {
        return Err(VerdictError::UncitedStatement(trailing.to_string()));
    }
    if statements.is_empty() {
        return Err(VerdictError::EmptyVerdict);
    }
    Ok(Verdict::CiteReason { statements })
}

pub fn render_verdict(verdict: &Verdict) -> String {
    match verdict {
        Verdict::NegativeKnowledgeAssertion { text } => text.clone(),
        Verdict::CiteReason { statements } => {
            let mut out = String::new();
            for (i, s) in statements.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                out.push_str(&s.text);
                out.push(' ');
                for c in &s.citations {
                    out.push_str(&format!("[Doc {c}]"));
                }
            }
            out
        }
    }
}

pub fn cited_docs(verdict: &Verdict) -> Result<BTreeSet<usize>, VerdictError> {
    match verdict {
        Verdict::CiteReason { statements } => Ok(statements
            .iter()
            .flat_map(|s| s.citations.iter().copied())
            .collect()),
        Verdict::NegativeKnowledgeAssertion { .. } => Err(VerdictError::NotCiteReason),
    }
}
