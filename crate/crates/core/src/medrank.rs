//! Difficulty stratification by repeated self-assessment.
//!
//! Each question is answered `k` times under a decoding schedule. The
//! difficulty level is the number of incorrect rounds: zero puts it in the
//! stable group, `k` in the challenging group, anything between in medium.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{BenchmarkQuestion, Label};
use crate::gateway::{Decoding, Gateway};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MedrankError {
    #[error("k must be at least 2, got {0}")]
    TooFewRounds(usize),
    #[error("decoding schedule has {got} entries, expected {expected}")]
    ScheduleLength { expected: usize, got: usize },
    #[error("evaluation criteria must be non-empty and unique")]
    BadCriteria,
    #[error("no rounds to assess")]
    NoRounds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfAssessmentRound {
    pub round_index: usize,
    pub decoding: Decoding,
    pub predicted: Option<Label>,
    pub correct: bool,
    /// Gateway error for a failed round, which counts as incorrect.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyGroup {
    Stable,
    Medium,
    Challenging,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DifficultyLabel {
    pub l: usize,
    pub group: DifficultyGroup,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCriteria {
    pub criteria: Vec<String>,
}

impl Default for EvalCriteria {
    fn default() -> Self {
        Self {
            criteria: ["hallucination", "authenticity", "completeness", "reliability"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl EvalCriteria {
    pub fn validate(&self) -> Result<(), MedrankError> {
        let mut names: Vec<&str> = self.criteria.iter().map(String::as_str).collect();
        names.sort_unstable();
        names.dedup();
        if names.is_empty() || names.len() != self.criteria.len() || names.iter().any(|n| n.trim().is_empty()) {
            return Err(MedrankError::BadCriteria);
        }
        Ok(())
    }
}

/// Temperatures 0.2, 0.5, 0.8, 1.0 with top_p 0.9 and top_k 40, cycled to
/// `k` entries.
pub fn default_schedule(k: usize) -> Vec<Decoding> {
    const TEMPS: [f64; 4] = [0.2, 0.5, 0.8, 1.0];
    (0..k)
        .map(|i| Decoding {
            temperature: TEMPS[i % TEMPS.len()],
            top_k: 40,
            top_p: 0.9,
        })
        .collect()
}

pub fn run_self_assessment(
    question: &BenchmarkQuestion,
    gateway: &Gateway,
    k: usize,
    schedule: &[Decoding],
    criteria: &EvalCriteria,
) -> Result<Vec<SelfAssessmentRound>, MedrankError> {
    if k < 2 {
        return Err(MedrankError::TooFewRounds(k));
    }
    if schedule.len() != k {
        return Err(MedrankError::ScheduleLength {
            expected: k,
            got: schedule.len(),
        });
    }
    criteria.validate()?;
    Ok(schedule
        .iter()
        .enumerate()
        .map(|(round_index, &decoding)| {
            match gateway.call_self_assessment(question, decoding, &criteria.criteria) {
                Ok(label) => SelfAssessmentRound {
                    round_index,
                    decoding,
                    predicted: Some(label),
                    correct: label == question.gold,
                    error: None,
                },
                Err(e) => SelfAssessmentRound {
                    round_index,
                    decoding,
                    predicted: None,
                    correct: false,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect())
}

pub fn difficulty_from_correctness(correct: &[bool]) -> Result<DifficultyLabel, MedrankError> {
    if correct.is_empty() {
        return Err(MedrankError::NoRounds);
    }
    let k = correct.len();
    let l = correct.iter().filter(|c| !**c).count();
    let group = match l {
        0 => DifficultyGroup::Stable,
        l if l == k => DifficultyGroup::Challenging,
        _ => DifficultyGroup::Medium,
    };
    Ok(DifficultyLabel { l, group })
}

pub fn assess_difficulty(rounds: &[SelfAssessmentRound]) -> Result<DifficultyLabel, MedrankError> {
    let correct: Vec<bool> = rounds.iter().map(|r| r.correct).collect();
    difficulty_from_correctness(&correct)
}

/// Persisted stratification record for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedQuestion {
    pub q_id: String,
    pub rounds: Vec<SelfAssessmentRound>,
    pub l: usize,
    pub group: DifficultyGroup,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectRecord {
    pub q_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Stratification {
    pub stable: Vec<StratifiedQuestion>,
    pub medium: Vec<StratifiedQuestion>,
    pub challenging: Vec<StratifiedQuestion>,
    pub rejects: Vec<RejectRecord>,
}

impl Stratification {
    pub fn group(&self, group: DifficultyGroup) -> &[StratifiedQuestion] {
        match group {
            DifficultyGroup::Stable => &self.stable,
            DifficultyGroup::Medium => &self.medium,
            DifficultyGroup::Challenging => &self.challenging,
        }
    }

    pub fn len(&self) -> usize {
        self.stable.len() + self.medium.len() + self.challenging.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group_of(&self, q_id: &str) -> Option<DifficultyGroup> {
        [DifficultyGroup::Stable, DifficultyGroup::Medium, DifficultyGroup::Challenging]
            .into_iter()
            .find(|g| self.group(*g).iter().any(|r| r.q_id == q_id))
    }
}

/// Stratifies questions concurrently; rounds for one question stay in
/// schedule order. A question whose every round failed is quarantined.
pub fn stratify_corpus(
    questions: &[BenchmarkQuestion],
    gateway: &Gateway,
    k: usize,
    schedule: &[Decoding],
    criteria: &EvalCriteria,
    parallelism: usize,
) -> Result<Stratification, MedrankError> {
    if k < 2 {
        return Err(MedrankError::TooFewRounds(k));
    }
    if schedule.len() != k {
        return Err(MedrankError::ScheduleLength {
            expected: k,
            got: schedule.len(),
        });
    }
    criteria.validate()?;

    let run = |q: &BenchmarkQuestion| run_self_assessment(q, gateway, k, schedule, criteria);
    let results: Vec<Result<Vec<SelfAssessmentRound>, MedrankError>> = if parallelism <= 1 {
        questions.iter().map(run).collect()
    } else {
        let next = AtomicUsize::new(0);
        let slots = Mutex::new(vec![None; questions.len()]);
        std::thread::scope(|s| {
            for _ in 0..parallelism.min(questions.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(q) = questions.get(i) else { break };
                    let r = run(q);
                    slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .unwrap_or_else(|e| e.into_inner())
            .into_iter()
            .map(|r| r.expect("slot filled"))
            .collect()
    };

    let mut out = Stratification::default();
    for (q, result) in questions.iter().zip(results) {
        let rounds = result?;
        if rounds.iter().all(|r| r.error.is_some()) {
            out.rejects.push(RejectRecord {
                q_id: q.q_id.clone(),
                reason: rounds
                    .last()
                    .and_then(|r| r.error.clone())
                    .unwrap_or_else(|| "all rounds failed".into()),
            });
            continue;
        }
        let label = assess_difficulty(&rounds)?;
        let rec = StratifiedQuestion {
            q_id: q.q_id.clone(),
            rounds,
            l: label.l,
            group: label.group,
        };
        match label.group {
            DifficultyGroup::Stable => out.stable.push(rec),
            DifficultyGroup::Medium => out.medium.push(rec),
            DifficultyGroup::Challenging => out.challenging.push(rec),
        }
    }
    Ok(out)
}
