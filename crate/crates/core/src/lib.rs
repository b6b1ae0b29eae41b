//! Retrieval-verified medical QA: hybrid retrieval, an iterative verifier
//! loop, difficulty stratification, preference-corpus construction, DPO
//! objective math, and evaluation.

pub mod corpus;
pub mod dpo;
pub mod eval;
pub mod fixtures;
pub mod forge;
pub mod gateway;
pub mod medrank;
pub mod pipeline;
pub mod retrieval;
pub mod verdict;

pub use corpus::{BenchmarkQuestion, CorpusError, CorpusStats, Document, DocumentStore, Label, Source};
pub use dpo::{dpo_batch_loss, dpo_loss, grad_check, DpoError, DpoResult, PairLogProbs};
pub use eval::{audit_hallucinations, exact_match, run_benchmark, EvalError, EvalReport, HallucinationReport};
pub use fixtures::{generate_fixtures, FixtureBundle};
pub use forge::{Category, Forge, ForgeError, NegativeSample, PositiveSample, PreferencePair};
pub use gateway::{AgentEndpoint, Gateway, GatewayError, NliLabel, Role, ScriptedMock};
pub use medrank::{DifficultyGroup, MedrankError, Stratification};
pub use pipeline::{AnswerRecord, Outcome, Pipeline, PipelineConfig, PipelineError};
pub use retrieval::{
    bm25_rank, rrf_fuse, EvidenceSet, FusedRanking, HybridRetriever, RankedList, RetrievalError, SparseIndex,
};
pub use verdict::{parse_verdict, render_verdict, GapAnalysis, Verdict, VerdictError};
