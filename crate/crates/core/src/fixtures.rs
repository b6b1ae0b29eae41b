//! Seeded synthetic corpus, benchmark, and mock script that run every stage
//! offline.
//!
//! Ten questions, each with a five-document cluster that only its own
//! question's terms retrieve. Scenario per question:
//!
//! | q   | pipeline                 | answer  | audit          | forge                         | group       |
//! |-----|--------------------------|---------|----------------|-------------------------------|-------------|
//! | q01 | validated at t=0         | correct | clean          | positive, faulty, missing     | stable      |
//! | q02 | validated at t=0         | correct | faulty         | positive, over-refusal        | stable      |
//! | q03 | validated at t=0         | correct | misattribution | positive, misattribution      | stable      |
//! | q04 | validated at t=0         | correct | clean          | none                          | medium      |
//! | q05 | validated at t=0         | wrong   | missing answer | none                          | stable      |
//! | q06 | validated at t=2         | correct | clean          | none                          | stable      |
//! | q07 | validated at t=2         | correct | clean          | none                          | challenging |
//! | q08 | fallback                 | correct | clean          | none                          | stable      |
//! | q09 | fallback                 | wrong   | over-refusal   | none                          | medium      |
//! | q10 | transport failure        | wrong   | unauditable    | refusal positive              | challenging |

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_jsonl, BenchmarkQuestion, CorpusError, Document, DocumentStore, Label, Source};
use crate::forge::{answer_hypothesis, cosine, rank_distractors, Category, PositiveKind, DOCSET_SIZE};
use crate::gateway::{keys, Gateway, Role, ScriptEntry, ScriptedMock, MOCK_TRANSPORT_ERROR, MOCK_WILDCARD, PREMISE_SEPARATOR};
use crate::medrank::DifficultyGroup;
use crate::pipeline::Outcome;
use crate::retrieval::{bm25_rank, HybridRetriever, RetrievalError, SparseIndex};
use crate::verdict::{parse_verdict, render_verdict, NKA_SENTENCE};

pub const DENSE_MODEL: &str = "mock-dense";
pub const BENCHMARK_FILE: &str = "benchmark.jsonl";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const SCRIPT_FILE: &str = "mock_script.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const QUESTIONS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpectedAnswer {
    pub outcome: Option<Outcome>,
    pub rounds_used: usize,
    pub correct: bool,
}

/// Values derived by hand from the scripts, for end-to-end comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub n: usize,
    pub correct: usize,
    pub answers: BTreeMap<String, ExpectedAnswer>,
    pub audit: BTreeMap<String, Vec<Category>>,
    pub unauditable: Vec<String>,
    pub groups: BTreeMap<String, DifficultyGroup>,
    pub negatives: BTreeSet<(String, Category)>,
    pub positives: BTreeSet<(String, PositiveKind)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureBundle {
    pub seed: u64,
    pub documents: Vec<Document>,
    pub questions: Vec<BenchmarkQuestion>,
    pub script: Vec<ScriptEntry>,
    pub dense_models: Vec<String>,
    pub snapshot: Snapshot,
}

const SYLLABLES: [&str; 20] = [
    "ka", "zo", "ri", "mu", "te", "vo", "lan", "qui", "sel", "dar", "pho", "nex", "bri", "tu", "gor", "fe", "xi", "ul",
    "ry", "wen",
];

struct Words {
    rng: ChaCha8Rng,
    used: BTreeSet<String>,
}

impl Words {
    fn next(&mut self) -> String {
        loop {
            let w: String = (0..3).map(|_| SYLLABLES[self.rng.random_range(0..SYLLABLES.len())]).collect();
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

fn label_reply(label: Label) -> String {
    format!("The answer is {label}.")
}

fn wrong(gold: Label) -> Label {
    Label::ALL[(Label::ALL.iter().position(|l| *l == gold).unwrap_or(0) + 1) % 4]
}

fn refusal_with_gap(gaps: &[&str]) -> String {
    format!("{NKA_SENTENCE}\nGap Analysis: {}", gaps.join("; "))
}

fn q_id(i: usize) -> String {
    format!("q{:02}", i + 1)
}

struct Script(Vec<ScriptEntry>);

impl Script {
    fn add(&mut self, role: Role, fp: impl Into<String>, responses: &[String]) {
        self.0.push(ScriptEntry::new(role, fp, responses.to_vec()));
    }
}

pub fn generate_fixtures(seed: u64) -> FixtureBundle {
    let mut words = Words {
        rng: ChaCha8Rng::seed_from_u64(seed),
        used: BTreeSet::new(),
    };
    let mut documents = Vec::new();
    let mut questions = Vec::new();
    let mut clusters: Vec<Vec<Document>> = Vec::new();

    for c in 0..QUESTIONS {
        let key: Vec<String> = (0..3).map(|_| words.next()).collect();
        let mut cluster = Vec::new();
        for j in 0..DOCSET_SIZE {
            let filler: Vec<String> = (0..4).map(|_| words.next()).collect();
            // decreasing key-term frequency gives a strict BM25 order
            let lead = vec![key[0].as_str(); DOCSET_SIZE - j].join(" ");
            cluster.push(Document {
                doc_id: format!("doc-{:02}-{}", c + 1, j + 1),
                title: format!("{} {}", key[1], filler[0]),
                text: format!("{lead} {} {} {} {}.", key[2], filler[1], filler[2], filler[3]),
                source: if j % 2 == 0 { Source::Pubmed } else { Source::Textbook },
            });
        }
        let gold = Label::ALL[words.rng.random_range(0..4)];
        let options = Label::ALL.iter().map(|l| (*l, format!("{} regimen", words.next()))).collect();
        questions.push(BenchmarkQuestion {
            q_id: q_id(c),
            question: format!("Which option best fits {} {} with {}?", key[0], key[1], key[2]),
            options,
            gold,
        });
        documents.extend(cluster.iter().cloned());
        clusters.push(cluster);
    }

    let index = SparseIndex::from_documents(&documents).expect("fixture corpus is non-empty");
    // Shown order: BM25 order of the question, which the identical dense list
    // and every augmented query preserve.
    let shown: Vec<Vec<Document>> = questions
        .iter()
        .zip(&clusters)
        .map(|(q, cluster)| {
            bm25_rank(&index, &q.question, DOCSET_SIZE)
                .doc_ids()
                .map(|id| cluster.iter().find(|d| &d.doc_id == id).expect("cluster doc").clone())
                .collect()
        })
        .collect();
    let ids = |docs: &[Document]| docs.iter().map(|d| d.doc_id.clone()).collect::<Vec<_>>();
    let joined = |docs: &[Document]| docs.iter().map(|d| d.text.as_str()).collect::<Vec<_>>().join(PREMISE_SEPARATOR);

    let mut s = Script(Vec::new());
    let one = |x: &str| vec![x.to_string()];
    s.add(Role::Nli, MOCK_WILDCARD, &one("entail"));
    s.add(Role::PrimaryDrafter, MOCK_WILDCARD, &one(NKA_SENTENCE));
    s.add(Role::AltDrafter, MOCK_WILDCARD, &one(NKA_SENTENCE));
    s.add(Role::DenseSearch, MOCK_WILDCARD, &one("[]"));

    // Embeddings: each cluster on its own direction in the plane, neighbours
    // 0.1 rad apart, so every cluster's distractors are its neighbours.
    for (c, cluster) in clusters.iter().enumerate() {
        for (j, d) in cluster.iter().enumerate() {
            let a = c as f64 * 0.1 + j as f64 * 0.01;
            s.add(Role::Embedder, keys::embed(&d.text), &one(&format!("[{:.6}, {:.6}]", a.cos(), a.sin())));
        }
    }
    let embed = |d: &Document| {
        let (c, j) = clusters
            .iter()
            .enumerate()
            .find_map(|(c, cl)| cl.iter().position(|x| x.doc_id == d.doc_id).map(|j| (c, j)))
            .expect("fixture doc");
        let a = c as f64 * 0.1 + j as f64 * 0.01;
        vec![format!("{:.6}", a.cos()).parse::<f64>().unwrap(), format!("{:.6}", a.sin()).parse::<f64>().unwrap()]
    };

    let mut answers = BTreeMap::new();
    let mut audit: BTreeMap<String, Vec<Category>> = BTreeMap::new();
    let mut negatives = BTreeSet::new();
    let mut positives = BTreeSet::new();
    let groups_plan = [
        DifficultyGroup::Stable,
        DifficultyGroup::Stable,
        DifficultyGroup::Stable,
        DifficultyGroup::Medium,
        DifficultyGroup::Stable,
        DifficultyGroup::Stable,
        DifficultyGroup::Challenging,
        DifficultyGroup::Stable,
        DifficultyGroup::Medium,
        DifficultyGroup::Challenging,
    ];
    let mut groups = BTreeMap::new();

    for (i, q) in questions.iter().enumerate() {
        let id = q_id(i);
        let gold = q.gold;
        let docs = &shown[i];
        let dense: Vec<(String, f64)> = docs
            .iter()
            .enumerate()
            .map(|(r, d)| (d.doc_id.clone(), 0.9 - r as f64 * 0.1))
            .collect();
        s.add(
            Role::DenseSearch,
            keys::dense(DENSE_MODEL, &q.question),
            &one(&serde_json::to_string(&dense).expect("json")),
        );

        // self-assessment: wrong answers on the first l rounds
        let l = match groups_plan[i] {
            DifficultyGroup::Stable => 0,
            DifficultyGroup::Medium => 2,
            DifficultyGroup::Challenging => 4,
        };
        let rounds: Vec<String> = (0..4).map(|r| label_reply(if r < l { wrong(gold) } else { gold })).collect();
        s.add(Role::SelfAssessor, keys::self_assess(&q.question), &rounds);
        groups.insert(id.clone(), groups_plan[i]);

        let statement = format!("Cluster {} evidence favours {}", i + 1, q.option_text(gold));
        let cite = parse_verdict(&format!("{statement} [Doc 1]"), DOCSET_SIZE).expect("fixture verdict");
        let gaps = [words.next(), words.next(), words.next()];
        let gap_a = refusal_with_gap(&[&gaps[0], &gaps[1]]);
        let gap_b = refusal_with_gap(&[&gaps[2]]);

        let (verifier, outcome, rounds_used, predicted): (Vec<String>, Option<Outcome>, usize, Option<Label>) = match i {
            0..=4 => {
                let p = if i == 4 { wrong(gold) } else { gold };
                (vec![render_verdict(&cite)], Some(Outcome::Validated), 1, Some(p))
            }
            5 | 6 => (
                vec![gap_a.clone(), gap_b.clone(), render_verdict(&cite)],
                Some(Outcome::Validated),
                3,
                Some(gold),
            ),
            7 | 8 => {
                let p = if i == 8 { wrong(gold) } else { gold };
                (vec![gap_a.clone(), gap_b.clone(), gap_a.clone()], Some(Outcome::Fallback), 3, Some(p))
            }
            _ => (vec![format!("{MOCK_TRANSPORT_ERROR} fixture outage")], None, 1, None),
        };
        s.add(Role::Verifier, keys::verify(&q.question), &verifier);
        match outcome {
            Some(Outcome::Validated) => {
                s.add(Role::Generator, keys::generate(&q.question, Some(&cite)), &one(&label_reply(predicted.unwrap())));
            }
            Some(Outcome::Fallback) => {
                s.add(Role::Generator, keys::generate(&q.question, None), &one(&label_reply(predicted.unwrap())));
            }
            None => {}
        }
        answers.insert(
            id.clone(),
            ExpectedAnswer {
                outcome,
                rounds_used,
                correct: predicted == Some(gold),
            },
        );

        // audit plants
        let mut planted = Vec::new();
        match i {
            1 => {
                for d in docs {
                    s.add(Role::Nli, keys::nli(&d.text, &statement), &one("not_entail"));
                }
                planted.push(Category::FaultyReasoning);
            }
            2 => {
                s.add(Role::Nli, keys::nli(&docs[0].text, &statement), &one("not_entail"));
                planted.push(Category::Misattribution);
            }
            4 => planted.push(Category::MissingAnswer),
            7 => {
                s.add(Role::Nli, keys::nli(&joined(docs), &answer_hypothesis(q)), &one("not_entail"));
            }
            8 => planted.push(Category::OverRefusal),
            _ => {}
        }
        if outcome.is_some() {
            audit.insert(id.clone(), planted);
        }

        // forge scenarios; ψ(q) is the correct answer for every stable question
        let docset = ids(docs);
        let draft = |text: &str| format!("{text} [Doc 1]");
        let psi_plain = || keys::generate(&q.question, None);
        match i {
            0 => {
                let p = format!("Primary drafting for cluster {} supports the answer", i + 1);
                let a = format!("Alternative drafting for cluster {} contradicts its sources", i + 1);
                s.add(Role::PrimaryDrafter, keys::draft(&q.question, &docset), &one(&draft(&p)));
                s.add(Role::AltDrafter, keys::draft(&q.question, &docset), &one(&draft(&a)));
                let pv = parse_verdict(&draft(&p), DOCSET_SIZE).expect("draft");
                let av = parse_verdict(&draft(&a), DOCSET_SIZE).expect("draft");
                s.add(Role::Generator, keys::generate(&q.question, Some(&pv)), &one(&label_reply(gold)));
                s.add(Role::Generator, keys::generate(&q.question, Some(&av)), &one(&label_reply(wrong(gold))));
                s.add(Role::Generator, psi_plain(), &one(&label_reply(gold)));
                s.add(Role::Nli, keys::nli(&joined(docs), &a), &one("not_entail"));
                positives.insert((id.clone(), PositiveKind::Reasoning));
                negatives.insert((id.clone(), Category::FaultyReasoning));
                negatives.insert((id.clone(), Category::MissingAnswer));
            }
            1 => {
                let p = format!("Primary drafting for cluster {} is fully supported", i + 1);
                s.add(Role::PrimaryDrafter, keys::draft(&q.question, &docset), &one(&draft(&p)));
                let pv = parse_verdict(&draft(&p), DOCSET_SIZE).expect("draft");
                s.add(Role::Generator, keys::generate(&q.question, Some(&pv)), &one(&label_reply(gold)));
                s.add(Role::Generator, psi_plain(), &one(&label_reply(gold)));
                positives.insert((id.clone(), PositiveKind::Reasoning));
                negatives.insert((id.clone(), Category::OverRefusal));
            }
            2 => {
                let p = format!("Primary drafting for cluster {} relies on its own sources", i + 1);
                s.add(Role::PrimaryDrafter, keys::draft(&q.question, &docset), &one(&draft(&p)));
                s.add(Role::AltDrafter, keys::draft(&q.question, &docset), &one(&draft(&p)));
                let pv = parse_verdict(&draft(&p), DOCSET_SIZE).expect("draft");
                s.add(Role::Generator, keys::generate(&q.question, Some(&pv)), &one(&label_reply(gold)));
                s.add(Role::Generator, psi_plain(), &one(&label_reply(gold)));
                let src: Vec<Vec<f64>> = docs.iter().map(embed).collect();
                let pool: Vec<(String, Vec<f64>)> = documents
                    .iter()
                    .filter(|d| !docset.contains(&d.doc_id))
                    .map(|d| (d.doc_id.clone(), embed(d)))
                    .collect();
                let distractor_ids = rank_distractors(&src, &pool, DOCSET_SIZE);
                let distractors: Vec<Document> = distractor_ids
                    .iter()
                    .map(|id| documents.iter().find(|d| &d.doc_id == id).expect("doc").clone())
                    .collect();
                debug_assert!(distractors.iter().all(|d| src.iter().any(|e| cosine(e, &embed(d)) > 0.8)));
                s.add(Role::Nli, keys::nli(&joined(&distractors), &p), &one("not_entail"));
                positives.insert((id.clone(), PositiveKind::Reasoning));
                negatives.insert((id.clone(), Category::Misattribution));
            }
            9 => {
                for d in docs {
                    s.add(Role::Nli, keys::nli(&d.text, &answer_hypothesis(q)), &one("not_entail"));
                }
                positives.insert((id.clone(), PositiveKind::Refusal));
            }
            _ => {}
        }
    }

    let correct = answers.values().filter(|a| a.correct).count();
    let snapshot = Snapshot {
        n: questions.len(),
        correct,
        answers,
        audit,
        unauditable: vec![q_id(9)],
        groups,
        negatives,
        positives,
    };
    FixtureBundle {
        seed,
        documents,
        questions,
        script: s.0,
        dense_models: vec![DENSE_MODEL.to_string()],
        snapshot,
    }
}

/// In-memory store, retriever, and gateway over the bundle's mock.
pub struct FixtureSession {
    pub store: Arc<DocumentStore>,
    pub index: Arc<SparseIndex>,
    pub retriever: Arc<HybridRetriever>,
    pub gateway: Arc<Gateway>,
}

impl FixtureBundle {
    pub fn mock(&self) -> ScriptedMock {
        ScriptedMock::from_entries(self.script.iter().cloned())
    }

    pub fn session(&self) -> Result<FixtureSession, RetrievalError> {
        let store = Arc::new(DocumentStore::from_documents(self.documents.clone())?);
        let index = Arc::new(SparseIndex::build(&store)?);
        let models: Vec<&str> = self.dense_models.iter().map(String::as_str).collect();
        let gateway = Arc::new(Gateway::mocked(self.mock(), &models));
        let mut retriever = HybridRetriever::new(Arc::clone(&store), Arc::clone(&index));
        for d in gateway.dense_retrievers() {
            retriever = retriever.with_dense(d);
        }
        Ok(FixtureSession {
            store,
            index,
            retriever: Arc::new(retriever),
            gateway,
        })
    }

    /// Writes corpus, benchmark, mock script, and snapshot into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<(), CorpusError> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(CORPUS_FILE), &self.documents)?;
        write_jsonl(&dir.join(BENCHMARK_FILE), &self.questions)?;
        write_jsonl(&dir.join(SCRIPT_FILE), &self.script)?;
        let snap = serde_json::to_string_pretty(&self.snapshot).map_err(std::io::Error::other)?;
        std::fs::write(dir.join(SNAPSHOT_FILE), snap + "\n")?;
        Ok(())
    }
}

/// Doc ids named by dense-search responses.
pub fn referenced_doc_ids(bundle: &FixtureBundle) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for e in bundle.script.iter().filter(|e| e.role == Role::DenseSearch) {
        for r in &e.responses {
            if let Ok(hits) = serde_json::from_str::<Vec<(String, f64)>>(r) {
                out.extend(hits.into_iter().map(|(id, _)| id));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_benchmark, parse_corpus_file};

    #[test]
    fn deterministic_by_seed() {
        assert_eq!(generate_fixtures(42), generate_fixtures(42));
        assert_ne!(generate_fixtures(42).documents, generate_fixtures(43).documents);
    }

    #[test]
    fn self_consistent() {
        let b = generate_fixtures(42);
        assert_eq!(b.documents.len(), 50);
        assert_eq!(b.questions.len(), 10);
        let ids: BTreeSet<String> = b.documents.iter().map(|d| d.doc_id.clone()).collect();
        assert!(referenced_doc_ids(&b).is_subset(&ids));
        assert_eq!(b.snapshot.correct, 7);
    }

    #[test]
    fn writes_loadable_files() {
        let b = generate_fixtures(7);
        let dir = tempfile::tempdir().unwrap();
        b.write_to(dir.path()).unwrap();
        assert_eq!(parse_corpus_file(&dir.path().join(CORPUS_FILE)).unwrap(), b.documents);
        assert_eq!(load_benchmark(&dir.path().join(BENCHMARK_FILE)).unwrap(), b.questions);
        assert!(ScriptedMock::load(&dir.path().join(SCRIPT_FILE)).is_ok());
    }
}
