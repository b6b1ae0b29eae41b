//! One line per acceptance criterion: `PASS|FAIL <name>: <detail>`.
//! Every expected value comes from an oracle written here, not from the
//! library under test.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use medtrust_core::corpus::{BenchmarkQuestion, Document, DocumentStore, Label, Source};
use medtrust_core::dpo::{dpo_loss, grad_check, PairLogProbs};
use medtrust_core::eval::{audit_hallucinations, run_benchmark, write_report};
use medtrust_core::fixtures::generate_fixtures;
use medtrust_core::forge::{answer_hypothesis, Category, Forge};
use medtrust_core::gateway::{keys, Gateway, Role, ScriptedMock, MOCK_WILDCARD, PREMISE_SEPARATOR};
use medtrust_core::medrank::{default_schedule, stratify_corpus, DifficultyGroup, EvalCriteria};
use medtrust_core::pipeline::{Outcome, Pipeline, PipelineConfig, RoundVerdict, TraceLine};
use medtrust_core::retrieval::{bm25_rank, rrf_fuse, EvidenceSet, HybridRetriever, RankedList, SparseIndex};
use medtrust_core::verdict::{parse_verdict, render_verdict, CiteStatement, Verdict, NKA_SENTENCE};
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- RRF

fn oracle_rrf(lists: &[Vec<String>], k: f64) -> Vec<(String, f64)> {
    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    for list in lists {
        for (i, d) in list.iter().enumerate() {
            *scores.entry(d.clone()).or_insert(0.0) += 1.0 / (k + (i + 1) as f64);
        }
    }
    let mut out: Vec<(String, f64)> = scores.into_iter().collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    out
}

fn rrf_criterion() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ties = 0;
    for inst in 0..200 {
        let pool: Vec<String> = (0..rng.random_range(1..40)).map(|i| format!("doc{i:02}")).collect();
        let n_lists = rng.random_range(1..5);
        let k = [1.0, 60.0, rng.random_range(0.5..200.0)][inst % 3];
        let lists: Vec<Vec<String>> = (0..n_lists)
            .map(|_| {
                let mut p = pool.clone();
                p.shuffle(&mut rng);
                p.truncate(rng.random_range(0..=pool.len()));
                p
            })
            .collect();
        let ranked: Vec<RankedList> = lists
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let entries = l.iter().enumerate().map(|(r, d)| (d.clone(), -(r as f64))).collect();
                RankedList::new(format!("r{i}"), entries).unwrap()
            })
            .collect();
        let got = rrf_fuse(&ranked, k).map_err(|e| e.to_string())?;
        let want = oracle_rrf(&lists, k);
        ensure(got.entries.len() == want.len(), || format!("instance {inst}: length differs"))?;
        for (g, w) in got.entries.iter().zip(&want) {
            ensure(g.0 == w.0, || format!("instance {inst}: order {} vs {}", g.0, w.0))?;
            ensure((g.1 - w.1).abs() < 1e-12, || format!("instance {inst}: score diff {}", (g.1 - w.1).abs()))?;
        }
        ties += want.windows(2).filter(|w| w[0].1 == w[1].1).count();
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(ties > 0, || "no tied scores exercised".into())?;
    ensure(secs < 5.0, || format!("runtime {secs:.3}s"))?;
    Ok(format!("200 instances, {ties} exact ties, {secs:.3}s < 5s, tol 1e-12"))
}

// ---------------------------------------------------------------- BM25

fn oracle_tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

fn oracle_bm25(docs: &[(String, String)], query: &str) -> Vec<(String, f64)> {
    let (k1, b) = (1.2, 0.75);
    let toks: Vec<Vec<String>> = docs.iter().map(|(_, t)| oracle_tokens(t)).collect();
    let n = docs.len() as f64;
    let avg = toks.iter().map(|t| t.len()).sum::<usize>() as f64 / n;
    let q: BTreeSet<String> = oracle_tokens(query).into_iter().collect();
    let mut out = Vec::new();
    for (i, (id, _)) in docs.iter().enumerate() {
        let mut s = 0.0;
        for term in &q {
            let df = toks.iter().filter(|t| t.contains(term)).count() as f64;
            if df == 0.0 {
                continue;
            }
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            let tf = toks[i].iter().filter(|t| *t == term).count() as f64;
            s += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * toks[i].len() as f64 / avg));
        }
        if s > 0.0 {
            out.push((id.clone(), s));
        }
    }
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    out
}

fn doc(id: &str, title: &str, text: &str) -> Document {
    Document {
        doc_id: id.into(),
        title: title.into(),
        text: text.into(),
        source: Source::Other,
    }
}

fn bm25_criterion() -> Check {
    let toy = vec![
        doc("d1", "", "heart attack symptoms"),
        doc("d2", "", "heart failure"),
        doc("d3", "", "renal failure causes"),
    ];
    let idx = SparseIndex::from_documents(&toy).unwrap();
    let got = bm25_rank(&idx, "heart", 10);
    let d1 = got.entries.iter().find(|e| e.0 == "d1").map(|e| e.1).unwrap_or(f64::NAN);
    ensure((d1 - 0.4471).abs() < 1e-4, || format!("worked example d1 = {d1}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vocab = ["heart", "renal", "failure", "acute", "Chronic", "dose", "ECG", "beta", "a1c", "x"];
    let mut checked = 0;
    for inst in 0..200 {
        let n = rng.random_range(1..=20);
        let docs: Vec<(String, String, String)> = (0..n)
            .map(|i| {
                let (nt, nx) = (rng.random_range(0..3), rng.random_range(1..12));
                let mut words = |m: usize| {
                    let sep = [" ", "-", ", "][rng.random_range(0..3)];
                    (0..m).map(|_| vocab[rng.random_range(0..vocab.len())]).collect::<Vec<_>>().join(sep)
                };
                let title = words(nt);
                let text = words(nx);
                (format!("d{i:02}"), title, text)
            })
            .collect();
        let lib_docs: Vec<Document> = docs.iter().map(|(i, t, x)| doc(i, t, x)).collect();
        let oracle_docs: Vec<(String, String)> = docs.iter().map(|(i, t, x)| (i.clone(), format!("{t} {x}"))).collect();
        let idx = SparseIndex::from_documents(&lib_docs).unwrap();
        for _ in 0..5 {
            let q: Vec<&str> = (0..rng.random_range(1..4)).map(|_| vocab[rng.random_range(0..vocab.len())]).collect();
            let q = q.join(" ");
            let got = bm25_rank(&idx, &q, 100);
            let want = oracle_bm25(&oracle_docs, &q);
            ensure(got.entries.len() == want.len(), || format!("corpus {inst} query {q:?}: length"))?;
            for (g, w) in got.entries.iter().zip(&want) {
                ensure(g.0 == w.0 && (g.1 - w.1).abs() < 1e-9, || format!("corpus {inst} query {q:?}: {g:?} vs {w:?}"))?;
            }
            checked += 1;
        }
    }
    Ok(format!("worked example d1={d1:.6} (tol 1e-4); {checked} random queries within 1e-9"))
}

// ---------------------------------------------------------------- verdicts

fn random_statement(rng: &mut ChaCha8Rng) -> String {
    const WORDS: [&str; 12] = [
        "aspirin", "inhibits", "COX-1", "and", "reduces", "risk;", "dose:", "5mg", "(daily)", "in", "adults.", "Doc",
    ];
    (0..rng.random_range(1..8))
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

fn verdict_criterion() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..1000 {
        let n = rng.random_range(1..12);
        let v = if i % 10 == 0 {
            Verdict::nka()
        } else {
            Verdict::CiteReason {
                statements: (0..rng.random_range(1..5))
                    .map(|_| CiteStatement {
                        text: random_statement(&mut rng),
                        citations: (0..rng.random_range(1..4)).map(|_| rng.random_range(1..=n)).collect(),
                    })
                    .collect(),
            }
        };
        let text = render_verdict(&v);
        let back = parse_verdict(&text, n).map_err(|e| format!("round-trip {i}: {e} on {text:?}"))?;
        ensure(back == v, || format!("round-trip {i}: {text:?}"))?;
    }
    let alphabet: Vec<char> = "[]Doc 0123456789abcxyz.\n\tÉ🙂Insufficient evidence".chars().collect();
    let (mut typed_errors, mut accepted) = (0, 0);
    for i in 0..10_000 {
        let s: String = if i % 3 == 2 {
            // near-valid: a rendered verdict with a random edit
            let v = Verdict::CiteReason {
                statements: vec![CiteStatement { text: random_statement(&mut rng), citations: vec![rng.random_range(1..9)] }],
            };
            let mut chars: Vec<char> = render_verdict(&v).chars().collect();
            let at = rng.random_range(0..=chars.len());
            match rng.random_range(0..3) {
                0 if at < chars.len() => {
                    chars.remove(at);
                }
                _ => chars.insert(at, alphabet[rng.random_range(0..alphabet.len())]),
            }
            chars.into_iter().collect()
        } else if i % 3 == 0 {
            (0..rng.random_range(0..60)).map(|_| alphabet[rng.random_range(0..alphabet.len())]).collect()
        } else {
            (0..rng.random_range(0..40)).map(|_| char::from_u32(rng.random_range(0..0x3000)).unwrap_or('?')).collect()
        };
        let n = rng.random_range(0..8);
        let r = catch_unwind(|| parse_verdict(&s, n)).map_err(|_| format!("parse panicked on {s:?}"))?;
        match r {
            Ok(v) => {
                ensure(v.validate(n).is_ok(), || format!("invalid verdict from {s:?}"))?;
                accepted += 1;
            }
            Err(_) => typed_errors += 1,
        }
    }
    Ok(format!("1000 round-trips identical; 10000 fuzz strings: {accepted} valid, {typed_errors} typed errors, no panics"))
}

// ---------------------------------------------------------------- pipeline

#[derive(Clone, Copy, Debug)]
enum Step {
    Cite,
    Refuse,
    Garbage,
}

fn pipeline_store() -> (Arc<DocumentStore>, Arc<HybridRetriever>) {
    let docs: Vec<Document> = (0..12)
        .map(|i| doc(&format!("p{i:02}"), "", &format!("alpha beta note{i} {}", "gamma ".repeat(i % 4))))
        .collect();
    let store = Arc::new(DocumentStore::from_documents(docs).unwrap());
    let index = Arc::new(SparseIndex::build(&store).unwrap());
    (store.clone(), Arc::new(HybridRetriever::new(store, index)))
}

fn question(i: usize) -> BenchmarkQuestion {
    BenchmarkQuestion {
        q_id: format!("q{i}"),
        question: format!("alpha gamma question {i}?"),
        options: Label::ALL.iter().map(|l| (*l, format!("option {l}"))).collect(),
        gold: Label::B,
    }
}

fn pipeline_criterion() -> Check {
    let (_store, retriever) = pipeline_store();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut shapes: BTreeMap<String, usize> = BTreeMap::new();
    for i in 0..150 {
        let q = question(i);
        let steps: Vec<Step> =
            (0..3).map(|_| [Step::Cite, Step::Refuse, Step::Garbage][rng.random_range(0..3)]).collect();
        let cite = parse_verdict(&format!("claim {i} [Doc 1]"), 5).unwrap();
        let gaps: Vec<String> = (0..3).map(|r| format!("gapterm{i}x{r}")).collect();
        let replies: Vec<String> = steps
            .iter()
            .enumerate()
            .map(|(r, s)| match s {
                Step::Cite => render_verdict(&cite),
                Step::Refuse => format!("{NKA_SENTENCE}\nGap Analysis: {}; extra{i}", gaps[r]),
                Step::Garbage => "no citations at all".to_string(),
            })
            .collect();
        let r: Vec<&str> = replies.iter().map(String::as_str).collect();
        for (mode, cfg) in [
            ("full", PipelineConfig::default()),
            ("no_iteration", PipelineConfig { enable_iteration: false, ..PipelineConfig::default() }),
            ("no_mtam", PipelineConfig { enable_mtam_verifier: false, ..PipelineConfig::default() }),
        ] {
            let mut m = ScriptedMock::new();
            m.script(Role::Verifier, keys::verify(&q.question), &r);
            m.script(Role::BaseVerifier, keys::verify(&q.question), &r);
            m.script(Role::Generator, keys::generate(&q.question, Some(&cite)), &["The answer is B."]);
            m.script(Role::Generator, keys::generate(&q.question, None), &["The answer is C."]);
            let gw = Arc::new(Gateway::mocked(m, &[]));
            let p = Pipeline::new(retriever.clone(), gw.clone());
            let rec = p.answer_question(&q, &cfg).map_err(|f| format!("q{i} {mode}: {}", f.error))?;
            let t_max = if mode == "no_iteration" { 1 } else { 3 };
            // oracle: first citation round within the allowed rounds validates
            let first_cite = steps[..t_max].iter().position(|s| matches!(s, Step::Cite));
            let (want_outcome, want_rounds) = match first_cite {
                Some(idx) => (Outcome::Validated, idx + 1),
                None => (Outcome::Fallback, t_max),
            };
            ensure(rec.trace.rounds.len() <= 3, || format!("q{i} {mode}: >3 rounds"))?;
            ensure(rec.trace.outcome == want_outcome && rec.trace.rounds.len() == want_rounds, || {
                format!("q{i} {mode} {steps:?}: got {:?}/{}", rec.trace.outcome, rec.trace.rounds.len())
            })?;
            let gen_calls: Vec<_> = gw.calls().into_iter().filter(|c| c.role == Role::Generator).collect();
            ensure(gen_calls.len() == 1, || format!("q{i} {mode}: {} generator calls", gen_calls.len()))?;
            let want_fp = match want_outcome {
                Outcome::Validated => keys::generate(&q.question, Some(&cite)),
                Outcome::Fallback => keys::generate(&q.question, None),
            };
            ensure(gen_calls[0].fingerprint == want_fp, || format!("q{i} {mode}: generator input"))?;
            let want_role = if mode == "no_mtam" { Role::BaseVerifier } else { Role::Verifier };
            ensure(rec.trace.rounds.iter().all(|r| r.verifier_role == want_role), || format!("q{i} {mode}: role"))?;
            ensure(gw.call_count(if mode == "no_mtam" { Role::Verifier } else { Role::BaseVerifier }) == 0, || {
                format!("q{i} {mode}: wrong verifier called")
            })?;
            if rec.trace.rounds.len() >= 2 {
                let r0 = &rec.trace.rounds[0];
                if r0.verdict_kind == RoundVerdict::NegativeKnowledgeAssertion {
                    ensure(r0.gap_terms.iter().all(|g| rec.trace.rounds[1].query.contains(g.as_str())), || {
                        format!("q{i} {mode}: round-2 query lacks gap terms")
                    })?;
                }
            }
            *shapes.entry(format!("{mode}:{want_outcome:?}")).or_default() += 1;
        }
    }
    ensure(shapes.len() == 6, || format!("not every trace shape exercised: {shapes:?}"))?;
    Ok(format!("150 scripted sessions x 3 modes; shapes {shapes:?}"))
}

// ---------------------------------------------------------------- stratification

fn stratification_criterion() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut detail = Vec::new();
    for k in [2usize, 3, 4, 6] {
        let qs: Vec<BenchmarkQuestion> = (0..60).map(question).collect();
        let mut mock = ScriptedMock::new();
        let mut expect: BTreeMap<String, Option<DifficultyGroup>> = BTreeMap::new();
        for (i, q) in qs.iter().enumerate() {
            // first questions pin the boundaries: all right, all wrong, all failed
            let outcomes: Vec<u8> = match i {
                0 => vec![0; k],
                1 => vec![1; k],
                2 => vec![2; k],
                _ => (0..k).map(|_| rng.random_range(0..3)).collect(),
            };
            let replies: Vec<&str> =
                outcomes.iter().map(|o| ["The answer is B.", "The answer is D.", "!timeout"][*o as usize]).collect();
            mock.script(Role::SelfAssessor, keys::self_assess(&q.question), &replies);
            let l = outcomes.iter().filter(|o| **o != 0).count();
            let group = if outcomes.iter().all(|o| *o == 2) {
                None
            } else if l == 0 {
                Some(DifficultyGroup::Stable)
            } else if l == k {
                Some(DifficultyGroup::Challenging)
            } else {
                Some(DifficultyGroup::Medium)
            };
            expect.insert(q.q_id.clone(), group);
        }
        let gw = Gateway::mocked(mock, &[]);
        let s = stratify_corpus(&qs, &gw, k, &default_schedule(k), &EvalCriteria::default(), 4)
            .map_err(|e| e.to_string())?;
        let mut seen: BTreeMap<String, Option<DifficultyGroup>> = BTreeMap::new();
        for (g, members) in [
            (DifficultyGroup::Stable, &s.stable),
            (DifficultyGroup::Medium, &s.medium),
            (DifficultyGroup::Challenging, &s.challenging),
        ] {
            for m in members {
                ensure(seen.insert(m.q_id.clone(), Some(g)).is_none(), || format!("k={k}: {} twice", m.q_id))?;
            }
        }
        for r in &s.rejects {
            ensure(seen.insert(r.q_id.clone(), None).is_none(), || format!("k={k}: {} twice", r.q_id))?;
        }
        ensure(seen == expect, || format!("k={k}: partition differs from oracle"))?;
        ensure(expect["q0"] == Some(DifficultyGroup::Stable) && expect["q1"] == Some(DifficultyGroup::Challenging), || {
            "boundary".into()
        })?;
        detail.push(format!(
            "k={k}: {}/{}/{} + {} quarantined",
            s.stable.len(),
            s.medium.len(),
            s.challenging.len(),
            s.rejects.len()
        ));
    }
    Ok(format!("disjoint cover matches oracle; l=0 stable, l=k challenging; {}", detail.join(", ")))
}

// ---------------------------------------------------------------- constructors

#[derive(Clone, Copy, PartialEq, Debug)]
enum DraftKind {
    Cite,
    Refuse,
    Garbage,
}

fn nli_str(entail: bool) -> &'static str {
    if entail {
        "entail"
    } else {
        "not_entail"
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn constructor_criterion() -> Check {
    const DELTA: f64 = 0.8;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let n_q = 50;
    let per_q = 10;
    let labels = Label::ALL;

    // corpus: per question 10 candidates; half the questions sit on a shared
    // centre (close distractors), the rest are scattered (distant distractors)
    const DIM: usize = 32;
    let centres: Vec<Vec<f64>> = (0..3).map(|_| (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut docs = Vec::new();
    let mut emb: HashMap<String, Vec<f64>> = HashMap::new();
    for q in 0..n_q {
        let clustered = q % 2 == 0;
        let c = centres[rng.random_range(0..centres.len())].clone();
        for j in 0..per_q {
            let id = format!("u{q:02}-{j}");
            let v: Vec<f64> = if clustered {
                c.iter().map(|x| x + rng.random_range(-0.1..0.1)).collect()
            } else {
                (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect()
            };
            emb.insert(id.clone(), v);
            docs.push(doc(&id, "", &format!("universe text {id}")));
        }
    }
    let store = DocumentStore::from_documents(docs.clone()).unwrap();
    let text_of: HashMap<String, String> = docs.iter().map(|d| (d.doc_id.clone(), d.text.clone())).collect();
    let joined = |ids: &[String]| ids.iter().map(|i| text_of[i].as_str()).collect::<Vec<_>>().join(PREMISE_SEPARATOR);

    let mut mock = ScriptedMock::new();
    mock.script(Role::Nli, MOCK_WILDCARD, &["!transport unscripted nli"]);
    mock.script(Role::Generator, MOCK_WILDCARD, &["!transport unscripted generator"]);
    mock.script(Role::PrimaryDrafter, MOCK_WILDCARD, &["!transport unscripted draft"]);
    mock.script(Role::AltDrafter, MOCK_WILDCARD, &["!transport unscripted draft"]);
    for d in &docs {
        let v = &emb[&d.doc_id];
        mock.script(Role::Embedder, keys::embed(&d.text), &[&serde_json::to_string(v).unwrap()]);
    }

    let mut questions = Vec::new();
    let mut groups = Vec::new();
    // (q, emitted docs, category, source docset)
    let mut expected: BTreeSet<(String, Vec<String>, Category, Vec<String>)> = BTreeSet::new();
    let mut tuples = 0;
    let mut sim_above = (0, 0);
    let reply = |l: Label| format!("The answer is {l}.");

    for qi in 0..n_q {
        let q = BenchmarkQuestion {
            q_id: format!("uq{qi:02}"),
            question: format!("universe question {qi}?"),
            options: labels.iter().map(|l| (*l, format!("choice {l}"))).collect(),
            gold: labels[rng.random_range(0..4)],
        };
        let group = [DifficultyGroup::Stable, DifficultyGroup::Medium, DifficultyGroup::Challenging][rng.random_range(0..3)];
        let psi = if rng.random_bool(0.6) { q.gold } else { labels[rng.random_range(0..4)] };
        mock.script(Role::Generator, keys::generate(&q.question, None), &[&reply(psi)]);

        let cand: Vec<String> = (0..per_q).map(|j| format!("u{qi:02}-{j}")).collect();
        let doc_entails: Vec<bool> = (0..per_q).map(|_| rng.random_bool(0.5)).collect();
        for (id, e) in cand.iter().zip(&doc_entails) {
            mock.script(Role::Nli, keys::nli(&text_of[id], &answer_hypothesis(&q)), &[nli_str(*e)]);
        }
        // oracle composition: first e entailing and n non-entailing, rank order
        let ent: Vec<usize> = (0..per_q).filter(|&i| doc_entails[i]).collect();
        let non: Vec<usize> = (0..per_q).filter(|&i| !doc_entails[i]).collect();
        for (e, n) in [(5, 0), (4, 1), (3, 2), (2, 3), (1, 4), (0, 5)] {
            if ent.len() < e || non.len() < n {
                continue;
            }
            let mut idx: Vec<usize> = ent[..e].iter().chain(&non[..n]).copied().collect();
            idx.sort();
            let d: Vec<String> = idx.iter().map(|&i| cand[i].clone()).collect();
            tuples += 1;

            let kinds = [DraftKind::Cite, DraftKind::Refuse, DraftKind::Garbage];
            let pk = kinds[rng.random_range(0..3)];
            let ak = kinds[rng.random_range(0..3)];
            let ptext = format!("primary claim {qi} {e}");
            let atext = format!("alternative claim {qi} {e}");
            let render = |k: DraftKind, t: &str| match k {
                DraftKind::Cite => format!("{t} [Doc {}]", 1 + (t.len() % 5)),
                DraftKind::Refuse => NKA_SENTENCE.to_string(),
                DraftKind::Garbage => format!("{t} without any citation"),
            };
            let praw = render(pk, &ptext);
            let araw = render(ak, &atext);
            mock.script(Role::PrimaryDrafter, keys::draft(&q.question, &d), &[&praw]);
            mock.script(Role::AltDrafter, keys::draft(&q.question, &d), &[&araw]);

            let nli_d_alt = rng.random_bool(0.5);
            let nli_d_primary = rng.random_bool(0.5);
            let psi_primary = if rng.random_bool(0.6) { psi } else { labels[rng.random_range(0..4)] };
            let psi_alt = if rng.random_bool(0.5) { psi } else { labels[rng.random_range(0..4)] };
            mock.script(Role::Nli, keys::nli(&joined(&d), &atext), &[nli_str(nli_d_alt)]);
            mock.script(Role::Nli, keys::nli(&joined(&d), &ptext), &[nli_str(nli_d_primary)]);
            for id in &d {
                mock.script(Role::Nli, keys::nli(&text_of[id], &atext), &[nli_str(rng.random_bool(0.5))]);
                mock.script(Role::Nli, keys::nli(&text_of[id], &ptext), &[nli_str(rng.random_bool(0.5))]);
            }
            if pk == DraftKind::Cite {
                let v = parse_verdict(&praw, 5).unwrap();
                mock.script(Role::Generator, keys::generate(&q.question, Some(&v)), &[&reply(psi_primary)]);
            }
            if ak == DraftKind::Cite {
                let v = parse_verdict(&araw, 5).unwrap();
                mock.script(Role::Generator, keys::generate(&q.question, Some(&v)), &[&reply(psi_alt)]);
            }

            // brute-force distractors: 5 nearest outside D by max cosine, ties by id
            let mut pool: Vec<(f64, String)> = docs
                .iter()
                .filter(|x| !d.contains(&x.doc_id))
                .map(|x| {
                    let best = d.iter().map(|s| cosine(&emb[s], &emb[&x.doc_id])).fold(f64::MIN, f64::max);
                    (best, x.doc_id.clone())
                })
                .collect();
            pool.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let dp: Vec<String> = pool.iter().take(5).map(|p| p.1.clone()).collect();
            let sim = dp
                .iter()
                .map(|t| d.iter().map(|s| cosine(&emb[s], &emb[t])).fold(f64::MIN, f64::max))
                .sum::<f64>()
                / dp.len() as f64;
            let nli_dp_primary = rng.random_bool(0.5);
            if pk == DraftKind::Cite {
                mock.script(Role::Nli, keys::nli(&joined(&dp), &ptext), &[nli_str(nli_dp_primary)]);
                for id in &dp {
                    mock.script(Role::Nli, keys::nli(&text_of[id], &ptext), &[nli_str(rng.random_bool(0.5))]);
                }
                if sim > DELTA {
                    sim_above.0 += 1;
                } else {
                    sim_above.1 += 1;
                }
            }

            // Eqs: faulty, missing, over-refusal, misattribution
            let alt_cite = ak == DraftKind::Cite;
            let pri_cite = pk == DraftKind::Cite;
            if alt_cite && !nli_d_alt {
                expected.insert((q.q_id.clone(), d.clone(), Category::FaultyReasoning, d.clone()));
            }
            if alt_cite && group == DifficultyGroup::Stable && psi == q.gold && psi_alt != psi {
                expected.insert((q.q_id.clone(), d.clone(), Category::MissingAnswer, d.clone()));
            }
            if pri_cite && ak == DraftKind::Refuse && nli_d_primary && psi_primary == psi {
                expected.insert((q.q_id.clone(), d.clone(), Category::OverRefusal, d.clone()));
            }
            if pri_cite && sim > DELTA && !nli_dp_primary {
                expected.insert((q.q_id.clone(), dp.clone(), Category::Misattribution, d.clone()));
            }
        }
        questions.push(q);
        groups.push(group);
    }

    let gw = Gateway::mocked(mock, &[]);
    let forge = Forge::new(&gw, &store).with_delta(DELTA);
    let mut emitted = BTreeSet::new();
    let mut revalidated = 0;
    for (q, g) in questions.iter().zip(&groups) {
        let cand: Vec<Document> = (0..per_q).map(|j| store.get_document(&format!("{}-{j}", q.q_id.replace("uq", "u"))).unwrap()).collect();
        let ev = EvidenceSet::new(q.question.clone(), 0, cand);
        let out = forge.forge_question(q, Some(*g), &ev).map_err(|e| format!("{}: {e}", q.q_id))?;
        for n in out.negatives {
            ensure(n.predicate_holds(), || format!("{} {}: recorded evidence fails predicate", n.q_id, n.category))?;
            revalidated += 1;
            let source = n.evidence.source_doc_ids.clone().unwrap_or_else(|| n.doc_ids.clone());
            ensure(emitted.insert((n.q_id, n.doc_ids, n.category, source)), || "duplicate emission".into())?;
        }
        ensure(!out.log.iter().any(|l| l.contains("unscripted")), || format!("{}: unscripted oracle call: {:?}", q.q_id, out.log))?;
    }
    ensure(tuples >= 200, || format!("only {tuples} tuples"))?;
    ensure(sim_above.0 > 0 && sim_above.1 > 0, || format!("similarity threshold not exercised both ways: {sim_above:?}"))?;
    let missing: Vec<_> = expected.difference(&emitted).take(3).collect();
    let extra: Vec<_> = emitted.difference(&expected).take(3).collect();
    ensure(missing.is_empty() && extra.is_empty(), || format!("missing {missing:?}; unexpected {extra:?}"))?;
    let mut per_cat: BTreeMap<Category, usize> = BTreeMap::new();
    for (_, _, c, _) in &expected {
        *per_cat.entry(*c).or_default() += 1;
    }
    ensure(per_cat.len() == 4, || format!("not all categories occur: {per_cat:?}"))?;
    Ok(format!(
        "{tuples} tuples; emitted == brute force ({} samples: {per_cat:?}); {revalidated} re-validated; Sim>δ {}/{}",
        expected.len(),
        sim_above.0,
        sim_above.0 + sim_above.1
    ))
}

// ---------------------------------------------------------------- DPO

fn dpo_criterion() -> Check {
    let start = Instant::now();
    let z = dpo_loss(PairLogProbs { policy_chosen: -7.0, ref_chosen: -7.0, policy_rejected: -9.0, ref_rejected: -9.0 }, 0.1)
        .map_err(|e| e.to_string())?;
    let ln2_err = (z.loss - std::f64::consts::LN_2).abs();
    ensure(ln2_err < 1e-12, || format!("loss(0) off by {ln2_err}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let beta = [0.05, 0.1, 0.5, 1.0][i % 4];
        let rc = rng.random_range(-120.0..-5.0);
        let rr = rng.random_range(-120.0..-5.0);
        let lp = PairLogProbs {
            policy_chosen: rc + rng.random_range(-6.0..6.0),
            ref_chosen: rc,
            policy_rejected: rr + rng.random_range(-6.0..6.0),
            ref_rejected: rr,
        };
        let g = grad_check(lp, beta, 1e-5).map_err(|e| e.to_string())?;
        worst = worst.max(g.max_rel_error);
    }
    ensure(worst < 1e-5, || format!("grad-check max rel error {worst:e}"))?;

    // loss as a function of margin alone: β=1, only policy_chosen moves
    let at = |m: f64| dpo_loss(PairLogProbs { policy_chosen: m, ref_chosen: 0.0, policy_rejected: 0.0, ref_rejected: 0.0 }, 1.0);
    let mut prev = f64::INFINITY;
    let mut steps = 0;
    let mut m = -700.0;
    while m <= 700.0 {
        let r = at(m).map_err(|e| e.to_string())?;
        ensure(r.loss.is_finite() && r.grad.iter().all(|g| g.is_finite()), || format!("non-finite at m={m}"))?;
        ensure(r.loss <= prev, || format!("not monotone at m={m}"))?;
        // oracle: softplus(-m) by cases
        let want = if m < 0.0 { -m + (m).exp().ln_1p() } else { (-m).exp().ln_1p() };
        ensure((r.loss - want).abs() <= 1e-12 * want.max(1.0), || format!("loss at m={m}: {} vs {want}", r.loss))?;
        prev = r.loss;
        m += 0.25;
        steps += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 2.0, || format!("runtime {secs:.3}s"))?;
    Ok(format!(
        "|loss(0)-ln2|={ln2_err:e}; grad-check max rel {worst:.2e} < 1e-5 over 100 pairs; {steps} margins in [-700,700] monotone & finite; {secs:.3}s < 2s"
    ))
}

// ---------------------------------------------------------------- end to end

fn e2e_criterion() -> Check {
    let bundle = generate_fixtures(42);
    // hand-derived from the scripts: q01-q04, q06, q07, q08 answer gold
    const HAND_EM: usize = 7;
    ensure(bundle.snapshot.correct == HAND_EM, || "snapshot disagrees with hand count".into())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for (run, par) in [1usize, 1, 4].iter().enumerate() {
        let s = bundle.session().map_err(|e| e.to_string())?;
        let p = Pipeline::new(s.retriever.clone(), s.gateway.clone());
        let (report, results) =
            run_benchmark("fixture", &bundle.questions, &p, &PipelineConfig::default(), *par).map_err(|e| e.to_string())?;
        ensure(report.correct == HAND_EM && report.n == 10, || format!("run {run}: {}/{}", report.correct, report.n))?;
        let recomputed = report.per_question.iter().filter(|q| q.correct).count() as f64 / report.n as f64;
        ensure((recomputed - report.em).abs() < 1e-15, || "em not mean of per-question".into())?;
        let dir = tmp.path().join(format!("run{run}"));
        write_report(&dir, &report, &results).map_err(|e| e.to_string())?;
        let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(&dir)
            .map_err(|e| e.to_string())?
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        outputs.push(files);
    }
    ensure(outputs[0] == outputs[1], || "two runs differ".into())?;
    ensure(outputs[0] == outputs[2], || "parallelism 1 vs 4 differ".into())?;
    Ok(format!("EM {HAND_EM}/10 = 0.7; reports byte-identical across 2 runs and parallelism 1 vs 4"))
}

// ---------------------------------------------------------------- audit

fn audit_criterion() -> Check {
    let bundle = generate_fixtures(42);
    let s = bundle.session().map_err(|e| e.to_string())?;
    let p = Pipeline::new(s.retriever.clone(), s.gateway.clone());
    let results = p.answer_batch(&bundle.questions, &PipelineConfig::default(), 1);
    let traces: Vec<TraceLine> = results.iter().map(TraceLine::from).collect();
    let report = audit_hallucinations(&traces, &bundle.questions, &s.store, &s.gateway);
    // planted violations, written out by hand from the fixture table
    let planted: BTreeSet<(String, Category)> = [
        ("q02", Category::FaultyReasoning),
        ("q03", Category::Misattribution),
        ("q05", Category::MissingAnswer),
        ("q09", Category::OverRefusal),
    ]
    .into_iter()
    .map(|(q, c)| (q.to_string(), c))
    .collect();
    let assigned: BTreeSet<(String, Category)> = report
        .records
        .iter()
        .flat_map(|r| r.categories.iter().map(move |c| (r.q_id.clone(), *c)))
        .collect();
    let tp = planted.intersection(&assigned).count() as f64;
    let precision = if assigned.is_empty() { 0.0 } else { tp / assigned.len() as f64 };
    let recall = tp / planted.len() as f64;
    ensure(precision == 1.0 && recall == 1.0, || format!("precision {precision} recall {recall}: {assigned:?}"))?;
    let q03 = report.records.iter().find(|r| r.q_id == "q03").ok_or("q03 not audited")?;
    ensure(!q03.categories.contains(&Category::FaultyReasoning), || "precedence violated".into())?;
    ensure(report.unauditable.len() == 1 && report.unauditable[0].q_id == "q10", || "unauditable set".into())?;
    Ok(format!(
        "precision {precision} recall {recall} over {} planted; q03 misattribution not faulty; q10 unauditable",
        planted.len()
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 9] = [
        ("rrf_oracle_equivalence", rrf_criterion),
        ("bm25_oracle_equivalence", bm25_criterion),
        ("verdict_round_trip", verdict_criterion),
        ("pipeline_state_machine", pipeline_criterion),
        ("stratification_partition", stratification_criterion),
        ("constructor_soundness_completeness", constructor_criterion),
        ("dpo_math", dpo_criterion),
        ("end_to_end_determinism", e2e_criterion),
        ("audit_correctness", audit_criterion),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into()))
        });
        match r {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(e) => {
                failed += 1;
                println!("FAIL {name}: {e}");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
