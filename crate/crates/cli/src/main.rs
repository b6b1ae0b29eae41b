mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use medtrust_core::corpus::{load_benchmark, write_jsonl, BenchmarkQuestion, DocumentStore};
use medtrust_core::dpo::{dpo_batch_loss, dpo_loss, grad_check, PairLogProbs};
use medtrust_core::eval::{audit_hallucinations, run_benchmark, write_report};
use medtrust_core::fixtures::{generate_fixtures, BENCHMARK_FILE, CORPUS_FILE, SCRIPT_FILE};
use medtrust_core::forge::{emit_preference_corpus, forge_corpus, Forge, PreferenceRecord};
use medtrust_core::gateway::{Gateway, HttpTransport, ScriptedMock};
use medtrust_core::medrank::{default_schedule, stratify_corpus, EvalCriteria};
use medtrust_core::pipeline::{read_traces, Pipeline};
use medtrust_core::retrieval::{HybridRetriever, SparseIndex};
use serde::Serialize;

use crate::config::Config;

#[derive(Parser)]
#[command(name = "medtrust", version, about = "Retrieval-verified medical QA toolkit")]
struct Cli {
    /// TOML config file.
    #[arg(long, global = true, env = "MEDTRUST_CONFIG")]
    config: Option<PathBuf>,
    /// Store directory, overriding the config.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Scripted mock file, overriding the configured endpoints.
    #[arg(long, global = true)]
    mock: Option<PathBuf>,
    /// Worker threads for per-question fan-out.
    #[arg(long, global = true, default_value_t = 1)]
    parallelism: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a JSONL corpus into the store.
    Ingest {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Build and save the sparse index over the store.
    Index,
    /// Hybrid retrieval for a query.
    Retrieve {
        #[arg(long)]
        q: String,
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Answer one benchmark question and print its record.
    Answer {
        #[arg(long)]
        q_id: String,
        #[arg(long)]
        benchmark: Option<PathBuf>,
    },
    /// Run the benchmark and write the report.
    Bench {
        #[arg(long)]
        benchmark: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-assessment difficulty stratification.
    Stratify {
        #[arg(long)]
        benchmark: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the preference corpus.
    ForgeAlign {
        #[arg(long)]
        benchmark: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the preference objective and gradient check per pair.
    DpoCheck {
        /// JSONL of {policy_chosen, ref_chosen, policy_rejected, ref_rejected}.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
    /// Audit answered traces for hallucination categories.
    Audit {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        benchmark: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic offline bundle with a ready store and config.
    Fixtures {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Ctx {
    cfg: Config,
    cli_data_dir: Option<PathBuf>,
    cli_mock: Option<PathBuf>,
    parallelism: usize,
}

impl Ctx {
    fn data_dir(&self) -> Result<PathBuf> {
        self.cli_data_dir
            .clone()
            .or_else(|| self.cfg.data_dir.clone())
            .ok_or_else(|| anyhow!("no data directory: pass --data-dir or set data_dir in the config"))
    }

    fn benchmark(&self, flag: &Option<PathBuf>) -> Result<Vec<BenchmarkQuestion>> {
        let path = flag
            .clone()
            .or_else(|| self.cfg.benchmark.clone())
            .ok_or_else(|| anyhow!("no benchmark: pass --benchmark or set benchmark in the config"))?;
        load_benchmark(&path).with_context(|| format!("loading benchmark {}", path.display()))
    }

    fn store(&self) -> Result<Arc<DocumentStore>> {
        let dir = self.data_dir()?;
        Ok(Arc::new(
            DocumentStore::open(&dir).with_context(|| format!("opening store {}", dir.display()))?,
        ))
    }

    fn gateway(&self) -> Result<Arc<Gateway>> {
        let ep = &self.cfg.endpoints;
        match self.cli_mock.clone().or_else(|| ep.mock_script.clone()) {
            Some(path) => {
                let mock = ScriptedMock::load(&path)?;
                let models: Vec<&str> = ep.dense_models.iter().map(String::as_str).collect();
                Ok(Arc::new(Gateway::mocked(mock, &models)))
            }
            None => Ok(Arc::new(Gateway::new(ep.agents.clone(), Arc::new(HttpTransport::new()))?)),
        }
    }

    fn retriever(&self, store: &Arc<DocumentStore>, gateway: &Arc<Gateway>) -> Result<Arc<HybridRetriever>> {
        let dir = self.data_dir()?;
        let index = match SparseIndex::load(&dir) {
            Ok(ix) => ix,
            Err(_) => SparseIndex::build(store)?,
        };
        let mut r = HybridRetriever::new(Arc::clone(store), Arc::new(index));
        r.k_rrf = self.cfg.retrieval.k_rrf;
        r.candidate_depth = self.cfg.retrieval.candidate_depth;
        for d in gateway.dense_retrievers() {
            r = r.with_dense(d);
        }
        Ok(Arc::new(r))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let ctx = Ctx {
        cfg,
        cli_data_dir: cli.data_dir,
        cli_mock: cli.mock,
        parallelism: cli.parallelism.max(1),
    };
    match cli.command {
        Command::Ingest { corpus } => {
            let mut store = DocumentStore::open(&ctx.data_dir()?)?;
            let stats = store.ingest_corpus(&corpus)?;
            print_json(&stats)
        }
        Command::Index => {
            let dir = ctx.data_dir()?;
            let store = DocumentStore::open(&dir)?;
            let index = SparseIndex::build(&store)?;
            index.save(&dir)?;
            println!("indexed {} documents", index.doc_count());
            Ok(())
        }
        Command::Retrieve { q, depth } => {
            let store = ctx.store()?;
            let gw = ctx.gateway()?;
            let r = ctx.retriever(&store, &gw)?;
            let ev = r.retrieve(&q, depth.unwrap_or(ctx.cfg.retrieval.depth), 0)?;
            let mut out = std::io::stdout().lock();
            for (d, s) in ev.docs.iter().zip(&ev.scores) {
                writeln!(out, "{}\t{s}", d.doc_id)?;
            }
            Ok(())
        }
        Command::Answer { q_id, benchmark } => {
            let qs = ctx.benchmark(&benchmark)?;
            let q = qs
                .iter()
                .find(|q| q.q_id == q_id)
                .ok_or_else(|| anyhow!("question {q_id} not in benchmark"))?;
            let store = ctx.store()?;
            let gw = ctx.gateway()?;
            let pipeline = Pipeline::new(ctx.retriever(&store, &gw)?, gw);
                        match pipeline.answer_question(q, &ctx.cfg.pipeline) {
                Ok(rec) => print_json(&rec),
                Err(f) => bail!("{}: {} (after {} rounds)", f.q_id, f.error, f.rounds.len()),
            }
        }
        Command::Bench { benchmark, out } => {
            let qs = ctx.benchmark(&benchmark)?;
            let store = ctx.store()?;
            let gw = ctx.gateway()?;
            let pipeline = Pipeline::new(ctx.retriever(&store, &gw)?, gw);
            let name = benchmark
                .as_ref()
                .or(ctx.cfg.benchmark.as_ref())
                .and_then(|p| p.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "benchmark".into());
            let (report, results) = run_benchmark(&name, &qs, &pipeline, &ctx.cfg.pipeline, ctx.parallelism)?;
            write_report(&out, &report, &results)?;
            println!("{}: em={} ({}/{}), failures={}", report.dataset, report.em, report.correct, report.n, report.failures);
            Ok(())
        }
        Command::Stratify { benchmark, out } => {
            let qs = ctx.benchmark(&benchmark)?;
            let gw = ctx.gateway()?;
            let k = ctx.cfg.forge.rounds;
            let strat = stratify_corpus(&qs, &gw, k, &default_schedule(k), &EvalCriteria::default(), ctx.parallelism)?;
            write_json(&out, &strat)?;
            println!(
                "stable={} medium={} challenging={} rejects={}",
                strat.stable.len(),
                strat.medium.len(),
                strat.challenging.len(),
                strat.rejects.len()
            );
            Ok(())
        }
        Command::ForgeAlign { benchmark, out } => {
            let qs = ctx.benchmark(&benchmark)?;
            let store = ctx.store()?;
            let gw = ctx.gateway()?;
            let retriever = ctx.retriever(&store, &gw)?;
            let k = ctx.cfg.forge.rounds;
            let strat = stratify_corpus(&qs, &gw, k, &default_schedule(k), &EvalCriteria::default(), ctx.parallelism)?;
            let forge = Forge::new(&gw, &store).with_delta(ctx.cfg.forge.delta);
            let run = forge_corpus(&forge, &qs, &strat, &retriever, ctx.cfg.retrieval.depth);
            let (pairs, manifest) = emit_preference_corpus(
                &qs,
                &run.positives,
                &run.negatives,
                ctx.cfg.forge.policy,
                &store,
                &gw,
                forge.delta,
            )?;
            std::fs::create_dir_all(&out)?;
            let records: Vec<PreferenceRecord> = pairs.iter().map(PreferenceRecord::from).collect();
            write_jsonl(&out.join("preferences.jsonl"), &records)?;
            write_jsonl(&out.join("positives.jsonl"), &run.positives)?;
            write_jsonl(&out.join("negatives.jsonl"), &run.negatives)?;
            write_json(&out.join("stratification.json"), &strat)?;
            write_json(&out.join("manifest.json"), &manifest)?;
            std::fs::write(out.join("forge.log"), run.log.join("\n") + "\n")?;
            println!("pairs={} positives={} negatives={}", manifest.pairs, run.positives.len(), run.negatives.len());
            Ok(())
        }
        Command::DpoCheck { pairs, beta, step } => {
            let text = std::fs::read_to_string(&pairs).with_context(|| format!("reading {}", pairs.display()))?;
            let batch = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .enumerate()
                .map(|(i, l)| serde_json::from_str::<PairLogProbs>(l).with_context(|| format!("pair line {}", i + 1)))
                .collect::<Result<Vec<_>>>()?;
            #[derive(Serialize)]
            struct Line {
                loss: f64,
                margin: f64,
                grad: [f64; 4],
                max_rel_error: f64,
            }
            let mut out = std::io::stdout().lock();
            let mut worst: f64 = 0.0;
            for lp in &batch {
                let r = dpo_loss(*lp, beta)?;
                let g = grad_check(*lp, beta, step)?;
                worst = worst.max(g.max_rel_error);
                serde_json::to_writer(
                    &mut out,
                    &Line {
                        loss: r.loss,
                        margin: r.margin,
                        grad: r.grad,
                        max_rel_error: g.max_rel_error,
                    },
                )?;
                writeln!(out)?;
            }
            let (mean, _) = dpo_batch_loss(&batch, beta)?;
            writeln!(out, "mean_loss={mean} max_rel_error={worst}")?;
            Ok(())
        }
        Command::Audit { traces, benchmark, out } => {
            let qs = ctx.benchmark(&benchmark)?;
            let store = ctx.store()?;
            let gw = ctx.gateway()?;
            let lines = read_traces(&traces).with_context(|| format!("reading {}", traces.display()))?;
            let report = audit_hallucinations(&lines, &qs, &store, &gw);
            write_json(&out, &report)?;
            for (c, s) in &report.categories {
                println!("{c}: {}/{}", s.count, s.denominator);
            }
            Ok(())
        }
        Command::Fixtures { seed, out } => {
            let bundle = generate_fixtures(seed);
            bundle.write_to(&out)?;
            let store_dir = out.join("store");
            let mut store = DocumentStore::open(&store_dir)?;
            if store.is_empty() {
                store.ingest_corpus(&out.join(CORPUS_FILE))?;
            }
            SparseIndex::build(&store)?.save(&store_dir)?;
            let cfg = Config {
                data_dir: Some("store".into()),
                benchmark: Some(BENCHMARK_FILE.into()),
                endpoints: config::EndpointsConfig {
                    mock_script: Some(SCRIPT_FILE.into()),
                    dense_models: bundle.dense_models.clone(),
                    agents: Vec::new(),
                },
                ..Config::default()
            };
            std::fs::write(out.join("config.toml"), toml::to_string(&cfg)?)?;
            println!("wrote {} documents, {} questions to {}", bundle.documents.len(), bundle.questions.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
