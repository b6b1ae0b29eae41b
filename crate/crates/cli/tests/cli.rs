use std::path::Path;
use std::process::{Command, Output};

fn medtrust(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_medtrust"));
    cmd.args(args).env_remove("MEDTRUST_CONFIG");
    if let Some(c) = config {
        cmd.env("MEDTRUST_CONFIG", c);
    }
    cmd.output().expect("spawn medtrust")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn fixture_dir() -> (tempfile::TempDir, std::path::PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    ok(&medtrust(&["fixtures", "--seed", "42", "--out", fx.to_str().unwrap()], None));
    let cfg = fx.join("config.toml");
    (tmp, cfg)
}

fn read_dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = medtrust(&["frobnicate"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_data_dir_is_an_error() {
    let out = medtrust(&["index"], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("data directory"));
}

#[test]
fn retrieve_depth() {
    let (_tmp, cfg) = fixture_dir();
    let bench = std::fs::read_to_string(cfg.parent().unwrap().join("benchmark.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(bench.lines().next().unwrap()).unwrap();
    let q = first["question"].as_str().unwrap();
    let out = ok(&medtrust(&["retrieve", "--q", q, "--depth", "5"], Some(&cfg)));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 5);
    let scores: Vec<f64> = lines.iter().map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert!(lines.iter().all(|l| l.starts_with("doc-01-")));
}

#[test]
fn bench_is_deterministic_across_runs_and_parallelism() {
    let (tmp, cfg) = fixture_dir();
    let dirs: Vec<_> = ["a", "b", "c"].iter().map(|n| tmp.path().join(n)).collect();
    for (d, par) in dirs.iter().zip(["1", "1", "4"]) {
        let out = ok(&medtrust(&["bench", "--out", d.to_str().unwrap(), "--parallelism", par], Some(&cfg)));
        assert!(out.contains("em=0.7 (7/10)"), "{out}");
    }
    let a = read_dir_files(&dirs[0]);
    assert_eq!(a, read_dir_files(&dirs[1]));
    assert_eq!(a, read_dir_files(&dirs[2]));
}

#[test]
fn config_flag_and_env_agree() {
    let (tmp, cfg) = fixture_dir();
    let a = tmp.path().join("a");
    let out = medtrust(&["--config", cfg.to_str().unwrap(), "bench", "--out", a.to_str().unwrap()], None);
    assert!(ok(&out).contains("7/10"));
}

#[test]
fn audit_forge_stratify_and_dpo() {
    let (tmp, cfg) = fixture_dir();
    let r = tmp.path().join("r");
    ok(&medtrust(&["bench", "--out", r.to_str().unwrap()], Some(&cfg)));
    let audit = tmp.path().join("audit.json");
    let out = ok(&medtrust(
        &["audit", "--traces", r.join("traces.jsonl").to_str().unwrap(), "--out", audit.to_str().unwrap()],
        Some(&cfg),
    ));
    assert!(out.contains("faulty_reasoning: 1/"));
    assert!(out.contains("over_refusal: 1/"));

    let f = tmp.path().join("forge");
    let out = ok(&medtrust(&["forge-align", "--out", f.to_str().unwrap()], Some(&cfg)));
    assert!(out.contains("pairs=4"), "{out}");
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.join("manifest.json")).unwrap()).unwrap();
    for c in ["faulty_reasoning", "missing_answer", "over_refusal", "misattribution"] {
        assert_eq!(manifest["per_category"][c], 1, "{c}");
    }

    let s = tmp.path().join("s.json");
    let out = ok(&medtrust(&["stratify", "--out", s.to_str().unwrap(), "--parallelism", "3"], Some(&cfg)));
    assert_eq!(out.trim(), "stable=6 medium=2 challenging=2 rejects=0");

    let pairs = tmp.path().join("pairs.jsonl");
    std::fs::write(
        &pairs,
        "{\"policy_chosen\":-3,\"ref_chosen\":-3,\"policy_rejected\":-5,\"ref_rejected\":-5}\n",
    )
    .unwrap();
    let out = ok(&medtrust(&["dpo-check", "--pairs", pairs.to_str().unwrap()], None));
    assert!(out.contains("mean_loss=0.6931471805599453"), "{out}");
}

#[test]
fn ingest_and_index_fresh_store() {
    let (tmp, cfg) = fixture_dir();
    let store = tmp.path().join("store2");
    let corpus = cfg.parent().unwrap().join("corpus.jsonl");
    let out = ok(&medtrust(
        &["--data-dir", store.to_str().unwrap(), "ingest", "--corpus", corpus.to_str().unwrap()],
        None,
    ));
    let stats: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(stats["doc_count"], 50);
    let out = ok(&medtrust(&["--data-dir", store.to_str().unwrap(), "index"], None));
    assert_eq!(out.trim(), "indexed 50 documents");
    let again = medtrust(&["--data-dir", store.to_str().unwrap(), "ingest", "--corpus", corpus.to_str().unwrap()], None);
    assert_eq!(again.status.code(), Some(1));
}
