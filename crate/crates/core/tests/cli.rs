use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use promptforge::cli::{ResultRow, SweepRow};
use promptforge::episodes::EvalReport;

const SMALL: &str = r#"{
  "encoder": { "layers": 1, "image_size": 16, "vocab_hash_buckets": 512 },
  "dataset": { "synthetic": { "image_size": 16, "images_per_class": 25 } },
  "pipeline": { "iterations": 2, "classifier_epochs": 10 },
  "episodes": 3
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_promptforge"));
    c.env_remove("PROMPTFORGE_THREADS");
    c
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.json");
    std::fs::write(&p, SMALL).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn rows<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    csv::Reader::from_path(path).unwrap().deserialize().map(Result::unwrap).collect()
}

#[test]
fn run_writes_report_and_episode_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("run");
    ok(&run(&["run", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out_dir.to_str().unwrap()]));
    let report: EvalReport = serde_json::from_slice(&std::fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.schema_version, 1);
    assert_eq!(report.seed, 7);
    assert_eq!(report.episodes, 3);
    assert_eq!(report.config_fingerprint.len(), 64);
    let mean = report.accuracies.iter().sum::<f64>() / 3.0;
    assert!((report.mean - mean).abs() < 1e-12);
    let csv = std::fs::read_to_string(out_dir.join("episodes.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("episode,seed,accuracy,config_fingerprint"));
    assert_eq!(lines.count(), 3);
    assert!(csv.contains(&report.config_fingerprint));
    let summary = run(&["report", out_dir.to_str().unwrap()]);
    ok(&summary);
    assert!(String::from_utf8_lossy(&summary.stdout).contains("full"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut reports = Vec::new();
    for (name, workers) in [("a", "1"), ("b", "2")] {
        let out_dir = dir.path().join(name);
        ok(&run(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--workers",
            workers,
            "--out",
            out_dir.to_str().unwrap(),
        ]));
        reports.push(std::fs::read(out_dir.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn config_errors_exit_2_and_name_the_problem() {
    let out = run(&["run", "--set", "corpus=/no/such/corpus.json", "--set", "episodes=0"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/no/such/corpus.json"), "{err}");
    assert!(err.contains("episodes"), "{err}");
    let out = run(&["run", "--set", "pipeline.no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn ablation_has_one_paired_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("ablate");
    ok(&run(&["ablate", "--config", cfg.to_str().unwrap(), "--episodes", "2", "--out", out_dir.to_str().unwrap()]));
    let table: Vec<ResultRow> = rows(&out_dir.join("ablation.csv"));
    assert_eq!(table.len(), 7);
    let variants: BTreeSet<&str> = table.iter().map(|r| r.variant.as_str()).collect();
    assert_eq!(variants.len(), 7);
    let pairing: BTreeSet<(u64, usize)> = table.iter().map(|r| (r.seed, r.episodes)).collect();
    assert_eq!(pairing.len(), 1, "episode seeds differ between rows");
    assert!(table.iter().all(|r| r.ways == 5 && r.shots == 1));
}

#[test]
fn sweep_has_one_row_per_view_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("sweep");
    ok(&run(&[
        "sweep-nv",
        "--config",
        cfg.to_str().unwrap(),
        "--episodes",
        "1",
        "--set",
        "pipeline.iterations=1",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let table: Vec<SweepRow> = rows(&out_dir.join("sweep_nv.csv"));
    assert_eq!(table.iter().map(|r| r.n_v).collect::<Vec<_>>(), (1..=7).collect::<Vec<_>>());
    assert!(table.iter().all(|r| r.seed == table[0].seed && r.episodes == 1));
}

#[test]
fn feature_export_five_shot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut dumps = Vec::new();
    for name in ["x", "y"] {
        let out_dir = dir.path().join(name);
        ok(&run(&[
            "export-features",
            "--preset",
            "paper-5shot",
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "pipeline.iterations=1",
            "--seed",
            "3",
            "--out",
            out_dir.to_str().unwrap(),
        ]));
        dumps.push(std::fs::read(out_dir.join("features.csv")).unwrap());
    }
    assert_eq!(dumps[0], dumps[1]);
    let mut reader = csv::Reader::from_reader(dumps[0].as_slice());
    let header = reader.headers().unwrap().clone();
    assert_eq!(&header[0], "role");
    assert_eq!(&header[1], "class");
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.unwrap();
        let role = match &rec[0] {
            "support" | "generated" => "train",
            "query" => "query",
            other => panic!("unexpected role {other}"),
        };
        *counts.entry((rec[1].to_string(), role.to_string())).or_default() += 1;
    }
    let classes: BTreeSet<&String> = counts.keys().map(|(c, _)| c).collect();
    assert_eq!(classes.len(), 5);
    for c in classes {
        assert_eq!(counts[&(c.clone(), "train".into())], 25);
        assert_eq!(counts[&(c.clone(), "query".into())], 15);
    }
}

#[test]
fn grad_check_reports_and_fails_on_flipped_sign() {
    let out = run(&["grad-check"]);
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    for name in ["L_div", "L_se", "L_TSC", "L_cls"] {
        assert!(text.contains(name), "{text}");
    }
    assert!(text.contains("max rel err"));
    let out = run(&["grad-check", "--flip-sign", "L_div"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("L_div"));
}
