use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cxr_fusion::metrics::EvalReport;
use cxr_fusion::train::load_trained;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cxr-fusion"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&["gen-data", "--out", s(&out), "--n-patients", "90", "--image-size", "16", "--seed", "21", "--ambiguity-fraction", "0.3", "--not-mentioned-rate", "0.1"]);
    out
}

/// Every file under `dir`, relative path and bytes, sorted.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const QUICK: [&str; 4] = ["--epochs", "2", "--batch-size", "16"];

#[test]
fn gen_data_is_byte_identical_on_rerun() {
    let t = tempfile::tempdir().unwrap();
    let a = tree(&gen(t.path(), "a"));
    let b = tree(&gen(t.path(), "b"));
    assert_eq!(a.len(), 90 + 2, "manifest, echoed config and one image per sample");
    assert_eq!(a, b);
}

#[test]
fn train_is_byte_identical_on_rerun_and_echoes_overrides() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), "data");
    let mut ckpts = Vec::new();
    for run_dir in ["r1", "r2"] {
        let out = t.path().join(run_dir);
        let mut args = vec!["train", "--data", s(&data), "--out", s(&out)];
        args.extend(QUICK);
        ok(&args);
        ckpts.push(fs::read(out.join("checkpoint.json")).unwrap());
        let runlog = fs::read_to_string(out.join("runlog.csv")).unwrap();
        assert_eq!(runlog.lines().count(), 3);
        let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("effective_config.json")).unwrap()).unwrap();
        assert_eq!(echo["epochs"], 2);
        assert_eq!(echo["batch_size"], 16);
    }
    assert_eq!(ckpts[0], ckpts[1]);
}

#[test]
fn sweep_trial_table_is_byte_identical_on_rerun() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), "data");
    let spec = t.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"strategy": {"kind": "random", "n_trials": 3, "seed": 2},
            "learning_rate": [0.001, 0.01], "batch_size": [16],
            "meta_features": ["age,sex,bmi", "none"], "meta_dims": [[4, 4]]}"#,
    )
    .unwrap();
    let mut tables = Vec::new();
    for (run_dir, jobs) in [("s1", "1"), ("s2", "2")] {
        let out = t.path().join(run_dir);
        let mut args = vec!["sweep", "--data", s(&data), "--spec", s(&spec), "--out", s(&out), "--jobs", jobs];
        args.extend(QUICK);
        ok(&args);
        let csv = fs::read_to_string(out.join("trials.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(out.join("runlogs/trial_002.csv").exists());
        tables.push((csv, fs::read(out.join("winner.json")).unwrap()));
    }
    assert_eq!(tables[0], tables[1]);
}

#[test]
fn label_reproduces_the_golden_corpus() {
    let t = tempfile::tempdir().unwrap();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let out = t.path().join("labels.jsonl");
    ok(&["label", "--input", s(&fixtures.join("golden_reports.jsonl")), "--out", s(&out)]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(fixtures.join("golden_expected.jsonl")).unwrap());
}

#[test]
fn label_reads_a_directory_of_text_reports() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path().join("reports");
    fs::create_dir(&dir).unwrap();
    fs::write(dir.join("b.txt"), "Possible edema. Small pleural effusion.").unwrap();
    fs::write(dir.join("a.txt"), "No pneumothorax.").unwrap();
    fs::write(dir.join("notes.md"), "ignored").unwrap();
    let out = t.path().join("labels.jsonl");
    ok(&["label", "--input", s(&dir), "--out", s(&out)]);
    let lines: Vec<serde_json::Value> = fs::read_to_string(&out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["id"], "a");
    assert_eq!(lines[0]["states"][11], "negative");
    assert_eq!(lines[1]["states"][3], "uncertain");
    assert_eq!(lines[1]["states"][8], "positive");
}

#[test]
fn eval_of_a_constant_logit_checkpoint_is_chance_everywhere() {
    let t = tempfile::tempdir().unwrap();
    let data = gen(t.path(), "data");
    let run_dir = t.path().join("run");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run_dir), "--baseline"];
    args.extend(QUICK);
    ok(&args);

    let mut trained = load_trained(&run_dir.join("checkpoint.json")).unwrap();
    trained.model.param_mut("classifier.weight").unwrap().data_mut().fill(0.0);
    let constant = t.path().join("constant.json");
    trained.model.save(&constant, serde_json::to_value(&trained.info).unwrap()).unwrap();

    let out = t.path().join("eval");
    ok(&["eval", "--data", s(&data), "--checkpoint", s(&constant), "--out", s(&out), "--split", "all", "--group-by", "sex", "--group-by", "age", "--min-group-size", "5"]);
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(out.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report.n_samples, 90);
    let defined: Vec<f64> = report.per_pathology.iter().filter_map(|r| r.auroc).collect();
    assert!(defined.len() >= 10);
    assert!(defined.iter().all(|&a| a == 0.5));
    assert_eq!(report.macro_auroc_all, Some(0.5));
    assert_eq!(report.subgroups.as_ref().unwrap().key, "sex");
    assert_eq!(report.subgroups.as_ref().unwrap().max_gap, Some(0.0));
    assert!(out.join("subgroups.json").exists());
    let table = fs::read_to_string(out.join("eval.txt")).unwrap();
    assert!(table.contains("Average AUROC (14)") && table.contains("subgroups by age"));

    let cmp = t.path().join("cmp");
    ok(&["report", "--baseline", s(&out.join("eval.json")), "--fusion", s(&out.join("eval.json")), "--out", s(&cmp)]);
    assert!(fs::read_to_string(cmp.join("comparison.txt")).unwrap().contains("+0.00000"));
}

#[test]
fn out_of_range_fraction_is_a_usage_error_naming_the_flag() {
    let t = tempfile::tempdir().unwrap();
    let out = run(&["gen-data", "--out", s(&t.path().join("d")), "--ambiguity-fraction", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--ambiguity-fraction"), "{err}");
    assert!(!t.path().join("d").exists());
}

#[test]
fn invalid_config_values_exit_with_two() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("synth.json");
    fs::write(&cfg, r#"{"n_patients": 10, "uncertain_rate": 2.0}"#).unwrap();
    let out = run(&["gen-data", "--config", s(&cfg), "--out", s(&t.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("uncertain_rate"));
}

#[test]
fn missing_input_is_an_io_error_naming_the_path() {
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("no_such_dataset");
    let out = run(&["train", "--data", s(&missing), "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_dataset"));

    let out = run(&["label", "--input", s(&t.path().join("reports.jsonl")), "--out", s(&t.path().join("l.jsonl"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("reports.jsonl"));
}
