use std::path::Path;
use std::process::{Command, Output};

use afn_core::datagen::{oracle_accuracy, read_grammar};

const CONFIG: &str = r#"
schema_version = 1
profile = "compact"

[grammar]
activities = 2
actions_per_activity = 3
vocabulary = 4
height = 4
width = 4

[data]
per_activity = 4
framerate = 6
sigma = 0.1

[train]
steps = 6

[train.sampler]
batch_size = 4

[gradcheck]
coords = 3
"#;

fn afn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afn"))
        .args(args)
        .current_dir(dir)
        .env_remove("AFN_TRAIN__STEPS")
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "status {:?}\n{}", out.status, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn gen_data_is_reproducible_and_reports_the_oracle() {
    let dir = setup();
    let a = ok(&afn(&["gen-data", "--config", "run.toml", "--seed", "3", "--out", "a"], dir.path()));
    ok(&afn(&["gen-data", "--config", "run.toml", "--seed", "3", "--out", "b"], dir.path()));
    for f in ["dataset.jsonl", "grammar.json", "split.json"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(f)).unwrap(), std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    let grammar = read_grammar(&dir.path().join("a/grammar.json")).unwrap();
    let expected = format!("oracle next-action accuracy {:.6}", oracle_accuracy(&grammar).unwrap());
    assert!(a.contains(&expected), "{a}");
}

#[test]
fn train_resume_and_eval() {
    let dir = setup();
    let p = dir.path();
    ok(&afn(&["gen-data", "--config", "run.toml", "--seed", "1", "--out", "data"], p));
    ok(&afn(&["train", "--config", "run.toml", "--data", "data", "--out", "run"], p));
    let log = std::fs::read_to_string(p.join("run/train_log.csv")).unwrap();
    let rows: Vec<Vec<&str>> = log.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    // alpha and beta of the first step.
    assert_eq!((rows[0][7], rows[0][8]), ("0.0", "0.0"));

    // Resume from the step-6 checkpoint to step 9.
    let out = Command::new(env!("CARGO_BIN_EXE_afn"))
        .args(["train", "--config", "run.toml", "--data", "data", "--out", "run", "--resume", "run/checkpoint.json"])
        .env("AFN_TRAIN__STEPS", "9")
        .current_dir(p)
        .output()
        .unwrap();
    ok(&out);
    let log = std::fs::read_to_string(p.join("run/train_log.csv")).unwrap();
    let steps: Vec<u64> = log.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (0..9).collect::<Vec<_>>());

    for out_dir in ["e1", "e2"] {
        ok(&afn(&["eval", "--config", "run.toml", "--data", "data", "--checkpoint", "run/checkpoint.json", "--out", out_dir], p));
    }
    for entry in std::fs::read_dir(p.join("e1")).unwrap() {
        let path = entry.unwrap().path();
        let twin = p.join("e2").join(path.file_name().unwrap());
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(twin).unwrap(), "{}", path.display());
    }
    let summary = std::fs::read_to_string(p.join("e1/summary.csv")).unwrap();
    assert!(summary.starts_with("metric,value\nanticipation_accuracy,"));
}

#[test]
fn oracle_eval_scores_current_actions_perfectly() {
    let dir = setup();
    let p = dir.path();
    ok(&afn(&["gen-data", "--config", "run.toml", "--seed", "2", "--out", "data"], p));
    let out = ok(&afn(&["eval", "--config", "run.toml", "--data", "data", "--oracle", "--out", "oracle"], p));
    assert!(out.contains("anticipation accuracy 1.000000"), "{out}");
    let bins = std::fs::read_to_string(p.join("oracle/jump_in.csv")).unwrap();
    let records = std::fs::read_to_string(p.join("oracle/records.csv")).unwrap().lines().count() - 1;
    // Bin labels may contain commas; count is third from the end.
    let binned: usize = bins.lines().skip(1).map(|l| l.rsplit(',').nth(2).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(binned, records);
}

#[test]
fn gradcheck_passes_and_catches_a_faulty_op() {
    let dir = setup();
    let p = dir.path();
    let out = ok(&afn(&["gradcheck", "--config", "run.toml", "--out", "gc"], p));
    assert!(out.contains("max_rel_err") && out.contains("conv3d"));
    let bad = afn(&["gradcheck", "--config", "run.toml", "--out", "gc", "--inject-faulty-op"], p);
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("faulty_square"));
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = setup();
    let p = dir.path();
    std::fs::write(p.join("bad.toml"), "schema_version = 1\n[train]\nstepz = 1\n").unwrap();
    let out = afn(&["gen-data", "--config", "bad.toml", "--out", "x"], p);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));

    std::fs::write(p.join("zero.toml"), "schema_version = 1\n[model]\nhidden = 0\n").unwrap();
    let out = afn(&["gen-data", "--config", "zero.toml", "--out", "x"], p);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.hidden"));

    let out = afn(&["train", "--config", "run.toml", "--data", "missing", "--out", "x"], p);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing"));

    assert_eq!(afn(&["frobnicate"], p).status.code(), Some(1));
    assert_eq!(afn(&["--help"], p).status.code(), Some(0));
}

#[test]
fn paper_shape_train_is_a_dry_run() {
    let dir = setup();
    let p = dir.path();
    ok(&afn(&["gen-data", "--config", "run.toml", "--seed", "1", "--out", "data"], p));
    std::fs::write(p.join("full.toml"), "schema_version = 1\nprofile = \"paper-shape\"\n").unwrap();
    let out = ok(&afn(&["train", "--config", "full.toml", "--data", "data", "--out", "run"], p));
    assert!(out.contains("X [6, 7, 112, 112]") && out.contains("M(h,w,c) [7, 7, 512]") && out.contains("W [256, 256]") && out.contains("s 512"), "{out}");
    assert!(!p.join("run/checkpoint.json").exists());
}
