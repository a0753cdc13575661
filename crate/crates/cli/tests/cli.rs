use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ssmkt::checkpoint;
use ssmkt::config::parse_key_values;
use ssmkt::model::{KtModel, ModelConfig};
use ssmkt::{ParamStore, Rng};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn ssmkt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssmkt"))
        .args(args)
        .env_remove("SSMKT_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ssmkt(args);
    assert!(
        out.status.success(),
        "ssmkt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn key_values(path: &Path) -> std::collections::BTreeMap<String, String> {
    parse_key_values(&fs::read_to_string(path).unwrap(), "test").unwrap()
}

/// Small synthetic dataset prepared into `dir/data`.
fn small_data(dir: &Path) -> PathBuf {
    let csv = dir.join("synth.csv");
    let data = dir.join("data");
    ok(&[
        "synth",
        "--out",
        s(&csv),
        "--students",
        "40",
        "--len",
        "20",
        "--seed",
        "3",
    ]);
    ok(&[
        "prepare",
        "--input",
        s(&csv),
        "--out",
        s(&data),
        "--seed",
        "3",
    ]);
    data
}

fn tiny_train(data: &Path, run: &Path, epochs: &str, extra: &[&str]) -> String {
    let mut args = vec![
        "train",
        "--data",
        s(data),
        "--out",
        s(run),
        "--d-model",
        "8",
        "--layers",
        "1",
        "--epochs",
        epochs,
        "--batch",
        "8",
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn bad_header_exits_2_with_message() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ssmkt(&[
        "prepare",
        "--input",
        s(&fixture("bad_header.csv")),
        "--out",
        s(&tmp.path().join("d")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("header"), "{err}");
}

#[test]
fn usage_error_exits_2_and_missing_input_exits_1() {
    assert_eq!(ssmkt(&["prepare"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let out = ssmkt(&[
        "prepare",
        "--input",
        s(&tmp.path().join("nope.csv")),
        "--out",
        s(&tmp.path().join("d")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn three_row_fixture_gives_one_sequence() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    ok(&[
        "prepare",
        "--input",
        s(&fixture("three_rows.csv")),
        "--out",
        s(&out),
    ]);
    let vocab = fs::read_to_string(out.join("vocab.csv")).unwrap();
    assert_eq!(vocab.lines().count() - 1, 3);
    let rows: usize = ["train", "val", "test"]
        .iter()
        .map(|n| {
            fs::read_to_string(out.join(format!("{n}.csv")))
                .unwrap()
                .lines()
                .count()
                - 1
        })
        .sum();
    assert_eq!(rows, 3);
    let prep = ssmkt::data::PreparedData::load(&out).unwrap();
    let windows: Vec<_> = ["train", "val", "test"]
        .iter()
        .flat_map(|n| prep.split(n).unwrap().to_vec())
        .collect();
    assert_eq!(windows.len(), 1);
    assert_eq!(windows[0].num_valid(), 3);
}

#[test]
fn prepare_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("synth.csv");
    ok(&["synth", "--out", s(&csv), "--students", "30", "--len", "15"]);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["prepare", "--input", s(&csv), "--out", s(&a), "--seed", "5"]);
    ok(&["prepare", "--input", s(&csv), "--out", s(&b), "--seed", "5"]);
    ok(&["prepare", "--input", s(&csv), "--out", s(&b), "--seed", "5"]);
    for f in ["meta.txt", "vocab.csv", "train.csv", "val.csv", "test.csv"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let run = tmp.path().join("run");
    tiny_train(&data, &run, "2", &["--lr", "0", "--seed", "9"]);

    let kv = key_values(&run.join("config.txt"));
    let mut cfg = ModelConfig::new(0, 0);
    cfg.apply(&kv).unwrap();
    let mut init = ParamStore::<f64>::new();
    KtModel::new(cfg, &mut init, &mut Rng::new(9)).unwrap();
    let trained: ParamStore<f64> = checkpoint::load(&run.join("best.ckpt")).unwrap();
    assert_eq!(trained.len(), init.len());
    for ((_, a), (_, b)) in init.iter().zip(trained.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
    }
}

#[test]
fn same_seed_gives_identical_metrics_log() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    tiny_train(&data, &a, "2", &["--seed", "4"]);
    tiny_train(&data, &b, "2", &["--seed", "4"]);
    let log = fs::read(a.join("metrics.log")).unwrap();
    assert!(!log.is_empty());
    assert_eq!(log, fs::read(b.join("metrics.log")).unwrap());
}

#[test]
fn seed_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let run = tmp.path().join("run");
    let status = Command::new(env!("CARGO_BIN_EXE_ssmkt"))
        .args([
            "train",
            "--data",
            s(&data),
            "--out",
            s(&run),
            "--d-model",
            "8",
            "--layers",
            "1",
            "--epochs",
            "1",
        ])
        .env("SSMKT_SEED", "21")
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    assert_eq!(key_values(&run.join("config.txt"))["seed"], "21");
}

#[test]
fn ablation_flags_are_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let run = tmp.path().join("run");
    tiny_train(&data, &run, "1", &["--no-ffn", "--no-rasch"]);
    let kv = key_values(&run.join("config.txt"));
    assert_eq!(kv["use_ffn"], "false");
    assert_eq!(kv["use_rasch"], "false");
}

#[test]
fn eval_on_val_matches_training_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let run = tmp.path().join("run");
    tiny_train(&data, &run, "3", &[]);
    ok(&[
        "eval",
        "--run",
        s(&run),
        "--data",
        s(&data),
        "--split",
        "val",
    ]);
    let summary = key_values(&run.join("summary.txt"));
    let eval = key_values(&run.join("eval_val.txt"));
    assert_eq!(summary["val_auc"], eval["auc"]);
    assert_eq!(summary["val_acc"], eval["acc"]);
}

#[test]
fn single_class_split_reports_undefined_auc() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("ones.csv");
    let mut text = String::from("student_id,question_id,concept_id,response\n");
    for st in 0..12 {
        for t in 0..6 {
            text.push_str(&format!("s{st},q{},c{},1\n", t % 4, t % 2));
        }
    }
    fs::write(&csv, text).unwrap();
    let data = tmp.path().join("data");
    ok(&["prepare", "--input", s(&csv), "--out", s(&data)]);
    let run = tmp.path().join("run");
    tiny_train(&data, &run, "1", &[]);
    let out = ok(&["eval", "--run", s(&run), "--data", s(&data)]);
    assert!(out.contains("AUC undefined"), "{out}");
    assert_eq!(key_values(&run.join("eval_test.txt"))["auc"], "undefined");
}

#[test]
fn explain_writes_grids_and_top_k() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let run = tmp.path().join("run");
    tiny_train(&data, &run, "1", &[]);
    let out = ok(&[
        "explain",
        "--run",
        s(&run),
        "--data",
        s(&data),
        "--student",
        "0",
        "--layer",
        "0",
        "--channels",
        "0,3",
    ]);
    assert!(out.contains("row i=0"), "{out}");
    let dir = run.join("explain");
    for m in [0, 3] {
        let grid = fs::read_to_string(dir.join(format!("sequence_layer0_ch{m}.csv"))).unwrap();
        let lines: Vec<&str> = grid.lines().collect();
        assert!(lines[0].starts_with("j0,j1"));
        assert_eq!(
            lines[1].chars().filter(|&c| c != ',').count(),
            0,
            "row 0 is empty"
        );
        assert!(
            fs::read_to_string(dir.join(format!("sequence_layer0_ch{m}.svg")))
                .unwrap()
                .starts_with("<svg")
        );
    }

    let out = ok(&[
        "explain",
        "--run",
        s(&run),
        "--data",
        s(&data),
        "--student",
        "0",
        "--level",
        "exercise",
        "--target",
        "5",
        "--top-k",
        "3",
    ]);
    assert!(out.contains("top 3"), "{out}");
    let top = fs::read_to_string(dir.join("exercise_layer0_t5_top3.csv")).unwrap();
    let lines: Vec<&str> = top.lines().collect();
    assert_eq!(lines[0], "rank,j,label,weight");
    assert_eq!(lines.len(), 4);
    // Labels read `concept(response)`.
    let label = lines[1].split(',').nth(2).unwrap();
    assert!(label.ends_with("(0)") || label.ends_with("(1)"), "{label}");
}

#[test]
fn explain_rejects_out_of_range_channel() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let run = tmp.path().join("run");
    tiny_train(&data, &run, "1", &[]);
    let out = ssmkt(&[
        "explain",
        "--run",
        s(&run),
        "--data",
        s(&data),
        "--student",
        "0",
        "--channels",
        "999",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_writes_csv_with_header() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    ok(&[
        "bench",
        "--seqlens",
        "8,16",
        "--d-model",
        "8",
        "--layers",
        "1",
        "--repeats",
        "1",
        "--out",
        s(&out),
    ]);
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "model,T,train_step_s,infer_step_s,tape_scalars,params"
    );
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("mamba,8,"));
    assert!(fs::read_to_string(out.join("bench.txt"))
        .unwrap()
        .contains("attention"));
}

#[test]
fn artifacts_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    // The prepared dataset re-saves byte for byte.
    let again = tmp.path().join("again");
    ssmkt::data::PreparedData::load(&data)
        .unwrap()
        .save(&again)
        .unwrap();
    for f in ["meta.txt", "vocab.csv", "train.csv", "val.csv", "test.csv"] {
        assert_eq!(
            fs::read(data.join(f)).unwrap(),
            fs::read(again.join(f)).unwrap(),
            "{f}"
        );
    }
    // A run's config file feeds back into train.
    let run = tmp.path().join("run");
    tiny_train(&data, &run, "1", &["--seed", "2"]);
    let rerun = tmp.path().join("rerun");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&rerun),
        "--config",
        s(&run.join("config.txt")),
    ]);
    assert_eq!(
        fs::read(run.join("config.txt")).unwrap(),
        fs::read(rerun.join("config.txt")).unwrap()
    );
    assert_eq!(
        fs::read(run.join("metrics.log")).unwrap(),
        fs::read(rerun.join("metrics.log")).unwrap()
    );
}
