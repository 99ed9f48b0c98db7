use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rasnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rasnet"))
        .args(args)
        .env_remove("RASNN_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json_lines(text: &str) -> Vec<serde_json::Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

const TINY: &[&str] = &[
    "--model", "micro", "--n", "1", "--widths", "4,8,8", "--dataset", "synth", "--resolution", "8",
    "--synth-train", "32", "--synth-test", "16", "--batch-size", "8", "--epochs", "2", "--milestones=",
    "--lr", "0.05",
];

fn with_tiny<'a>(cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![cmd];
    v.extend_from_slice(TINY);
    v.extend_from_slice(extra);
    v
}

#[test]
fn count_reports_parameter_totals() {
    let out = rasnet(&["count", "--attention", "ras"]);
    assert_eq!(code(&out), 0);
    let rows = json_lines(&stdout(&out));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["model"], "resnet164");
    assert_eq!(rows[0]["total_params"], 1_735_514);
    assert_eq!(rows[0]["params_millions"], 1.74);
}

#[test]
fn flops_states_the_cost_unit() {
    let out = rasnet(&["flops", "--model", "resnet83", "--attention", "se"]);
    assert_eq!(code(&out), 0);
    let row = &json_lines(&stdout(&out))[0];
    assert_eq!(row["cost_unit"], "multiply-add");
    assert!(row["attention_transform"].as_u64().unwrap() > 0);
}

#[test]
fn usage_errors_exit_with_2() {
    for args in [
        &["count", "--attention", "spatial"][..],
        &["count", "--unknown-flag", "3"],
        &["count", "--bn-mode", "sometimes"],
        &["count", "--n", "3"],
        &["eval"],
        &["frobnicate"],
    ] {
        assert_eq!(code(&rasnet(args)), 2, "{args:?}");
    }
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    fs::write(&file, "lr=0.1\nlearning_speed=3\n").unwrap();
    let out = rasnet(&["count", "--config", file.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning-speed"));
}

#[test]
fn runtime_failures_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing-here");
    let out = rasnet(&["train", "--dataset", "cifar10", "--data-dir", missing.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn flag_beats_file_beats_default_in_the_echo() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("run.cfg");
    fs::write(&file, "lr=0.05\nmomentum=0.8\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = rasnet(&[
        "count",
        "--config",
        file.to_str().unwrap(),
        "--lr",
        "0.1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let echo = fs::read_to_string(out_dir.join("config.txt")).unwrap();
    assert!(echo.lines().any(|l| l == "lr=0.1"));
    assert!(echo.lines().any(|l| l == "momentum=0.8"));
    assert!(echo.lines().any(|l| l == "weight-decay=0.0001"));
    assert!(out_dir.join("count.jsonl").exists());
}

#[test]
fn data_dir_defaults_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_rasnet"))
        .args(["count", "--out", dir.path().to_str().unwrap()])
        .env("RASNN_DATA_DIR", "/srv/cifar")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let echo = fs::read_to_string(dir.path().join("config.txt")).unwrap();
    assert!(echo.lines().any(|l| l == "data-dir=/srv/cifar"));
}

fn train_into(dir: &Path, extra: &[&str]) -> Output {
    let mut args = with_tiny("train", &["--out", dir.to_str().unwrap()]);
    args.extend_from_slice(extra);
    rasnet(&args)
}

fn strip_wall_time(history: &str) -> Vec<serde_json::Value> {
    json_lines(history)
        .into_iter()
        .map(|mut v| {
            v.as_object_mut().unwrap().remove("wall_time");
            v
        })
        .collect()
}

#[test]
fn train_then_eval_and_rerun_from_echo() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let out = train_into(&first, &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let history = fs::read_to_string(first.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 2);
    for key in ["epoch", "loss", "accuracy", "lr", "wall_time"] {
        assert!(json_lines(&history)[0].get(key).is_some(), "{key}");
    }

    // Re-running from the echoed record reproduces the run.
    let second = dir.path().join("second");
    let echo = first.join("config.txt");
    let out = rasnet(&["train", "--config", echo.to_str().unwrap(), "--out", second.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert_eq!(
        fs::read(first.join("final.ckpt")).unwrap(),
        fs::read(second.join("final.ckpt")).unwrap()
    );
    assert_eq!(
        strip_wall_time(&history),
        strip_wall_time(&fs::read_to_string(second.join("history.jsonl")).unwrap())
    );

    let ckpt = first.join("final.ckpt");
    let out = rasnet(&with_tiny("eval", &["--checkpoint", ckpt.to_str().unwrap()]));
    assert_eq!(code(&out), 0);
    let row = &json_lines(&stdout(&out))[0];
    assert_eq!(row["examples"], 16);

    // A checkpoint from a different architecture is rejected at runtime.
    let out = rasnet(&with_tiny("eval", &["--checkpoint", ckpt.to_str().unwrap(), "--attention", "se"]));
    assert_eq!(code(&out), 1);
}

#[test]
fn ablate_writes_csv_rows_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = rasnet(&with_tiny(
        "ablate",
        &["--axis", "connection", "--csv", "--out", dir.path().to_str().unwrap()],
    ));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json_lines(&stdout(&out)).len(), 5);
    let csv = fs::read_to_string(dir.path().join("ablate.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn bench_records_its_protocol() {
    let out = rasnet(&with_tiny(
        "bench",
        &["--fps-batch", "2", "--fps-warmup", "1", "--fps-reps", "3", "--fps-runs", "2"],
    ));
    assert_eq!(code(&out), 0);
    let rows = json_lines(&stdout(&out));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["fps_batch_size"], 2);
    assert_eq!(rows[0]["fps_reps"], 3);
    assert_eq!(rows[0]["threads"], 1);
}

#[test]
fn selftest_passes_and_is_deterministic() {
    let a = rasnet(&["selftest", "--grad-seeds", "2"]);
    let b = rasnet(&["selftest", "--grad-seeds", "2"]);
    assert_eq!(code(&a), 0, "{}", stdout(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).contains("PASS autodiff-nn/conv2d"));
}
