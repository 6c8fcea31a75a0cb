use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

const TINY: &str = r#"
[input]
height = 8
width = 8
channels = 1
classes = 4

[[layers]]
kind = "conv"
in_channels = 1
out_channels = 4
kernel = 3
activation = "relu"

[[layers]]
kind = "alf-conv"
in_channels = 4
out_channels = 8
kernel = 3

[[layers]]
kind = "global-avg-pool"

[[layers]]
kind = "linear"
in_features = 8
out_features = 4

[training]
epochs = 2
batch_size = 16
pr = 0.5
m = 4
seed = 3

[dataset]
kind = "synthetic"
train_size = 192
test_size = 96
"#;

fn alf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alf"))
        .args(args)
        .env("ALF_LOG", "error")
        .output()
        .expect("spawn alf")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn accuracy_line(out: &Output) -> f64 {
    let stdout = String::from_utf8_lossy(&out.stdout);
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("accuracy: "))
        .unwrap_or_else(|| panic!("no accuracy in {stdout:?}"))
        .parse()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

/// Largest `c` whose ALF parameter count stays strictly below the standard layer.
fn code_max_brute(ci: u64, co: u64, k: u64) -> u64 {
    (0..=co).filter(|&c| c * (ci * k * k + co) <= ci * co * k * k).max().unwrap()
}

#[test]
fn analyze_reports_code_max() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
[input]
height = 16
width = 16
channels = 64
classes = 10

[[layers]]
kind = "alf-conv"
in_channels = 64
out_channels = 128
kernel = 3
padding = 1

[[layers]]
kind = "global-avg-pool"

[[layers]]
kind = "linear"
in_features = 128
out_features = 10
"#,
    );
    let out = alf(&["analyze", "--config", s(&cfg), "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("cost.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|&h| h == "c_code_max").unwrap();
    let expected = code_max_brute(64, 128, 3);
    assert_eq!(expected, 104);
    assert_eq!(row[col], expected.to_string());
    assert!(lines.next().unwrap().starts_with("total,"));
}

#[test]
fn analyze_is_fast_on_deep_descriptions() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("[input]\nheight = 32\nwidth = 32\nchannels = 64\nclasses = 10\n");
    for _ in 0..100 {
        text.push_str(
            "[[layers]]\nkind = \"alf-conv\"\nin_channels = 64\nout_channels = 64\nkernel = 3\npadding = 1\n",
        );
    }
    text.push_str("[[layers]]\nkind = \"global-avg-pool\"\n[[layers]]\nkind = \"linear\"\nin_features = 64\nout_features = 10\n");
    let cfg = write_config(dir.path(), &text);
    let start = Instant::now();
    let out = alf(&["analyze", "--config", s(&cfg), "--out-dir", s(dir.path())]);
    assert_eq!(code(&out), 0);
    assert!(start.elapsed().as_secs_f64() < 1.0);
    let csv = std::fs::read_to_string(dir.path().join("cost.csv")).unwrap();
    assert_eq!(csv.lines().count(), 102);
}

#[test]
fn zero_epochs_writes_empty_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = alf(&["train", "--config", s(&cfg), "--out-dir", s(dir.path()), "--epochs", "0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, "epoch,task_loss,rec_loss,accuracy,masked_count,gain\n");
}

#[test]
fn eval_of_exported_container_matches_training_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    let train = alf(&["train", "--config", s(&cfg), "--out-dir", s(&run)]);
    assert_eq!(code(&train), 0, "{}", String::from_utf8_lossy(&train.stderr));
    let trained = accuracy_line(&train);

    let ck = run.join("checkpoint.json");
    let export = alf(&["export", "--checkpoint", s(&ck), "--out-dir", s(&run)]);
    assert_eq!(code(&export), 0, "{}", String::from_utf8_lossy(&export.stderr));
    let model = run.join("model.alf1");
    let eval = alf(&["eval", "--model", s(&model), "--config", s(&cfg), "--out-dir", s(&run)]);
    assert_eq!(code(&eval), 0, "{}", String::from_utf8_lossy(&eval.stderr));
    assert!((accuracy_line(&eval) - trained).abs() <= 1e-6);
    assert!(run.join("eval.csv").exists());

    // the metrics row reports the same number
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let last: Vec<&str> = metrics.lines().last().unwrap().split(',').collect();
    assert!((last[3].parse::<f64>().unwrap() - trained).abs() <= 1e-6);
}

#[test]
fn artifacts_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        assert_eq!(code(&alf(&["train", "--config", s(&cfg), "--out-dir", s(&run)])), 0);
        let ck = run.join("checkpoint.json");
        assert_eq!(code(&alf(&["compress", "--checkpoint", s(&ck), "--out-dir", s(&run)])), 0);
        let read = |f: &str| std::fs::read(run.join(f)).unwrap();
        outputs.push((read("metrics.csv"), read("model.alf1"), read("cost.csv"), read("checkpoint.json")));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn overrides_change_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let run = dir.path().join("run");
    let out = alf(&[
        "train", "--config", s(&cfg), "--out-dir", s(&run), "--epochs", "1", "--pr", "0.75", "--m", "2",
        "--lambda-rec", "0.5", "--seed", "9",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let row: Vec<&str> = metrics.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(metrics.lines().count(), 2);
    // floor(0.75 * 8) = 6 of 8 code channels masked
    assert_eq!(row[4], "6");
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&alf(&["train", "--no-such-flag"])), 2);
    assert_eq!(code(&alf(&["frobnicate"])), 2);
    assert_eq!(code(&alf(&["train", "--config", "/nonexistent/run.toml"])), 3);

    let bad_chain = write_config(dir.path(), &TINY.replace("in_features = 8", "in_features = 7"));
    assert_eq!(code(&alf(&["train", "--config", s(&bad_chain)])), 3);

    let cfg = write_config(dir.path(), TINY);
    assert_eq!(code(&alf(&["train", "--config", s(&cfg), "--dataset", "cifar10"])), 3);

    let junk = dir.path().join("junk.alf1");
    std::fs::write(&junk, b"not a container").unwrap();
    assert_eq!(code(&alf(&["eval", "--model", s(&junk), "--config", s(&cfg)])), 4);
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&alf(&["export", "--checkpoint", s(&missing), "--out-dir", s(dir.path())])), 4);
}
