use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set", "model.image_h=16",
    "--set", "model.image_w=32",
    "--set", "model.embed_dim=16",
    "--set", "model.heads=2",
    "--set", "model.depth=2",
    "--set", "data.synth.height=16",
    "--set", "data.synth.width=32",
    "--set", "data.synth.n_identities=3",
    "--set", "data.synth.train_per_id=2",
    "--set", "data.synth.query_per_id=1",
    "--set", "data.synth.gallery_per_id=2",
    "--set", "train.batch_p=2",
    "--set", "train.batch_k=2",
    "--set", "train.steps=4",
];

fn coen(runs: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coen"))
        .env("COEN_RUN_ROOT", runs)
        .args(args)
        .output()
        .expect("spawn coen")
}

fn with_tiny<'a>(head: &[&'a str]) -> Vec<&'a str> {
    head.iter().copied().chain(TINY.iter().copied()).collect()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn synth_train_eval_rank_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let runs = tmp.path().join("runs");
    let data_s = data.to_str().unwrap();

    let o = coen(&runs, &with_tiny(&["synth", "--out", data_s]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("train/tir").is_dir());

    let root = format!("data.root={data_s:?}");
    let mut args = with_tiny(&["train", "--name", "t", "--print-every", "2", "--set", &root]);
    let o = coen(&runs, &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("step=")).count(), 2);
    assert!(runs.join("t/ckpt_000004.bin").is_file());
    assert!(runs.join("t/config.echo").is_file());

    args[0] = "eval";
    args.retain(|a| *a != "--print-every" && *a != "2");
    let o = coen(&runs, &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = std::fs::read_to_string(runs.join("t/metrics.txt")).unwrap();
    assert_eq!(metrics, stdout(&o));
    assert!(metrics.contains("RGB-NIR-TIR-Proxy"));
    assert!(runs.join("t/distances.txt").is_file());

    args[0] = "rank";
    args.extend(["--top", "2", "--mode", "TIR"]);
    let o = coen(&runs, &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // Three query samples, two matches each.
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().all(|l| l.matches('(').count() == 2));
}

#[test]
fn config_errors_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = coen(tmp.path(), &["train", "--set", "model.no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
    let o = coen(tmp.path(), &["train", "--set", "cem.gamma=1.5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_data_and_checkpoints_exit_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let absent = format!("data.root={:?}", tmp.path().join("absent").to_str().unwrap());
    let o = coen(tmp.path(), &with_tiny(&["train", "--set", &absent]));
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::create_dir_all(tmp.path().join("empty")).unwrap();
    let o = coen(tmp.path(), &with_tiny(&["eval", "--name", "empty"]));
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn config_file_and_overrides_combine() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("run.toml");
    std::fs::write(&file, "name = \"fromfile\"\nseed = 5\ntrain.steps = 2\n").unwrap();
    let mut args = vec!["train", "--config", file.to_str().unwrap(), "--print-every", "0"];
    args.extend(TINY.iter().take(TINY.len() - 2));
    let o = coen(tmp.path(), &args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let echo = std::fs::read_to_string(tmp.path().join("fromfile/config.echo")).unwrap();
    assert!(echo.contains("seed = 5"));
    assert!(echo.contains("train.steps = 2"));
    assert!(echo.contains("model.embed_dim = 16"));
}

#[test]
fn gradcheck_subset_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let o = coen(tmp.path(), &["gradcheck", "--max-entries", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("ops: ") && text.contains("model: "));
    assert!(text.lines().filter(|l| l.ends_with("PASS")).count() == 2);
}
