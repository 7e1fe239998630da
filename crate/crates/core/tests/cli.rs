//! The `iris` binary: subcommands, run directories and exit codes.

use std::path::Path;
use std::process::{Command, Output};

const FAST: [&str; 10] = [
    "--set",
    "world.n_images=60",
    "--set",
    "pretrain.n_biased=500",
    "--set",
    "pretrain.epochs=20",
    "--set",
    "train.sft_epochs=5",
    "--set",
    "eval.samples_per_context=2",
];

fn iris(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iris"))
        .args(args)
        .env("IRIS_RUN_ROOT", root)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn with_fast<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(&FAST);
    v
}

#[test]
fn run_all_then_eval_check() {
    let tmp = tempfile::tempdir().unwrap();
    let out = iris(tmp.path(), &with_fast(&["run-all", "--seed", "7"]));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 4);

    let run = tmp.path().join("seed-7");
    for f in ["config.toml", "world.json", "metrics.csv", "checkpoints/round_2.ckpt", "pairs/round_1.jsonl"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();

    let out = iris(tmp.path(), &["eval", "--seed", "7", "--check"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(String::from_utf8(out.stdout).unwrap(), metrics);

    let ckpt = run.join("checkpoints/base.ckpt");
    let out = iris(tmp.path(), &["eval", "--seed", "7", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&out), 0);

    // Existing runs are not clobbered without --overwrite.
    assert_eq!(code(&iris(tmp.path(), &with_fast(&["run-all", "--seed", "7"]))), 2);
    let out = iris(tmp.path(), &with_fast(&["run-all", "--seed", "7", "--overwrite"]));
    assert_eq!(code(&out), 0);
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap(), metrics);

    // A tampered metrics row fails verification.
    let mut lines: Vec<String> = metrics.lines().map(str::to_string).collect();
    lines[1].push('7');
    std::fs::write(run.join("metrics.csv"), lines.join("\n") + "\n").unwrap();
    assert_eq!(code(&iris(tmp.path(), &["eval", "--seed", "7", "--check"])), 4);
}

#[test]
fn staged_commands_match_run_all() {
    let tmp = tempfile::tempdir().unwrap();
    let staged = tmp.path().join("staged");
    let dir = staged.to_str().unwrap();
    assert_eq!(code(&iris(tmp.path(), &with_fast(&["gen-world", "--run-dir", dir]))), 0);
    // Later stages read the config snapshot and refuse new overrides.
    assert_eq!(code(&iris(tmp.path(), &["pretrain", "--run-dir", dir, "--set", "train.lr=2.0"])), 2);
    for args in [
        vec!["pretrain", "--run-dir", dir],
        vec!["sft", "--run-dir", dir],
        vec!["round", "--round", "1", "--run-dir", dir],
        vec!["round", "--round", "2", "--run-dir", dir],
    ] {
        let out = iris(tmp.path(), &args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let all = tmp.path().join("all");
    assert_eq!(code(&iris(tmp.path(), &with_fast(&["run-all", "--run-dir", all.to_str().unwrap()]))), 0);
    for f in ["metrics.csv", "pairs/round_1.jsonl", "pairs/round_2.jsonl", "checkpoints/round_2.ckpt"] {
        assert_eq!(std::fs::read(staged.join(f)).unwrap(), std::fs::read(all.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    assert_eq!(code(&iris(tmp.path(), &["pretrain", "--run-dir", missing.to_str().unwrap()])), 3);
    assert_eq!(code(&iris(tmp.path(), &["run-all", "--set", "sift.k=1"])), 2);
    assert_eq!(code(&iris(tmp.path(), &["run-all", "--set", "no.such=1"])), 2);
    assert_eq!(code(&iris(tmp.path(), &["run-all", "--config", missing.to_str().unwrap()])), 3);
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nrounds = 0\n").unwrap();
    assert_eq!(code(&iris(tmp.path(), &["run-all", "--config", bad.to_str().unwrap()])), 2);
    assert_eq!(code(&iris(tmp.path(), &["no-such-command"])), 64);
    assert_eq!(code(&iris(tmp.path(), &["--help"])), 0);
}

#[test]
fn verify_theory_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = iris(tmp.path(), &["verify-theory"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("[PASS]")).count(), 4);
}

#[test]
fn gamma_sweep_has_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("gamma.csv");
    let mut args = with_fast(&["sweep", "gamma", "--out", csv.to_str().unwrap()]);
    args.extend_from_slice(&["--set", "train.rounds=1"]);
    let out = iris(tmp.path(), &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 10);
    assert!(lines[0].starts_with("sweep,value,seed,round"));
    let gammas: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(gammas, ["0", "0.1", "0.3", "0.5", "0.7", "1", "1.5", "5", "20"]);
}
