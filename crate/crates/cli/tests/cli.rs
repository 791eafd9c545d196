use std::path::Path;
use std::process::{Command, Output};

use etr_core::metrics_io::{config_digest, parse_config, save_checkpoint, Checkpoint};
use etr_core::policy::PolicyParams;
use etr_core::trainer::OptimizerState;

fn etr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_etr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn theory_exits_zero() {
    let o = etr(&["theory"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("all bounds hold"));
}

#[test]
fn gradcheck_lists_every_variant() {
    let o = etr(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    for m in ["grpo", "cliphigh", "etr-micro", "etr-macro", "etr-inverse"] {
        assert!(text.contains(m), "{m} missing from\n{text}");
    }
}

#[test]
fn train_one_step_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/run");
    let o = etr(&["train", "--out", path_str(&out), "--override", "steps=1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(out.join("checkpoint.bin").exists());
    assert!(out.join("config.txt").exists());
}

#[test]
fn default_config_completes_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = etr(&["train", "--out", path_str(out)]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let csv = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(csv, std::fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(String::from_utf8_lossy(&csv).lines().count(), 301);
    for plot in ["objective", "entropy", "clip_frac", "resp_len", "pass_rate"] {
        assert!(a.join(format!("{plot}.svg")).exists(), "{plot}.svg");
    }
    assert_eq!(
        std::fs::read(a.join("checkpoint.bin")).unwrap(),
        std::fs::read(b.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.cfg");
    assert_eq!(
        etr(&["train", "--config", path_str(&missing)]).status.code(),
        Some(2)
    );
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "lambda1 = -0.1\n").unwrap();
    let o = etr(&["train", "--config", path_str(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 1"));
    assert_eq!(etr(&["train", "--override", "steps=0"]).status.code(), Some(2));
    assert_eq!(etr(&["compare", "--methods", "grpo,ppo"]).status.code(), Some(2));
    assert_eq!(etr(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn compare_runs_every_pair() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cmp");
    let o = etr(&[
        "compare",
        "--out",
        path_str(&out),
        "--methods",
        "grpo,etr",
        "--seeds",
        "1..2",
        "--jobs",
        "2",
        "--override",
        "steps=4",
        "--override",
        "eval_every=2",
        "--override",
        "eval_prompts=4",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let runs = std::fs::read_to_string(out.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 4);
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2);
    for m in ["grpo", "etr"] {
        for s in [1, 2] {
            assert!(out.join(m).join(format!("seed{s}")).join("metrics.csv").exists());
        }
    }
}

fn fresh_checkpoint(dir: &Path, config_text: &str) -> (std::path::PathBuf, std::path::PathBuf) {
    let config = parse_config(config_text).unwrap();
    let params = PolicyParams::init(config.policy_shape(), config.seed, config.init_scale).unwrap();
    let ckpt = Checkpoint {
        params: params.values().to_vec(),
        optimizer: OptimizerState::zeros(params.len()),
        digest: config_digest(&config),
    };
    let ckpt_path = dir.join("fresh.bin");
    save_checkpoint(&ckpt_path, &ckpt).unwrap();
    let cfg_path = dir.join("eval.cfg");
    std::fs::write(&cfg_path, config_text).unwrap();
    (ckpt_path, cfg_path)
}

fn weighted_row(text: &str) -> (f64, f64) {
    let line = text.lines().find(|l| l.starts_with("weighted")).unwrap();
    let v: Vec<f64> = line
        .split_whitespace()
        .skip(1)
        .map(|x| x.parse().unwrap())
        .collect();
    (v[0], v[1])
}

#[test]
fn eval_fresh_policy_on_digit_sum() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, cfg) = fresh_checkpoint(dir.path(), "suite = digit_sum:2:1\n");
    let o = etr(&[
        "eval",
        "--checkpoint",
        path_str(&ckpt),
        "--config",
        path_str(&cfg),
        "--n",
        "32",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (mean, _) = weighted_row(&stdout(&o));
    let se = (0.1f64 * 0.9 / (64.0 * 32.0)).sqrt();
    assert!((mean - 0.1).abs() <= 3.0 * se, "mean@32 {mean}");

    let o = etr(&[
        "eval",
        "--checkpoint",
        path_str(&ckpt),
        "--config",
        path_str(&cfg),
        "--n",
        "1",
    ]);
    let (mean, best) = weighted_row(&stdout(&o));
    assert_eq!(mean, best);
}

#[test]
fn eval_checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.bin");
    assert_eq!(
        etr(&["eval", "--checkpoint", path_str(&missing)]).status.code(),
        Some(2)
    );
    let garbage = dir.path().join("garbage.bin");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(
        etr(&["eval", "--checkpoint", path_str(&garbage)]).status.code(),
        Some(2)
    );

    let (ckpt, _) = fresh_checkpoint(dir.path(), "seed = 4\n");
    // default config has seed 1, so the digest differs
    let warn = etr(&["eval", "--checkpoint", path_str(&ckpt), "--n", "1"]);
    assert_eq!(warn.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&warn.stderr).contains("warning"));
    let strict = etr(&["eval", "--checkpoint", path_str(&ckpt), "--n", "1", "--strict"]);
    assert_eq!(strict.status.code(), Some(2));
}
