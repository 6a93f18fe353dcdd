use std::path::Path;
use std::process::{Command, Output};

fn fedalt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedalt"))
        .args(args)
        .env_remove("FEDLORA_SEED")
        .output()
        .unwrap()
}

fn text(o: &Output) -> (String, String) {
    (String::from_utf8_lossy(&o.stdout).into_owned(), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn small_run(out: &Path, extra: &[&str]) -> Output {
    let out = out.to_str().unwrap();
    let mut args = vec!["--clients", "3", "--rounds", "2", "--local-epochs", "1", "--out", out];
    args.extend(extra);
    fedalt(&args)
}

#[test]
fn help_lists_flags() {
    let (stdout, _) = text(&fedalt(&["--help"]));
    for flag in ["--config", "--strategy", "--clients", "--rounds", "--local-epochs", "--rank", "--lora-alpha", "--het", "--seeds", "--out", "--theory-mode", "--model", "--jobs"] {
        assert!(stdout.contains(flag), "missing {flag}");
    }
}

#[test]
fn run_writes_metrics_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = small_run(dir.path(), &["--strategy", "fedalt,local", "--seeds", "0,1"]);
    let (stdout, stderr) = text(&o);
    assert!(o.status.success(), "{stderr}");
    assert!(stdout.contains("Average"), "{stdout}");
    let metrics = std::fs::read_to_string(dir.path().join("metrics_fedalt.csv")).unwrap();
    assert!(metrics.starts_with("seed,strategy,round,client,split,loss,accuracy\n"));
    assert!(metrics.lines().any(|l| l.starts_with("1,fedalt,2,2,eval,")));
    assert!(dir.path().join("metrics_local.csv").exists());
    assert!(dir.path().join("summary.csv").exists());
}

#[test]
fn seed_env_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_fedalt"))
        .args(["--clients", "2", "--rounds", "1", "--local-epochs", "1", "--strategy", "fedit", "--out", dir.path().to_str().unwrap()])
        .env("FEDLORA_SEED", "7")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", text(&o).1);
    let metrics = std::fs::read_to_string(dir.path().join("metrics_fedit.csv")).unwrap();
    assert!(metrics.lines().skip(1).all(|l| l.starts_with("7,")));
}

#[test]
fn attention_model_runs() {
    let dir = tempfile::tempdir().unwrap();
    let o = small_run(dir.path(), &["--model", "attn", "--rank", "4", "--strategy", "fedalt"]);
    assert!(o.status.success(), "{}", text(&o).1);
}

#[test]
fn unknown_config_key_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "clients = 3\n[schedule]\nroundz = 2\n").unwrap();
    let o = fedalt(&["--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(text(&o).1.contains("roundz"), "{}", text(&o).1);
}

#[test]
fn oversized_rank_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = small_run(dir.path(), &["--rank", "64"]);
    assert!(!o.status.success());
    assert!(text(&o).1.contains("lora.rank"), "{}", text(&o).1);
}

#[test]
fn single_client_fedalt_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedalt(&["--clients", "1", "--strategy", "fedalt", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(text(&o).1.contains("Rest-of-World"), "{}", text(&o).1);
}

#[test]
fn compare_two_strategies() {
    let dir = tempfile::tempdir().unwrap();
    let o = small_run(dir.path(), &["--strategy", "fedalt,fedit", "--seeds", "0,1,2"]);
    assert!(o.status.success(), "{}", text(&o).1);
    let a = dir.path().join("metrics_fedalt.csv");
    let b = dir.path().join("metrics_fedit.csv");
    let o = fedalt(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    let (stdout, stderr) = text(&o);
    assert!(o.status.success(), "{stderr}");
    assert!(stdout.contains("fedalt >= fedit:"), "{stdout}");
}

#[test]
fn theory_subcommand_passes() {
    let o = fedalt(&["theory", "--seeds", "0,1"]);
    let (stdout, stderr) = text(&o);
    assert!(o.status.success(), "{stdout}{stderr}");
    assert_eq!(stdout.matches("PASS").count(), 2, "{stdout}");
}

#[test]
fn theory_mode_flag_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedalt(&["--theory-mode", "--seeds", "3", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o).1);
    assert!(dir.path().join("theory_trace_seed3.csv").exists());
}

#[test]
fn divergent_theory_run_exits_nonzero() {
    let o = fedalt(&["theory", "--lr", "1e6"]);
    let (stdout, _) = text(&o);
    assert!(!o.status.success());
    assert!(stdout.contains("FAIL at round"), "{stdout}");
}

#[test]
fn gradcheck_passes() {
    let o = fedalt(&["gradcheck", "--seeds", "2"]);
    let (stdout, _) = text(&o);
    assert!(o.status.success(), "{stdout}");
    assert!(stdout.contains("models checked: 10"));
}
