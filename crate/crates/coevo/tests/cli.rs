mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{read, TINY};

fn coevo(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coevo")).args(args).current_dir(cwd).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn synth_is_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = coevo(&["synth", "--seed", "7", "--out", out], dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = read(&dir.path().join("a/events.tsv"));
    assert_eq!(a, read(&dir.path().join("b/events.tsv")));
    assert_eq!(a.lines().count(), 40_000);
    assert_eq!(read(&dir.path().join("a/catalog.tsv")), read(&dir.path().join("b/catalog.tsv")));
    let other = coevo(&["synth", "--seed=8", "--out", "c"], dir.path());
    assert_eq!(code(&other), 0);
    assert_ne!(a, read(&dir.path().join("c/events.tsv")));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    let unknown = coevo(&["warmup", "--config", "tiny.cfg", "--world.usres=3"], dir.path());
    assert_eq!(code(&unknown), 1);
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("world.usres"));
    let bad_value = coevo(&["warmup", "--config", "tiny.cfg", "--index.gamma=2"], dir.path());
    assert_eq!(code(&bad_value), 1);
    let missing = coevo(&["warmup", "--config", "absent.cfg"], dir.path());
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("absent.cfg"));
    let no_run = coevo(&["eval", "--run", "nowhere"], dir.path());
    assert_eq!(code(&no_run), 2);
    assert!(String::from_utf8_lossy(&no_run.stderr).contains("nowhere"));
    std::fs::write(dir.path().join("ev.tsv"), "0\t1\t5\t1,0,0\n0\t2\t4\t1,0,0\n").unwrap();
    std::fs::write(dir.path().join("cat.tsv"), "0\t1\n1\t2\n2\t3\n").unwrap();
    let bad_data = coevo(&["warmup", "--events", "ev.tsv", "--catalog", "cat.tsv"], dir.path());
    assert_eq!(code(&bad_data), 2);
    assert!(String::from_utf8_lossy(&bad_data.stderr).contains("ev.tsv:2"));
}

#[test]
fn coevolve_eval_inspect_and_entropy_report() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    let run = coevo(&["coevolve", "--config", "tiny.cfg", "--out", "run", "--seed", "3", "--run.dynamic_steps=30"], dir.path());
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    assert!(read(&dir.path().join("run/manifest.txt")).contains("run.dynamic_steps = 30"));
    let eval = coevo(&["eval", "--run", "run", "--report"], dir.path());
    assert_eq!(code(&eval), 0);
    let stdout = String::from_utf8_lossy(&eval.stdout).into_owned();
    assert!(stdout.starts_with("step,phase,recall@5,recall@10,ndcg@5,ndcg@10"));
    assert!(dir.path().join("run/summary.csv").is_file());
    let inspect = coevo(&["inspect-index", "--run", "run"], dir.path());
    assert_eq!(code(&inspect), 0);
    assert!(String::from_utf8_lossy(&inspect.stdout).contains("aliases per item"));
    let entropy = coevo(&["entropy-report", "--run", "run", "--all-aliases"], dir.path());
    assert_eq!(code(&entropy), 0);
    assert!(String::from_utf8_lossy(&entropy.stdout).starts_with("level,H_warmup,H_final"));
}

#[test]
fn gradcheck_reports_every_graph() {
    let dir = tempfile::tempdir().unwrap();
    let out = coevo(&["gradcheck", "--seeds", "2"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    for name in ["matmul", "attention_causal", "user_loss", "item_loss", "kl_regularizer", "xtr_loss"] {
        assert!(text.lines().any(|l| l.starts_with(name) && l.ends_with("ok")), "{name}\n{text}");
    }
}
