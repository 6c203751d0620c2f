mod common;

use coevo::formats;
use coevo::harness::{self, RunKind, CHECKPOINT, INDEX, MANIFEST, METRICS};
use coevo::RunConfig;
use common::{read, tiny_config};

#[test]
fn coevolve_then_eval_populates_every_column() {
    let dir = tempfile::tempdir().unwrap();
    let out = harness::run(&tiny_config(3), RunKind::Coevolve, dir.path()).unwrap();
    assert_eq!(out.invariant_checks, 60);
    let last = out.final_row.clone().unwrap();
    let metrics = read(&dir.path().join(METRICS));
    let mut lines = metrics.lines();
    let header = lines.next().unwrap();
    assert_eq!(
        header,
        "step,phase,recall@5,recall@10,ndcg@5,ndcg@10,H_level_1,H_level_2,density_level_1,density_level_2"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4, "warm-up row plus dynamic rows every 20 steps");
    for row in &rows {
        assert_eq!(row.split(',').count(), header.split(',').count());
        assert!(row.split(',').all(|c| !c.is_empty()));
    }
    let row = harness::eval(dir.path()).unwrap();
    assert_eq!(row, last, "eval from artifacts reproduces the in-run metrics");
    assert_eq!(*rows.last().unwrap(), row.csv_row());
    assert!(row.ndcg_at(10) <= row.recall_at(10));
}

#[test]
fn checkpoint_and_index_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let out = harness::run(&tiny_config(5), RunKind::Coevolve, dir.path()).unwrap();
    let loaded = harness::load_run(dir.path()).unwrap();
    assert_eq!(loaded.trainer, out.trainer);
    let cfg = &loaded.config;
    assert_eq!(formats::write_checkpoint(&loaded.trainer, &cfg.hash()), read(&dir.path().join(CHECKPOINT)));
    assert_eq!(formats::write_index(&loaded.trainer.index, &loaded.trainer.spec), read(&dir.path().join(INDEX)));
}

#[test]
fn checkpoint_from_another_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = harness::run(&tiny_config(5), RunKind::Warmup, dir.path()).unwrap();
    let text = read(&dir.path().join(CHECKPOINT));
    let mut other = out.trainer.clone();
    let err = formats::read_checkpoint(&text, "ck", &mut other, &tiny_config(6).hash()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let truncated: String = text.lines().take(20).map(|l| format!("{l}\n")).collect();
    assert!(formats::read_checkpoint(&truncated, "ck", &mut other, &tiny_config(5).hash()).is_err());
    assert_eq!(other, out.trainer, "failed loads leave the trainer untouched");
}

#[test]
fn manifest_alone_reproduces_the_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    harness::run(&tiny_config(9), RunKind::Coevolve, a.path()).unwrap();
    let cfg = RunConfig::from_file(&a.path().join(MANIFEST)).unwrap();
    assert_eq!(cfg, tiny_config(9));
    harness::run(&cfg, RunKind::Coevolve, b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 11);
    for name in names {
        assert_eq!(read(&a.path().join(&name)), read(&b.path().join(&name)), "{name:?} differs");
    }
}

#[test]
fn external_event_files_drive_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(4);
    let data = harness::synth(&cfg, &dir.path().join("data")).unwrap();
    cfg.data.events = dir.path().join("data/events.tsv").to_string_lossy().into_owned();
    cfg.data.catalog = dir.path().join("data/catalog.tsv").to_string_lossy().into_owned();
    let loaded = harness::load_dataset(&cfg).unwrap();
    assert_eq!(loaded, data);
    let out = harness::run(&cfg, RunKind::Warmup, &dir.path().join("run")).unwrap();
    assert!(out.final_row.is_none());
    let synthetic = harness::run(&tiny_config(4), RunKind::Warmup, &dir.path().join("run2")).unwrap();
    assert_eq!(out.trainer, synthetic.trainer);
}

#[test]
fn data_errors_are_classified() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(4);
    cfg.data.events = dir.path().join("missing.tsv").to_string_lossy().into_owned();
    cfg.data.catalog = cfg.data.events.clone();
    let err = harness::run(&cfg, RunKind::Warmup, &dir.path().join("run")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("missing.tsv"), "{err}");

    std::fs::write(dir.path().join("ev.tsv"), "0\t5\t1\t1\n").unwrap();
    std::fs::write(dir.path().join("cat.tsv"), "0\t1.0\n1\t2.0\n").unwrap();
    cfg.data.events = dir.path().join("ev.tsv").to_string_lossy().into_owned();
    cfg.data.catalog = dir.path().join("cat.tsv").to_string_lossy().into_owned();
    let err = harness::load_dataset(&cfg).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("item 5"), "{err}");

    let mut bad = tiny_config(4);
    bad.codebook.codes = 0;
    assert_eq!(harness::run(&bad, RunKind::Warmup, dir.path()).unwrap_err().exit_code(), 1);
}
