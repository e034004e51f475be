use mmvq_core::config::RunConfig;
use mmvq_core::downstream::TaskMode;
use mmvq_core::pipeline::{load_embeddings, run_full, Run};
use mmvq_core::Error;

fn quick() -> RunConfig {
    let mut c = RunConfig::desk();
    c.data.cohort.subjects = 10;
    c.data.cohort.sessions_per_subject = 2;
    c.data.cohort.duration_s = (75.0, 110.0);
    c.mrl.training.epochs = 2;
    c.downstream.epochs = 3;
    c
}

#[test]
fn stages_run_in_order_and_guard_outputs() {
    let out = tempfile::tempdir().unwrap();
    let run = Run::open(out.path(), quick(), false).unwrap();
    let err = run.train_mrl().unwrap_err();
    assert!(err.to_string().contains("extract-features"), "{err}");

    let full = run_full(out.path(), quick(), true).unwrap();
    assert_eq!(full.run.dir, run.dir);
    assert_eq!(full.reports.len(), 3);
    for f in [
        "eval/comparison.txt",
        "error_analysis/leave_subject_out.txt",
        "embed/codes.json",
    ] {
        assert!(run.path(f).is_file(), "{f}");
    }
    let emb = load_embeddings(&run.path("embed/sessions.mmvq")).unwrap();
    assert_eq!(emb.matrices.len(), 20);
    assert_eq!(emb.mrl_hash, run.config.mrl.hash());
    let cb = full.mrl.checkpoint.model.codebook();
    let l = cb.shape()[1];
    for m in emb.matrices.values() {
        for t in 0..m.count() {
            let row = &m.values.data()[t * l..(t + 1) * l];
            assert!(cb.data().chunks(l).any(|e| e == row));
        }
    }

    let err = run.synth_data().unwrap_err();
    assert!(err.to_string().contains("--force"), "{err}");
    assert_eq!(err.exit_code(), 1);
    assert!(run.train_downstream(TaskMode::Cls).is_err());
    let forced = Run {
        force: true,
        ..run.clone()
    };
    forced.train_downstream(TaskMode::Cls).unwrap();
}

#[test]
fn stored_config_must_match() {
    let out = tempfile::tempdir().unwrap();
    let run = Run::open(out.path(), quick(), false).unwrap();
    let mut other = quick();
    other.seed = 99;
    let dir = out.path().join(other.run_name());
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::copy(run.path("config.json"), dir.join("config.json")).unwrap();
    assert!(matches!(
        Run::open(out.path(), other, false),
        Err(Error::HashMismatch { .. })
    ));
}

#[test]
fn config_files_load() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk = RunConfig::load(&root.join("desk.json")).unwrap();
    assert_eq!(desk, RunConfig::desk());
    let extreme = RunConfig::load(&root.join("extreme.json")).unwrap();
    assert_eq!(extreme.data.cohort.extreme_subjects, 1);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"mrl": {"nope": 1}}"#).unwrap();
    assert!(RunConfig::load(&bad).is_err());
    std::fs::write(&bad, r#"{"preset": "huge"}"#).unwrap();
    assert!(RunConfig::load(&bad).is_err());
}
