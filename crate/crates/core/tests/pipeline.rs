use std::fs;
use std::path::Path;

use p2d_core::corpus::load_manifest;
use p2d_core::pipeline::{
    k_sweep, run_full, PipelineError, RunRecord, Stage, StageCounter, StageStatus, COMPARISON_FILE,
    RUN_RECORD_FILE,
};
use p2d_core::toy::{quick_pipeline_config, write_toy_corpus};

fn counter(computed: usize, skipped: usize, failed: usize) -> StageCounter {
    StageCounter {
        computed,
        skipped,
        failed,
    }
}

fn computed_items(record: &RunRecord, stage: Stage) -> Vec<String> {
    record
        .items
        .iter()
        .filter(|i| i.status(stage) == Some(StageStatus::Computed))
        .map(|i| i.painting_id.clone())
        .collect()
}

#[test]
fn full_run_produces_every_artifact_per_painting() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_toy_corpus(dir.path(), 3, 6, 24, 1).unwrap();
    let config = quick_pipeline_config(&corpus, 2, dir.path().join("run"));
    let record = run_full(&config).unwrap();

    assert_eq!(record.items.len(), 3);
    assert!(record.failures.is_empty());
    for stage in [Stage::Translate, Stage::Refine, Stage::Depth, Stage::Mesh] {
        assert_eq!(record.counter(stage), counter(3, 0, 0), "{stage}");
    }
    for item in &record.items {
        for stage in [Stage::Translate, Stage::Refine, Stage::Depth, Stage::Mesh] {
            let a = item.artifact(stage).unwrap();
            assert!(a.path.is_file());
            assert!(a.id.starts_with(&format!("{}.", item.painting_id)));
        }
        assert!(item.structure_score.is_some());
    }
    let matched = load_manifest(&record.matched_manifest).unwrap();
    assert_eq!(matched.pairs.len(), 6);
    assert_eq!(RunRecord::load(&config.output_root.join(RUN_RECORD_FILE)).unwrap(), record);
    for key in ["p2d-core", "text_encoder", "image_encoder", "dictionary", "refine_backend", "depth_backend"] {
        assert!(record.tool_versions.contains_key(key), "{key}");
    }
}

#[test]
fn resume_recomputes_only_what_changed() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_toy_corpus(dir.path(), 3, 5, 24, 2).unwrap();
    let mut config = quick_pipeline_config(&corpus, 1, dir.path().join("run"));
    let first = run_full(&config).unwrap();

    let again = run_full(&config).unwrap();
    for stage in [Stage::Match, Stage::Train] {
        assert_eq!(again.counter(stage), counter(0, 1, 0));
    }
    for stage in [Stage::Translate, Stage::Refine, Stage::Depth, Stage::Mesh] {
        assert_eq!(again.counter(stage), counter(0, 3, 0), "{stage}");
    }

    let victim = &first.items[1];
    fs::remove_file(&victim.artifact(Stage::Depth).unwrap().path).unwrap();
    let resumed = run_full(&config).unwrap();
    assert_eq!(resumed.counter(Stage::Depth), counter(1, 2, 0));
    assert_eq!(computed_items(&resumed, Stage::Depth), vec![victim.painting_id.clone()]);
    for stage in [Stage::Translate, Stage::Refine, Stage::Mesh] {
        assert_eq!(resumed.counter(stage), counter(0, 3, 0), "{stage}");
    }
    let restored = resumed.items[1].artifact(Stage::Depth).unwrap();
    assert_eq!(restored.checksum, victim.artifact(Stage::Depth).unwrap().checksum);

    config.refine.strength = 0.4;
    let changed = run_full(&config).unwrap();
    assert_eq!(changed.counter(Stage::Translate), counter(0, 3, 0));
    for stage in [Stage::Refine, Stage::Depth, Stage::Mesh] {
        assert_eq!(changed.counter(stage), counter(3, 0, 0), "{stage}");
    }
}

#[test]
fn one_broken_painting_does_not_stop_the_others() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_toy_corpus(dir.path(), 3, 4, 24, 3).unwrap();
    let config = quick_pipeline_config(&corpus, 1, dir.path().join("run"));
    let first = run_full(&config).unwrap();

    let victim = &first.items[0];
    fs::write(&victim.painting_path, b"not an image").unwrap();
    fs::remove_file(&victim.artifact(Stage::Translate).unwrap().path).unwrap();
    let record = run_full(&config).unwrap();
    assert_eq!(record.counter(Stage::Translate), counter(0, 2, 1));
    assert_eq!(record.failures.len(), 1);
    assert_eq!(record.failures[0].painting_id, victim.painting_id);
    assert_eq!(record.failures[0].stage, Stage::Translate);
    assert_eq!(record.completed_items().count(), 2);
    assert_eq!(record.counter(Stage::Refine), counter(0, 2, 0));
}

#[test]
fn invalid_paths_fail_validation_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_toy_corpus(dir.path(), 1, 1, 16, 4).unwrap();
    let mut config = quick_pipeline_config(&corpus, 1, dir.path().join("run"));
    config.photos_manifest = dir.path().join("missing.jsonl");
    let err = run_full(&config).unwrap_err();
    assert!(matches!(err, PipelineError::MissingPath { field: "photos_manifest", .. }));
    assert!(!config.output_root.exists());

    config.photos_manifest = corpus.photos_manifest.clone();
    config.k = 0;
    assert!(matches!(run_full(&config), Err(PipelineError::Config(_))));
}

#[test]
fn config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_toy_corpus(dir.path(), 1, 1, 16, 5).unwrap();
    let config = quick_pipeline_config(&corpus, 1, dir.path().join("run"));
    let path = dir.path().join("cfg.json");
    config.save(&path).unwrap();
    let back = p2d_core::pipeline::PipelineConfig::load(&path).unwrap();
    assert_eq!(back, config);
    assert_eq!(back.hash(), config.hash());
}

fn read_sheet(root: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(root.join(COMPARISON_FILE)).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_owned).collect()).collect()
}

#[test]
fn sweep_runs_each_distinct_k_in_its_own_directory() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_toy_corpus(dir.path(), 2, 4, 16, 6).unwrap();
    let config = quick_pipeline_config(&corpus, 1, dir.path().join("sweep"));
    let records = k_sweep(&config, &[1, 3, 1]).unwrap();
    assert_eq!(records.iter().map(|r| r.k).collect::<Vec<_>>(), vec![1, 3]);
    for k in [1, 3] {
        let root = config.output_root.join(format!("k{k}"));
        assert!(root.join(RUN_RECORD_FILE).is_file());
        assert_eq!(load_manifest(&root.join("matched.jsonl")).unwrap().pairs.len(), 2 * k);
    }
    let rows = read_sheet(&config.output_root);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "1");
    assert_eq!(rows[1][1], "6");
    assert_eq!(rows[0][7], "");

    let single = run_full(&quick_pipeline_config(&corpus, 1, dir.path().join("single"))).unwrap();
    let a = load_manifest(&single.matched_manifest).unwrap();
    let b = load_manifest(&records[0].matched_manifest).unwrap();
    assert_eq!(a.pairs, b.pairs);
    assert!(k_sweep(&config, &[]).is_err());
}
