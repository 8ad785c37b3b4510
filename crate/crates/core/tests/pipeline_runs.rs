mod common;

use std::sync::atomic::Ordering;
use std::sync::Arc;

use common::{FakeLlm, Tripwire};
use hetsel::pipeline::{self, files, Mode, Pipeline, PipelineError};
use hetsel::semantic::SemanticError;
use sha2::{Digest, Sha256};

fn offline_config(mode: Mode, out: &std::path::Path) -> hetsel::pipeline::RunConfig {
    let mut c = common::toy_config(mode, out);
    // any attempt to build a real client fails: no key and an unroutable endpoint
    c.llm.api_key_env = "HETSEL_TEST_NO_SUCH_KEY".into();
    c.llm.endpoint = "http://127.0.0.1:9/unused".into();
    c.llm.requests_per_second = None;
    c.llm.backoff_ms = 0;
    c
}

#[test]
fn offline_modes_never_touch_the_transport() {
    for mode in [Mode::Statistical, Mode::SemanticMock, Mode::AblationHalfdata] {
        let dir = tempfile::tempdir().unwrap();
        let summary = Pipeline::new(offline_config(mode, dir.path()))
            .unwrap()
            .with_transport(Arc::new(Tripwire))
            .run()
            .unwrap_or_else(|e| panic!("{mode:?}: {e}"));
        assert!(!summary.reports.is_empty());
        assert!(dir.path().join(files::MANIFEST).exists());
        assert!(!dir.path().join(files::SEMANTIC_CACHE).exists());
    }
}

#[test]
fn llm_mode_without_key_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = Pipeline::new(offline_config(Mode::SemanticLlm, dir.path())).unwrap().run().unwrap_err();
    assert!(matches!(err, PipelineError::Semantic(SemanticError::NotConfigured(_))), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn llm_mode_resumes_from_caches() {
    let dir = tempfile::tempdir().unwrap();
    let config = offline_config(Mode::SemanticLlm, dir.path());
    let fake = Arc::new(FakeLlm::default());
    let first = Pipeline::new(config.clone()).unwrap().with_transport(fake.clone()).run().unwrap();
    let calls = fake.calls.load(Ordering::SeqCst);
    assert!(calls > 0);
    assert!(!first.stats_from_cache);
    assert!(first.reports.iter().any(|r| r.method == "ours-semantic-llm"));
    let scores = pipeline::load_scores(dir.path()).unwrap();

    let again = Arc::new(FakeLlm::default());
    let second = Pipeline::new(config).unwrap().with_transport(again.clone()).run().unwrap();
    assert_eq!(again.calls.load(Ordering::SeqCst), 0);
    assert!(second.stats_from_cache);
    assert_eq!(pipeline::load_scores(dir.path()).unwrap(), scores);
    assert_eq!(first.reports, second.reports);
}

#[test]
fn manifest_digests_match_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let summary = Pipeline::new(offline_config(Mode::SemanticMock, dir.path())).unwrap().run().unwrap();
    assert!(summary.manifest.artifacts.contains_key(files::SCORES));
    for (rel, digest) in &summary.manifest.artifacts {
        let bytes = std::fs::read(dir.path().join(rel)).unwrap();
        assert_eq!(&hex::encode(Sha256::digest(&bytes)), digest, "{rel}");
    }
}

#[test]
fn report_combines_runs() {
    let stat = tempfile::tempdir().unwrap();
    let mock = tempfile::tempdir().unwrap();
    Pipeline::new(offline_config(Mode::Statistical, stat.path())).unwrap().run().unwrap();
    Pipeline::new(offline_config(Mode::SemanticMock, mock.path())).unwrap().run().unwrap();
    let out = tempfile::tempdir().unwrap();
    let report = pipeline::report(&[stat.path().to_path_buf(), mock.path().to_path_buf()], out.path()).unwrap();
    assert!(report.methods.contains(&"ours-statistical".to_string()));
    assert!(report.methods.contains(&"ours-semantic-mock".to_string()));
    assert_eq!(report.tables.len(), 4);
    assert_eq!(report.charts.len(), 4);
    let ap = std::fs::read_to_string(out.path().join("ap.csv")).unwrap();
    let header = ap.lines().next().unwrap();
    assert!(header.starts_with("ratio,"));
    assert_eq!(ap.lines().count(), 1 + 3, "{ap}");
    // baselines from both runs are kept apart by run directory
    assert_eq!(header.matches("/random").count(), 2);
    let svg = std::fs::read_to_string(out.path().join("ap.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("ours-semantic-mock"));

    let err = pipeline::report(&[], out.path()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
