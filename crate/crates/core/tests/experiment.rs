use std::fs;
use std::path::{Path, PathBuf};

use dsm_core::experiment::{Experiment, ExperimentConfig, ExperimentError, Outcome, ProviderConfig};
use dsm_core::provider::FixtureConfig;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn config(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.provider = ProviderConfig::Fixture(FixtureConfig {
        seed: 1,
        layers: 4,
        heads: 2,
        ..FixtureConfig::default()
    });
    c.corpus.path = data("fixture20.conllu");
    c.corpus.limit = Some(6);
    c.layer = 3;
    c.k = 2;
    c.sweep.layers = vec![2, 3];
    c.sweep.k = vec![0, 2];
    c.agreement.count = 8;
    c.agreement.k = vec![0, 1];
    c.headsel.selection_path = Some(data("selection20.conllu"));
    c.headsel.selection_size = 8;
    c.headsel.k = vec![0, 1];
    c.output_dir = dir.join("out");
    c.cache_dir = dir.join("cache");
    c
}

#[test]
fn unchanged_commands_are_skipped_and_edits_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let exp = Experiment::new(config(tmp.path())).unwrap();
    assert!(exp.pipeline().unwrap().iter().all(|o| matches!(o, Outcome::Ran(_))));
    assert!(exp.pipeline().unwrap().iter().all(|o| matches!(o, Outcome::UpToDate(_))));

    let report = tmp.path().join("out/eval-ud.tsv");
    let before = fs::read(&report).unwrap();
    fs::write(&report, "edited").unwrap();
    assert!(matches!(exp.eval().unwrap(), Outcome::Ran(_)));
    assert_eq!(fs::read(&report).unwrap(), before);

    let mut changed = config(tmp.path());
    changed.k = 1;
    let exp = Experiment::new(changed).unwrap();
    let outcomes = exp.pipeline().unwrap();
    assert!(matches!(outcomes[2], Outcome::Ran(_)));
    assert!(fs::read_to_string(tmp.path().join("out/induced.conllu")).unwrap().contains("# dsm.k = 1"));
}

#[test]
fn later_stages_need_earlier_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let exp = Experiment::new(config(tmp.path())).unwrap();
    let e = exp.induce().unwrap_err();
    assert!(matches!(e, ExperimentError::MissingArtifact { producer: "substitute", .. }), "{e}");
    assert_eq!(e.exit_code(), 3);
    exp.substitute().unwrap();
    let e = exp.induce().unwrap_err();
    assert!(matches!(e, ExperimentError::MissingArtifact { producer: "extract", .. }), "{e}");
}

#[test]
fn asking_for_more_substitutes_than_stored_fails() {
    let tmp = tempfile::tempdir().unwrap();
    Experiment::new(config(tmp.path())).unwrap().pipeline().unwrap();
    let mut more = config(tmp.path());
    more.k = 5;
    more.sweep.k = vec![0];
    // substitute is stale under the new config, so run the later stage alone
    let e = Experiment::new(more).unwrap().induce().unwrap_err();
    assert_eq!(e.exit_code(), 2, "{e}");
}

#[test]
fn sweep_agreement_and_headsel_write_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let exp = Experiment::new(config(tmp.path())).unwrap();
    exp.substitute().unwrap();
    exp.sweep().unwrap();
    exp.agreement().unwrap();
    exp.headsel().unwrap();
    let out = tmp.path().join("out");
    let sweep = fs::read_to_string(out.join("sweep.tsv")).unwrap();
    assert!(sweep.contains("layer\tT.\tk=2\tΔ(k=2)"));
    assert_eq!(sweep.lines().filter(|l| l.starts_with("2\t") || l.starts_with("3\t")).count(), 2);
    let agreement = fs::read_to_string(out.join("agreement.tsv")).unwrap();
    assert!(agreement.contains("object_rc\tZ+H\t8.9\t-"));
    assert!(agreement.contains("subject_rc\tZ+H\t1.9\t-"));
    let headsel = fs::read_to_string(out.join("headsel.tsv")).unwrap();
    assert!(headsel.contains("label\tT.\tk=1\tΔ(DSM, T.)"));
    assert!(headsel.lines().any(|l| l.starts_with("UAS\t")));
    assert!(out.join("inventory-k1.json").exists());
}

#[test]
fn headsel_refuses_overlapping_corpora() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = config(tmp.path());
    c.headsel.selection_path = Some(data("fixture20.conllu"));
    let e = Experiment::new(c).unwrap().headsel().unwrap_err();
    assert!(e.to_string().contains("shares"), "{e}");
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn sud_scheme_needs_a_sud_file() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = config(tmp.path());
    c.eval.scheme = dsm_core::Scheme::SUD;
    let exp = Experiment::new(c).unwrap();
    exp.substitute().unwrap();
    exp.extract().unwrap();
    exp.induce().unwrap();
    assert_eq!(exp.eval().unwrap_err().exit_code(), 2);
}

#[test]
fn same_trees_score_against_both_schemes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = config(tmp.path());
    c.corpus.limit = None;
    c.corpus.sud_path = Some(data("fixture20-sud.conllu"));
    Experiment::new(c.clone()).unwrap().pipeline().unwrap();
    c.eval.scheme = dsm_core::Scheme::SUD;
    let exp = Experiment::new(c).unwrap();
    assert!(matches!(exp.induce().unwrap(), Outcome::UpToDate(_)));
    exp.eval().unwrap();
    let out = tmp.path().join("out");
    let ud = fs::read_to_string(out.join("eval-ud.tsv")).unwrap();
    let sud = fs::read_to_string(out.join("eval-sud.tsv")).unwrap();
    assert!(sud.contains("# scheme\tSUD"));
    assert!(sud.contains("comp:obj\t"));
    assert!(!ud.contains("comp:obj\t"));
}
