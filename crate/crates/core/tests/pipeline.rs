use std::fs;

use malegs::ablation::{run_ablation, Variant};
use malegs::pipeline::{Pipeline, PipelineConfig};
use malegs::Error;

const TINY: &str = "seed = 5\nnum_gaussians = 60\nclasses = 3\nviews = 4\nresolution = 24\nD = 32\n\
backdrop_gaussians = 32\nkernel = 1\nae_epochs = 6\nae_max_samples = 512\nfield_iterations = 120\n";

fn tiny() -> PipelineConfig {
    PipelineConfig::parse(TINY).unwrap()
}

#[test]
fn cached_stages_match_fresh_runs() {
    let dir = tempfile::tempdir().unwrap();
    let first = Pipeline::new(tiny(), dir.path()).unwrap().eval().unwrap();
    let report = fs::read(dir.path().join("report.csv")).unwrap();
    // Second pass hits every cache entry.
    let second = Pipeline::new(tiny(), dir.path()).unwrap().eval().unwrap();
    assert_eq!(first, second);
    assert_eq!(fs::read(dir.path().join("report.csv")).unwrap(), report);

    let mut off = tiny();
    off.cache = false;
    let other = tempfile::tempdir().unwrap();
    assert_eq!(Pipeline::new(off, other.path()).unwrap().eval().unwrap(), first);
}

#[test]
fn stage_dirs_are_complete_and_reused() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(tiny(), dir.path()).unwrap();
    p.train_ae().unwrap();
    let k = p.keys().clone();
    for d in [p.stage_dir("gen", &k.gen), p.stage_dir("train-ae", &k.ae[0])] {
        assert!(d.join("COMPLETE").is_file(), "{}", d.display());
    }
    // Changing only the field budget keeps the autoencoder key.
    let mut cfg = tiny();
    cfg.field_iterations = 10;
    let q = Pipeline::new(cfg, dir.path()).unwrap();
    assert_eq!(q.keys().ae, k.ae);
    assert_ne!(q.keys().field, k.field);
}

#[test]
fn query_file_and_style_vote() {
    let dir = tempfile::tempdir().unwrap();
    let qpath = dir.path().join("q.tsv");
    fs::write(&qpath, "# two objects and two styles\nclass1\t1\nclass3\t3\nbaroque\tstyle\ngothic\tstyle\n").unwrap();
    let mut cfg = tiny();
    cfg.queries = Some(qpath);
    let p = Pipeline::new(cfg, dir.path().join("out")).unwrap();
    assert_eq!(p.queries().len(), 4);
    let m = p.eval().unwrap();
    assert_eq!(m.per_query.len(), 2);
    let vote = p.style_vote().unwrap();
    assert_eq!(vote.votes.values().sum::<usize>(), p.eval_view_indices().unwrap().len());
    assert!(["baroque", "gothic"].contains(&vote.winner.as_str()));
    assert!(dir.path().join("out/style_vote.csv").is_file());
}

#[test]
fn bad_queries_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    for text in ["class9\t9\n", "no tab here\n", "x\tmaybe\n"] {
        let qpath = dir.path().join("q.tsv");
        fs::write(&qpath, text).unwrap();
        let mut cfg = tiny();
        cfg.queries = Some(qpath);
        assert!(matches!(Pipeline::new(cfg, dir.path()).err(), Some(Error::Config(_))), "{text:?}");
    }
    let mut cfg = tiny();
    cfg.queries = Some(dir.path().join("missing.tsv"));
    assert!(Pipeline::new(cfg, dir.path()).err().unwrap().is_config_error());
}

#[test]
fn unwritable_output_is_a_stage_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain-file");
    fs::write(&file, b"x").unwrap();
    let err = Pipeline::new(tiny(), &file).unwrap().gen().unwrap_err();
    assert!(matches!(err, Error::Stage { .. }), "{err:?}");
    assert!(!err.is_config_error());
}

#[test]
fn seg3d_selects_the_queried_object() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.ae_epochs = 40;
    cfg.field_iterations = 600;
    let rows = Pipeline::new(cfg, dir.path()).unwrap().seg3d().unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!(r.selected > 0, "{r:?}");
        assert!(r.precision > 0.5, "{r:?}");
    }
    assert!(dir.path().join("seg3d/mask_q0.mft").is_file());
}

#[test]
fn ablation_shares_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_ablation(&tiny(), &[Variant::Full, Variant::PixAvg], &[5], dir.path()).unwrap();
    assert_eq!(r.runs.len(), 2);
    // The ensemble rule only changes the query stage.
    let trained = fs::read_dir(dir.path().join("cache"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("train-field"))
        .count();
    assert_eq!(trained, 1);
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert!(csv.starts_with("variant,seed,miou,mpa,mp\n"));
    assert_eq!(csv.lines().filter(|l| l.contains(",mean,")).count(), 2);
}
