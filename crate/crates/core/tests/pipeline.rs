use std::path::Path;

use flownerf::oracleio::formats::read_file;
use flownerf::oracleio::{generate_scene, Dataset, SceneConfig};
use flownerf::trainer::eval::{Direction, OraclePredictor};
use flownerf::trainer::train::{CHECKPOINT_FILE, LOG_FILE};
use flownerf::trainer::{evaluate, run_training, Checkpoint, Report, TrainConfig};
use flownerf::Error;

fn small_scene(dir: &Path, frames: usize) -> Dataset {
    let mut cfg = SceneConfig::for_frames(frames);
    cfg.focal *= 16.0 / cfg.width as f64;
    (cfg.width, cfg.height) = (16, 16);
    generate_scene(5, cfg, dir).unwrap();
    Dataset::load(dir).unwrap()
}

fn tiny_config(iterations: usize) -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.iterations = iterations;
    c.checkpoint_every = 2;
    c.rays = 16;
    c.samples = 6;
    c.pc_points = 16;
    c.geometry_width = 8;
    c.geometry_depth = 3;
    c.geometry_skip = 1;
    c.projection_width = 4;
    c.feature_width = 4;
    c.canonical_width = 8;
    c.embedding_width = 8;
    c.latent_width = 4;
    c.bijection_hidden = 4;
    c.position_frequencies = 2;
    c.direction_frequencies = 1;
    c.test_pose_iterations = 3;
    c.test_pose_rays = 16;
    c
}

#[test]
fn oracle_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_scene(dir.path(), 5);
    let r = evaluate(&ds, &mut OraclePredictor { ds: &ds }).unwrap();
    let train = r.train_views.as_ref().unwrap();
    assert!(train.views.len() == 5 && train.psnr >= 99.0 && (train.ssim - 1.0).abs() < 1e-12);
    assert!(r.novel_views.as_ref().unwrap().psnr >= 99.0);
    assert!(r.depth_train.unwrap().abs_rel < 1e-12 && r.depth_novel.unwrap().abs_rel < 1e-12);
    assert!(r.pose.unwrap().ate < 1e-9);
    let intervals: Vec<usize> = r.flow.iter().filter(|f| f.direction == Direction::Forward).map(|f| f.interval).collect();
    assert_eq!(intervals, vec![1, 2, 4]);
    assert!(r.flow.iter().all(|f| f.epe_l2 < 1e-9 && f.pixels > 0));
    assert!(!r.novel_flow.is_empty() && r.novel_flow.iter().all(|f| f.epe_l2 < 1e-9));
    assert_eq!(Report::from_json(&r.to_json()).unwrap(), r);
}

#[test]
fn longest_interval_appears_only_when_the_sequence_allows() {
    for (frames, expect) in [(16, false), (17, true)] {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_scene(dir.path(), frames);
        let r = evaluate(&ds, &mut OraclePredictor { ds: &ds }).unwrap();
        assert_eq!(r.flow_at(16, Direction::Forward).is_some(), expect, "{frames} frames");
        assert_eq!(r.flow_at(8, Direction::Backward).map(|f| f.pairs), Some(frames - 8));
    }
}

#[test]
fn report_rejects_unknown_fields() {
    let dir = tempfile::tempdir().unwrap();
    let ds = small_scene(dir.path(), 3);
    let r = evaluate(&ds, &mut OraclePredictor { ds: &ds }).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    v["extra"] = serde_json::json!(1);
    assert!(matches!(Report::from_json(&v.to_string()), Err(Error::ParseLine { .. })));
}

#[test]
fn zero_iterations_save_the_initial_state() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("scene");
    small_scene(&data, 3);
    let out = dir.path().join("run");
    let outcome = run_training(&tiny_config(0), &data, &out, None).unwrap();
    assert_eq!(outcome.iterations, 0);
    assert!(outcome.last.is_none());
    let ck = Checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.iteration, 0);
    let fresh = flownerf::trainer::Model::new(&tiny_config(0), 3).unwrap();
    assert_eq!(ck.tensors, fresh.tensors());
    assert!(ck.tensors.iter().filter(|(n, _)| n.starts_with("pose.")).all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn resumed_runs_match_uninterrupted_ones() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("scene");
    small_scene(&data, 3);
    let straight = dir.path().join("straight");
    run_training(&tiny_config(6), &data, &straight, None).unwrap();
    let part = dir.path().join("part");
    run_training(&tiny_config(4), &data, &part, None).unwrap();
    let resumed = dir.path().join("resumed");
    run_training(&tiny_config(6), &data, &resumed, Some(&part.join(CHECKPOINT_FILE))).unwrap();
    assert_eq!(read_file(&straight.join(CHECKPOINT_FILE)).unwrap(), read_file(&resumed.join(CHECKPOINT_FILE)).unwrap());
    let rows = |p: &Path| std::fs::read_to_string(p.join(LOG_FILE)).unwrap().lines().skip(1).map(String::from).collect::<Vec<_>>();
    let (s, r) = (rows(&straight), rows(&resumed));
    assert_eq!(s.len(), 6);
    assert_eq!(&s[4..], &r[r.len() - 2..]);

    let mut wider = tiny_config(6);
    wider.geometry_width = 10;
    assert!(matches!(
        run_training(&wider, &data, &dir.path().join("bad"), Some(&part.join(CHECKPOINT_FILE))),
        Err(Error::Config(_))
    ));
}

#[test]
fn numeric_abort_keeps_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("scene");
    small_scene(&data, 3);
    let out = dir.path().join("run");
    let mut cfg = tiny_config(40);
    cfg.checkpoint_every = 1;
    cfg.lr_geometry = 1e200;
    cfg.lr_canonical = 1e200;
    match run_training(&cfg, &data, &out, None) {
        Err(e @ Error::Numeric(_)) => {
            assert_eq!(e.exit_code(), 4);
            let ck = Checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap();
            assert!(ck.tensors.iter().all(|(_, t)| t.is_finite()));
        }
        other => panic!("expected a numeric abort, got {other:?}"),
    }
}
