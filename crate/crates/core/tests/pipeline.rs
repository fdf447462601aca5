//! End-to-end runs of the simulate / pretrain / refine / evaluate pipeline on
//! reduced configurations.

use std::fs;

use freehand_core::config::ExperimentConfig;
use freehand_core::experiment::{
    bench, build_scene, run_experiment, run_pipeline, BENCH_CSV_HEADER,
};
use freehand_core::imaging::{read_sequence, read_volume, Shape};
use freehand_core::losses::{DiscriminatorParams, FeatureSpec};
use freehand_core::recon::{Support, WeightMode};
use freehand_core::refine::{online_refine, params_hash, RefineConfig};
use freehand_core::scansim::{NoiseModel, TrajectoryKind, TrajectorySpec};
use freehand_core::Exec;

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        trajectory: TrajectorySpec::hybrid(vec![
            TrajectorySpec::new(TrajectoryKind::Loop { turn_back: 3 }, 5, 0.5),
            TrajectorySpec::new(TrajectoryKind::Sector { tilt: 0.03 }, 4, 0.5),
        ]),
        ..Default::default()
    };
    cfg.refine.recon.grid.dims = [16, 16, 12];
    cfg.refine.iterations = 4;
    cfg.pool.size = 2;
    cfg.bench_seeds = 3;
    cfg
}

/// Smooth, untextured phantom densely scanned along a straight line.
fn dense_config() -> ExperimentConfig {
    let mut cfg = small_config();
    cfg.phantom.texture = 0.0;
    cfg.phantom.smoothness = 10.0;
    cfg.trajectory = TrajectorySpec::new(TrajectoryKind::Linear, 16, 0.25);
    cfg.start.tz = -2.0;
    cfg.noise = NoiseModel::none();
    cfg.pool.size = 0;
    cfg.refine = RefineConfig::new(cfg.refine.recon);
    cfg.refine.adv_weight = 0.0;
    cfg.refine.iterations = 5;
    cfg.refine.recon.grid.spacing = [0.25; 3];
    cfg.refine.recon.grid.dims = [64, 64, 24];
    cfg.refine.recon.mode = WeightMode::NearestEmphasis;
    cfg.refine.recon.support = Support::KNearest(2);
    cfg
}

#[test]
fn zero_noise_pipeline_has_no_drift() {
    let mut cfg = small_config();
    cfg.noise = NoiseModel::none();
    let run = run_pipeline(&cfg).unwrap();
    assert!(run.before.fdr < 0.1, "before {}", run.before.fdr);
    assert!(run.after.fdr < 0.1, "after {}", run.after.fdr);
    assert_eq!(run.refined.history.len(), cfg.refine.iterations);
}

#[test]
fn experiment_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.out_dir = dir.path().to_path_buf();
    let run = run_experiment(&cfg).unwrap();
    for name in [
        "config.txt",
        "phantom.vol",
        "initial.csv",
        "refined.csv",
        "metrics_before.csv",
        "metrics_after.csv",
        "history.csv",
        "recon_before.vol",
        "recon_after.vol",
        "discriminator.csv",
    ] {
        assert!(dir.path().join(name).is_file(), "missing {name}");
    }
    let seq = read_sequence(&dir.path().join("sequence")).unwrap();
    assert_eq!(seq.len(), run.scene.sequence.len());
    let phantom = read_volume(fs::File::open(dir.path().join("phantom.vol")).unwrap()).unwrap();
    // Volumes are stored in single precision.
    assert_eq!(phantom.grid(), run.scene.phantom.grid());
    assert_eq!(phantom.mask(), run.scene.phantom.mask());
    for (a, b) in phantom.values().iter().zip(run.scene.phantom.values()) {
        assert!((a - b).abs() <= 1e-6);
    }
    let history = fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), cfg.refine.iterations + 1);
    let saved =
        ExperimentConfig::parse(&fs::read_to_string(dir.path().join("config.txt")).unwrap())
            .unwrap();
    assert_eq!(saved.serialize(), cfg.serialize());
}

#[test]
fn bench_summary_has_a_row_per_seed_and_a_median() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.out_dir = dir.path().to_path_buf();
    cfg.seed = 7;
    let report = bench(&cfg).unwrap();
    assert_eq!(report.rows.len(), 3);
    let summary = fs::read_to_string(dir.path().join("bench_summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], BENCH_CSV_HEADER);
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("7,"));
    assert!(lines[4].starts_with("median,"));
    for s in 7..10 {
        assert!(dir.path().join(format!("history_seed{s}.csv")).is_file());
    }
}

#[test]
fn refinement_from_ground_truth_stays_put() {
    let cfg = dense_config();
    let scene = build_scene(&cfg).unwrap();
    let mut refine = cfg.refine.clone();
    refine.recon = scene.recon;
    let disc = DiscriminatorParams::zeros(FeatureSpec::default());
    let out = online_refine(&scene.sequence, &scene.initial, &disc, &refine, &[]).unwrap();
    let ssl0 = out.history.records[0].losses.ssl_term;
    assert!(ssl0 <= 1e-3, "ssl at ground truth {ssl0}");
    let moved = out
        .refined
        .flatten()
        .iter()
        .zip(scene.initial.flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(moved < 1e-3, "moved {moved}");
}

#[test]
fn self_supervised_refinement_never_increases_its_loss() {
    let mut cfg = small_config();
    cfg.pool.size = 0;
    cfg.refine.adv_weight = 0.0;
    cfg.refine.iterations = 6;
    let run = run_pipeline(&cfg).unwrap();
    let ssl: Vec<f64> = run
        .refined
        .history
        .records
        .iter()
        .map(|r| r.losses.ssl_term)
        .collect();
    for w in ssl.windows(2) {
        assert!(w[1] <= w[0], "ssl rose: {ssl:?}");
    }
    assert!(
        ssl.last().unwrap() < ssl.first().unwrap(),
        "no progress: {ssl:?}"
    );
    assert!(run
        .refined
        .history
        .records
        .iter()
        .any(|r| r.step_scale > 0.0));
}

#[test]
fn runs_are_deterministic_and_independent_of_execution() {
    let mut cfg = small_config();
    cfg.refine.recon.exec = Exec::Parallel;
    let a = run_pipeline(&cfg).unwrap();
    let b = run_pipeline(&cfg).unwrap();
    cfg.refine.recon.exec = Exec::Sequential;
    let c = run_pipeline(&cfg).unwrap();
    let hashes = |r: &freehand_core::experiment::RunOutcome| -> Vec<u64> {
        r.refined
            .history
            .records
            .iter()
            .map(|x| x.params_hash)
            .collect()
    };
    assert_eq!(hashes(&a), hashes(&b));
    assert_eq!(hashes(&a), hashes(&c));
    assert_eq!(
        params_hash(&a.refined.refined),
        params_hash(&c.refined.refined)
    );
    assert_eq!(a.after, c.after);
}

#[test]
fn jittered_phantoms_keep_their_shapes() {
    let cfg = small_config();
    let scene = build_scene(&cfg).unwrap();
    assert!(matches!(cfg.phantom.shapes[0], Shape::Ellipsoid { .. }));
    assert_eq!(scene.sequence.len(), cfg.trajectory.frame_count());
}
