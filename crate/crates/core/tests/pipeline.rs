//! End-to-end runs of the library: simulate, train, evaluate.

use std::path::Path;

use umloc::datasim::{simulate, SimConfig};
use umloc::evalkit::{self, Level, MetricsReport, Pipeline};
use umloc::trainer::{run_curriculum, Phase, TrainConfig};

fn small_sim(seed: u64, n_traj: usize, duration_s: f64) -> SimConfig {
    SimConfig {
        map_height: 32,
        map_width: 32,
        ..SimConfig::new(seed, n_traj, duration_s, 60.0)
    }
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        alphas: vec![0.16, 0.025],
        hidden: 8,
        head_hidden: 8,
        quantile_epochs: 1,
        cgan_iterations: 6,
        joint_iterations: 2,
        batch: 4,
        log_every: 3,
        val_every: 3,
        val_windows: 4,
        ..TrainConfig::desk(seed)
    }
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn trained_pipeline_evaluates_reproducibly() {
    let ds = simulate(&small_sim(21, 7, 6.0)).unwrap();
    let cfg = tiny_config(21);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_curriculum(&ds, &cfg, a.path(), Phase::All).unwrap();
    run_curriculum(&ds, &cfg, b.path(), Phase::All).unwrap();
    assert_eq!(files(a.path()), files(b.path()));

    let p = Pipeline::load(a.path()).unwrap();
    let levels = [Level::L68, Level::L95];
    let (r1, trajs) = evalkit::run_eval(&p, &ds, &levels, 4).unwrap();
    let (r2, _) = evalkit::run_eval(&p, &ds, &levels, 4).unwrap();
    assert_eq!(r1.to_text(), r2.to_text());
    assert_eq!(MetricsReport::parse(&r1.to_text()).unwrap(), r1);
    assert_eq!(r1.blocks.len(), trajs.len() * levels.len());
    for (r, s) in trajs.iter().zip(ds.test()) {
        assert_eq!(r.inference.positions.len(), s.truth.len());
        for (_, q) in &r.inference.intervals {
            assert!(q
                .lower()
                .iter()
                .zip(q.upper())
                .all(|(l, u)| l[0] <= u[0] && l[1] <= u[1]));
        }
    }
    for blk in &r1.blocks {
        assert!((0.0..=1.0).contains(&blk.picp) && blk.aiw_mps >= 0.0 && blk.fde_frac >= 0.0);
    }
}

/// Validation L_sup at every evaluation of a supervised-only phase 2.
fn supervised_only_curve(seed: u64) -> Vec<f64> {
    let ds = simulate(&small_sim(seed, 24, 20.0)).unwrap();
    let cfg = TrainConfig {
        alphas: vec![0.025],
        cgan_iterations: 500,
        joint_iterations: 0,
        adv_warmup: 1.0,
        adv_anneal: 0.0,
        feas_max: 0.0,
        val_every: 50,
        log_every: 50,
        val_windows: 32,
        batch: 8,
        ..tiny_config(seed)
    };
    let dir = tempfile::tempdir().unwrap();
    run_curriculum(&ds, &cfg, dir.path(), Phase::Quantile).unwrap();
    let report = run_curriculum(&ds, &cfg, dir.path(), Phase::Cgan).unwrap();
    assert!(report
        .cgan
        .iter()
        .all(|r| r.w_adv == 0.0 && r.lambda_feas == 0.0));
    report.cgan.iter().filter_map(|r| r.val_sup).collect()
}

/// With the adversarial and feasibility weights held at 0, phase 2 is plain
/// regression and validation L_sup should not go up between evaluations.
/// The statistic per seed is the largest rise; its median must be <= 0.
#[test]
fn supervised_only_phase_two_never_raises_validation_loss() {
    let mut rises: Vec<f64> = Vec::new();
    for seed in [1, 2, 3] {
        let v = supervised_only_curve(seed);
        assert_eq!(v.len(), 10, "{v:?}");
        rises.push(
            v.windows(2)
                .map(|w| w[1] - w[0])
                .fold(f64::NEG_INFINITY, f64::max),
        );
        eprintln!("seed {seed}: {v:?}");
    }
    assert!(
        evalkit::median(&rises) <= 0.0,
        "largest rises per seed {rises:?}"
    );
}
