use super::*;
use proptest::{prop_assert, proptest};
use rand::Rng;

fn q(lower: Vec<[f64; 2]>, upper: Vec<[f64; 2]>) -> QuantileSeries {
    QuantileSeries::new(lower, upper, 0.05).unwrap()
}

#[test]
fn ate_examples() {
    let truth = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
    assert_eq!(ate(&truth, &truth).unwrap(), 0.0);
    let off: Vec<[f64; 2]> = truth.iter().map(|p| [p[0] + 0.6, p[1] + 0.8]).collect();
    assert!((ate(&truth, &off).unwrap() - 1.0).abs() < 1e-12);
    let pred = vec![[0.0, 0.0], [1.0, 3.0], [2.0, -4.0]];
    assert!((ate(&truth, &pred).unwrap() - (25.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert!(ate(&truth, &pred[..2]).is_err());
}

#[test]
fn rte_examples() {
    let truth: Vec<[f64; 2]> = (0..5).map(|k| [k as f64, 0.0]).collect();
    assert_eq!(rte(&truth, &truth, 1.0, 2.0).unwrap(), 0.0);
    let off: Vec<[f64; 2]> = truth.iter().map(|p| [p[0] + 3.0, p[1] - 1.0]).collect();
    assert!(rte(&truth, &off, 1.0, 2.0).unwrap().abs() < 1e-12);
    // three points, lag 2: one pair whose displacement differs by 0.5
    let t3 = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
    let p3 = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.5]];
    assert!((rte(&t3, &p3, 1.0, 2.0).unwrap() - 0.5).abs() < 1e-12);
    // lag 1: both steps off by 0.5
    let p3b = vec![[0.0, 0.0], [1.0, 0.5], [2.0, 1.0]];
    assert!((rte(&t3, &p3b, 1.0, 1.0).unwrap() - 0.5).abs() < 1e-12);
    // span 2 s shorter than a 4 s interval: scaled by 2
    assert!((rte(&t3, &p3, 1.0, 4.0).unwrap() - 1.0).abs() < 1e-12);
    assert!(rte(&t3[..1], &p3[..1], 1.0, 1.0).is_err());
}

#[test]
fn fde_examples() {
    let truth: Vec<[f64; 2]> = (0..=10).map(|k| [k as f64, 0.0]).collect();
    let mut pred = truth.clone();
    assert_eq!(fde(&truth, &pred).unwrap(), 0.0);
    pred[10] = [10.0, 1.0];
    assert!((fde(&truth, &pred).unwrap() - 0.1).abs() < 1e-12);
    let long: Vec<[f64; 2]> = (0..=50).map(|k| [k as f64, 0.0]).collect();
    let mut lp = long.clone();
    lp[50] = [50.0, 2.0];
    assert!((fde(&long, &lp).unwrap() - 0.04).abs() < 1e-12);
    assert!(fde(&[[1.0, 1.0], [1.0, 1.0]], &[[0.0, 0.0], [0.0, 0.0]]).is_err());
}

#[test]
fn picp_and_aiw_examples() {
    let truth = vec![[0.0, 0.0]; 4];
    let all = q(vec![[-1.0, -1.0]; 4], vec![[1.0, 1.0]; 4]);
    assert_eq!(picp(&truth, &all).unwrap(), 1.0);
    let half = q(
        vec![[-1.0, -1.0], [1.0, 1.0], [-1.0, -1.0], [1.0, 1.0]],
        vec![[1.0, 1.0], [2.0, 2.0], [1.0, 1.0], [2.0, 2.0]],
    );
    assert_eq!(picp(&truth, &half).unwrap(), 0.5);
    let one_axis = q(vec![[-1.0, 0.5]; 4], vec![[1.0, 1.0]; 4]);
    assert_eq!(picp(&truth, &one_axis).unwrap(), 0.0);
    let w = q(vec![[0.0, 0.0]; 3], vec![[3.0, 4.0]; 3]);
    assert_eq!(aiw(&w), 5.0);
    assert_eq!(aiw(&q(vec![[1.0, 2.0]; 2], vec![[1.0, 2.0]; 2])), 0.0);
    assert_eq!(
        aiw(&q(vec![[0.0, 0.0]; 2], vec![[1.0, 0.0], [0.0, 1.0]])),
        1.0
    );
}

#[test]
fn gaussian_conversion() {
    let out = GaussianBaselineOutput {
        mean: vec![[0.0, 0.0]],
        log_std: vec![[0.0, 2f64.ln()]],
    };
    let s = out.sigma()[0];
    assert!((s[0] - 1.0).abs() < 1e-15 && (s[1] - 2.0).abs() < 1e-15);
    let i = gaussian_to_interval(&out, 0.95).unwrap();
    assert_eq!(i.lower()[0], [-2.0, -4.0]);
    assert_eq!(i.upper()[0], [2.0, 4.0]);
    let one = GaussianBaselineOutput {
        mean: vec![[0.3, -0.2]],
        log_std: vec![[0.0, 0.0]],
    };
    let i = gaussian_to_interval(&one, 0.68).unwrap();
    assert_eq!(
        [
            i.upper()[0][0] - i.lower()[0][0],
            i.upper()[0][1] - i.lower()[0][1]
        ],
        [2.0, 2.0]
    );
    assert!(gaussian_to_interval(&one, 0.8).is_err());
}

fn random_path(rng: &mut impl Rng, n: usize) -> Vec<[f64; 2]> {
    let mut p = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)];
    (0..n)
        .map(|_| {
            p = [
                p[0] + rng.random_range(-0.5..0.5),
                p[1] + rng.random_range(-0.5..0.5),
            ];
            p
        })
        .collect()
}

proptest! {
    #[test]
    fn ate_invariant_under_rotation(seed in 0u64..1000, phi in 0.0f64..6.3) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = random_path(&mut rng, 30);
        let b = random_path(&mut rng, 30);
        let (s, c) = phi.sin_cos();
        let r = |v: &[[f64; 2]]| -> Vec<[f64; 2]> { v.iter().map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect() };
        prop_assert!((ate(&a, &b).unwrap() - ate(&r(&a), &r(&b)).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn picp_complement_and_aiw_shifts(seed in 0u64..1000, shift in -3.0f64..3.0) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = 40;
        let truth = random_path(&mut rng, n);
        let mid = random_path(&mut rng, n);
        let half: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)]).collect();
        let lo: Vec<[f64; 2]> = mid.iter().zip(&half).map(|(m, h)| [m[0] - h[0], m[1] - h[1]]).collect();
        let up: Vec<[f64; 2]> = mid.iter().zip(&half).map(|(m, h)| [m[0] + h[0], m[1] + h[1]]).collect();
        let series = q(lo.clone(), up.clone());
        prop_assert!(picp(&truth, &series).unwrap() + fraction_outside(&truth, &series).unwrap() == 1.0);
        let shifted = q(
            lo.iter().map(|l| [l[0] + shift, l[1] + shift]).collect(),
            up.iter().map(|u| [u[0] + shift, u[1] + shift]).collect(),
        );
        prop_assert!((aiw(&series) - aiw(&shifted)).abs() < 1e-9);
        let doubled = q(
            mid.iter().zip(&half).map(|(m, h)| [m[0] - 2.0 * h[0], m[1] - 2.0 * h[1]]).collect(),
            mid.iter().zip(&half).map(|(m, h)| [m[0] + 2.0 * h[0], m[1] + 2.0 * h[1]]).collect(),
        );
        prop_assert!((aiw(&doubled) - 2.0 * aiw(&series)).abs() < 1e-9);
    }

    #[test]
    fn fde_scales_inversely_with_path(seed in 0u64..1000, s in 0.5f64..4.0) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let truth = random_path(&mut rng, 20);
        let mut pred = truth.clone();
        pred[19] = [truth[19][0] + 0.3, truth[19][1] - 0.4];
        let scaled: Vec<[f64; 2]> = truth.iter().map(|p| [s * p[0], s * p[1]]).collect();
        let mut sp = scaled.clone();
        sp[19] = [scaled[19][0] + 0.3, scaled[19][1] - 0.4];
        prop_assert!((fde(&scaled, &sp).unwrap() - fde(&truth, &pred).unwrap() / s).abs() < 1e-9);
    }
}

#[test]
fn levels_and_settings() {
    assert_eq!(Level::from_percent(90).unwrap().alpha(), 0.05);
    assert!(Level::from_percent(80).is_err());
    let s = robustness_settings(0.1, 3);
    assert_eq!(s.len(), 6);
    assert!(s[0].is_identity());
    assert_eq!(s[5].dropout_rate, 0.1);
}

#[test]
fn cdf_quantiles_and_drift() {
    let c = cdf(&[3.0, 1.0, 2.0, f64::NAN]);
    assert_eq!(c, vec![(1.0, 1.0 / 3.0), (2.0, 2.0 / 3.0), (3.0, 1.0)]);
    assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), 2.5);
    let truth: Vec<[f64; 2]> = (0..5).map(|k| [k as f64, 0.0]).collect();
    let pred: Vec<[f64; 2]> = (0..5).map(|k| [k as f64, k as f64]).collect();
    let d = drift_vs_distance(&[(&truth, &pred)], 2.0).unwrap();
    assert_eq!(d.len(), 3);
    assert_eq!(d[0], (1.0, 0.25, 0.5, 0.75));
    assert_eq!(d[2].2, 4.0);
}

fn block(name: &str, level: u32, ate_m: f64) -> ReportBlock {
    ReportBlock {
        trajectory: name.into(),
        noise_mult: 0.5,
        dropout: 0.0,
        level,
        seed: 7,
        ate_m,
        rte_m: 0.25,
        fde_frac: 0.01,
        picp: 0.9,
        aiw_mps: 0.3,
    }
}

#[test]
fn report_round_trip_and_aggregates() {
    let r = MetricsReport::from_blocks(vec![
        block("a", 95, 1.0),
        block("b", 95, 3.0),
        block("a", 68, 0.5),
    ]);
    assert_eq!(r.aggregates.len(), 2);
    assert_eq!(r.aggregates[0].ate_m, 2.0);
    let text = r.to_text();
    assert_eq!(MetricsReport::parse(&text).unwrap(), r);
    assert!(MetricsReport::parse("UREP1\n").is_err());
    assert!(MetricsReport::parse(&text.replace("picp=0.9", "picp=1.5")).is_err());
    assert!(MetricsReport::parse(&text.replace("UREP1", "UREP2")).is_err());
    assert!(MetricsReport::parse(&format!("{text}\n[trajectory]\nfoo=1\n")).is_err());
}

mod pipeline {
    use super::*;
    use crate::datasim::{simulate, SimConfig};
    use crate::trainer::{run_curriculum, Phase};
    use std::sync::OnceLock;

    fn trained() -> &'static (tempfile::TempDir, Dataset) {
        static CELL: OnceLock<(tempfile::TempDir, Dataset)> = OnceLock::new();
        CELL.get_or_init(|| {
            let ds = simulate(&SimConfig::new(11, 7, 6.0, 60.0)).unwrap();
            let cfg = TrainConfig {
                alphas: vec![0.16, 0.05, 0.025],
                hidden: 8,
                head_hidden: 8,
                quantile_epochs: 1,
                cgan_iterations: 3,
                joint_iterations: 0,
                batch: 4,
                val_every: 3,
                val_windows: 4,
                ..TrainConfig::desk(11)
            };
            let dir = tempfile::tempdir().unwrap();
            run_curriculum(&ds, &cfg, dir.path(), Phase::All).unwrap();
            (dir, ds)
        })
    }

    #[test]
    fn chained_inference_covers_the_sequence() {
        let (dir, ds) = trained();
        let p = Pipeline::load(dir.path()).unwrap();
        let s = ds.test().next().unwrap();
        let (start, v1) = start_state(s);
        let inf = infer(
            &p,
            &s.imu,
            ds.distance(s.map_id),
            start,
            v1,
            &Level::ALL,
            None,
        )
        .unwrap();
        assert_eq!(inf.positions.len(), s.imu.len());
        assert_eq!(inf.intervals.len(), 3);
        // positions integrate the velocities across window boundaries
        let dt = 1.0 / s.imu.rate();
        for t in 1..inf.positions.len() {
            let want = [
                inf.positions[t - 1][0] + dt * inf.velocities[t][0],
                inf.positions[t - 1][1] + dt * inf.velocities[t][1],
            ];
            assert!(
                (inf.positions[t][0] - want[0]).abs() < 1e-4
                    && (inf.positions[t][1] - want[1]).abs() < 1e-4
            );
        }
        let a = infer(
            &p,
            &s.imu,
            ds.distance(s.map_id),
            start,
            v1,
            &[Level::L95],
            Some(1),
        )
        .unwrap();
        let b = infer(
            &p,
            &s.imu,
            ds.distance(s.map_id),
            start,
            v1,
            &[Level::L95],
            Some(2),
        )
        .unwrap();
        assert_ne!(a.positions, b.positions);
    }

    #[test]
    fn clipping_keeps_velocities_inside_the_conditioning_interval() {
        let (dir, ds) = trained();
        let mut p = Pipeline::load(dir.path()).unwrap();
        let cond_stem = if dir
            .path()
            .join(format!("{}.umck", crate::trainer::JOINT_CGAN_STEM))
            .exists()
        {
            crate::trainer::joint_qnet_stem(p.config.cond_alpha)
        } else {
            crate::trainer::qnet_stem(p.config.cond_alpha)
        };
        let (cond, _) =
            QuantileNet::load(dir.path(), &cond_stem, crate::trainer::TRAINING_DTYPE).unwrap();
        p.level_qnets = vec![(Level::L95, cond)];
        p.clip_to_interval = true;
        let s = ds.test().next().unwrap();
        let (start, v1) = start_state(s);
        let inf = infer(
            &p,
            &s.imu,
            ds.distance(s.map_id),
            start,
            v1,
            &[Level::L95],
            Some(3),
        )
        .unwrap();
        let q = &inf.intervals[0].1;
        for t in 0..inf.velocities.len() {
            for a in 0..2 {
                let v = inf.velocities[t][a];
                assert!(
                    v >= q.lower()[t][a] - 1e-6 && v <= q.upper()[t][a] + 1e-6,
                    "t={t} axis {a}"
                );
            }
        }
        p.clip_to_interval = false;
        let free = infer(
            &p,
            &s.imu,
            ds.distance(s.map_id),
            start,
            v1,
            &[Level::L95],
            Some(3),
        )
        .unwrap();
        assert_eq!(free.positions.len(), inf.positions.len());
    }

    #[test]
    fn robustness_protocol_shape_and_identity() {
        let (dir, ds) = trained();
        let p = Pipeline::load(dir.path()).unwrap();
        let rob = run_robustness(&p, ds, &Level::ALL, 0.1, 5).unwrap();
        let n_test = ds.test().count();
        assert_eq!(rob.blocks.len(), n_test * 6 * 3);
        assert_eq!(rob.aggregates.len(), 6 * 3);
        let (clean, _) = run_eval(&p, ds, &Level::ALL, 5).unwrap();
        let zero: Vec<&ReportBlock> = rob
            .blocks
            .iter()
            .filter(|b| b.noise_mult == 0.0 && b.dropout == 0.0)
            .collect();
        assert_eq!(zero.len(), clean.blocks.len());
        for (a, b) in zero.iter().zip(&clean.blocks) {
            for (x, y) in [
                (a.ate_m, b.ate_m),
                (a.rte_m, b.rte_m),
                (a.fde_frac, b.fde_frac),
                (a.picp, b.picp),
                (a.aiw_mps, b.aiw_mps),
            ] {
                assert!((x - y).abs() <= 1e-9);
            }
        }
        let again = run_robustness(&p, ds, &Level::ALL, 0.1, 5).unwrap();
        assert_eq!(again.to_text(), rob.to_text());
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            Pipeline::load(empty.path()),
            Err(Error::MissingCheckpoint(_))
        ));
    }
}
