//! IMU synthesis from a ground-truth walk.
//!
//! Global-frame signals come straight from the trajectory: horizontal
//! acceleration is the forward difference of the backward-difference
//! velocities, the vertical channel is gravity plus a gait bounce, and the
//! yaw rate follows the walking heading. A wandering device orientation then
//! maps everything into the body frame, where sensor noise is added. The
//! reported orientations carry GRV-like tilt drift and jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::PoseTrajectory;
use crate::error::{Error, Result};
use crate::geometry::{Frame, ImuSample, ImuSequence, Quaternion, Vec3};

pub const GRAVITY: f64 = 9.81;

#[derive(Debug, Clone, PartialEq)]
pub struct ImuSynthConfig {
    /// Random-walk intensity of the device orientation relative to the
    /// walking heading, rad/√s.
    pub orientation_wander: f64,
    /// White accelerometer noise, m/s².
    pub accel_noise: f64,
    /// Constant per-sequence accelerometer bias (std of the draw), m/s².
    pub accel_bias: f64,
    /// White gyroscope noise, rad/s.
    pub gyro_noise: f64,
    /// Per-sample orientation jitter on the reported quaternions, rad.
    pub grv_noise: f64,
    /// Slow orientation error on the reported quaternions (stationary std), rad.
    pub grv_drift: f64,
    pub gait_amplitude: f64,
    pub gait_frequency: f64,
}

impl ImuSynthConfig {
    /// Everything deterministic except the device mounting and wander.
    pub fn noise_free(orientation_wander: f64) -> Self {
        ImuSynthConfig {
            orientation_wander,
            accel_noise: 0.0,
            accel_bias: 0.0,
            gyro_noise: 0.0,
            grv_noise: 0.0,
            grv_drift: 0.0,
            gait_amplitude: 0.8,
            gait_frequency: 1.8,
        }
    }

    /// Noise levels in the range of a mid-grade phone IMU.
    pub fn phone() -> Self {
        ImuSynthConfig {
            orientation_wander: 0.05,
            accel_noise: 0.08,
            accel_bias: 0.03,
            gyro_noise: 0.01,
            grv_noise: 0.002,
            grv_drift: 0.01,
            ..Self::noise_free(0.05)
        }
    }

    /// Scales every sensor noise term (not the motion model) by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        ImuSynthConfig {
            accel_noise: self.accel_noise * k,
            accel_bias: self.accel_bias * k,
            gyro_noise: self.gyro_noise * k,
            grv_noise: self.grv_noise * k,
            grv_drift: self.grv_drift * k,
            ..self.clone()
        }
    }
}

fn gauss3(rng: &mut ChaCha8Rng) -> Vec3 {
    [
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    ]
}

/// Walking heading per sample. Stationary stretches take their neighbours'
/// heading, blending smoothly where the walker turns in place.
fn headings(traj: &PoseTrajectory) -> Vec<f64> {
    const MOVING: f64 = 0.05;
    let n = traj.len();
    let raw: Vec<Option<f64>> = traj
        .velocities()
        .iter()
        .map(|v| (v[0].hypot(v[1]) > MOVING).then(|| v[1].atan2(v[0])))
        .collect();
    // unwrap moving headings
    let mut out = vec![f64::NAN; n];
    let mut prev: Option<f64> = None;
    for (k, h) in raw.iter().enumerate() {
        if let Some(h) = *h {
            let u = match prev {
                None => h,
                Some(p) => {
                    p + (h - p + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU)
                        - std::f64::consts::PI
                }
            };
            out[k] = u;
            prev = Some(u);
        }
    }
    let Some(first) = out.iter().position(|h| !h.is_nan()) else {
        return vec![0.0; n];
    };
    let last = out.iter().rposition(|h| !h.is_nan()).unwrap();
    for k in 0..first {
        out[k] = out[first];
    }
    for k in last + 1..n {
        out[k] = out[last];
    }
    let mut k = first;
    while k < last {
        if out[k + 1].is_nan() {
            let a = k;
            let mut b = k + 1;
            while out[b].is_nan() {
                b += 1;
            }
            let (ha, hb) = (out[a], out[b]);
            for m in a + 1..b {
                let f = (m - a) as f64 / (b - a) as f64;
                let s = 0.5 - 0.5 * (std::f64::consts::PI * f).cos();
                out[m] = ha + s * (hb - ha);
            }
            k = b;
        } else {
            k += 1;
        }
    }
    out
}

/// Synthesizes a body-frame IMU sequence with per-sample orientations.
pub fn synthesize_imu(
    traj: &PoseTrajectory,
    seed: u64,
    cfg: &ImuSynthConfig,
) -> Result<ImuSequence> {
    if !(cfg.orientation_wander >= 0.0) {
        return Err(Error::InvalidArgument("negative orientation wander".into()));
    }
    let n = traj.len();
    let dt = traj.dt();
    let v = traj.velocities();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut accel_xy: Vec<[f64; 2]> = (0..n - 1)
        .map(|t| [(v[t + 1][0] - v[t][0]) / dt, (v[t + 1][1] - v[t][1]) / dt])
        .collect();
    accel_xy.push(accel_xy[n - 2]);
    let psi = headings(traj);
    let mut yaw_rate: Vec<f64> = (0..n - 1).map(|t| (psi[t + 1] - psi[t]) / dt).collect();
    yaw_rate.push(yaw_rate[n - 2]);

    // device mounting: a uniformly random rotation
    let mount = {
        let q: [f64; 4] = [
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        ];
        Quaternion::from_raw(q[0], q[1], q[2], q[3])
    };
    let bias = gauss3(&mut rng).map(|b| b * cfg.accel_bias);
    let gait_phase0: f64 = rng.random_range(0.0..std::f64::consts::TAU);

    const WANDER_TAU: f64 = 3.0;
    const DRIFT_TAU: f64 = 20.0;
    let mut wander = [0.0; 3];
    let mut drift = gauss3(&mut rng).map(|d| d * cfg.grv_drift);
    let mut gait_phase = gait_phase0;

    let mut samples = Vec::with_capacity(n);
    let mut orientations = Vec::with_capacity(n);
    for t in 0..n {
        let speed = v[t][0].hypot(v[t][1]);
        let gait = cfg.gait_amplitude * (speed / 1.0).min(1.0) * gait_phase.sin();
        gait_phase += std::f64::consts::TAU * cfg.gait_frequency * dt;

        let accel_g = [accel_xy[t][0], accel_xy[t][1], GRAVITY + gait];
        let gyro_g = [0.0, 0.0, yaw_rate[t]];

        let orientation = Quaternion::from_yaw(psi[t])
            .mul(&mount)
            .mul(&Quaternion::from_rotation_vector(wander));
        let inv = orientation.conjugate();
        let mut accel_b = crate::geometry::rotate_vector(&inv, accel_g)?;
        let mut gyro_b = crate::geometry::rotate_vector(&inv, gyro_g)?;
        if cfg.accel_noise > 0.0 || cfg.accel_bias > 0.0 {
            let e = gauss3(&mut rng);
            for k in 0..3 {
                accel_b[k] += bias[k] + cfg.accel_noise * e[k];
            }
        }
        if cfg.gyro_noise > 0.0 {
            let e = gauss3(&mut rng);
            for k in 0..3 {
                gyro_b[k] += cfg.gyro_noise * e[k];
            }
        }
        let reported = if cfg.grv_noise > 0.0 || cfg.grv_drift > 0.0 {
            let jitter = gauss3(&mut rng);
            let err = [
                drift[0] + cfg.grv_noise * jitter[0],
                drift[1] + cfg.grv_noise * jitter[1],
                drift[2] + cfg.grv_noise * jitter[2],
            ];
            let step = gauss3(&mut rng);
            let k = (2.0 * dt / DRIFT_TAU).sqrt() * cfg.grv_drift;
            for c in 0..3 {
                drift[c] += -drift[c] * dt / DRIFT_TAU + k * step[c];
            }
            orientation.mul(&Quaternion::from_rotation_vector(err))
        } else {
            orientation
        };
        if cfg.orientation_wander > 0.0 {
            let e = gauss3(&mut rng);
            for c in 0..3 {
                wander[c] +=
                    -wander[c] * dt / WANDER_TAU + cfg.orientation_wander * dt.sqrt() * e[c];
            }
        }
        samples.push(ImuSample {
            t: t as f64 * dt,
            accel: accel_b,
            gyro: gyro_b,
        });
        orientations.push(reported);
    }
    ImuSequence::new(samples, orientations, Frame::Body, 1.0 / dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::to_global;

    fn straight(n: usize, speed: f64) -> PoseTrajectory {
        PoseTrajectory::integrate([0.0, 0.0], vec![[speed * 0.6, speed * 0.8]; n], 1.0 / 60.0)
            .unwrap()
    }

    fn curvy(n: usize) -> PoseTrajectory {
        let v: Vec<[f64; 2]> = (0..n)
            .map(|t| {
                let s = t as f64 / 60.0;
                [1.0 + 0.2 * (1.3 * s).sin(), 0.5 * (0.7 * s).cos()]
            })
            .collect();
        PoseTrajectory::integrate([1.0, 2.0], v, 1.0 / 60.0).unwrap()
    }

    #[test]
    fn constant_velocity_has_no_horizontal_acceleration() {
        let traj = straight(200, 1.2);
        let imu = synthesize_imu(&traj, 3, &ImuSynthConfig::noise_free(0.0)).unwrap();
        let g = to_global(&imu).unwrap();
        for s in g.samples() {
            assert!(
                s.accel[0].abs() < 1e-9 && s.accel[1].abs() < 1e-9,
                "{:?}",
                s.accel
            );
        }
    }

    #[test]
    fn global_signals_recovered_and_double_integration_closes() {
        // 2 s at 60 Hz
        let traj = curvy(121);
        let imu = synthesize_imu(&traj, 5, &ImuSynthConfig::noise_free(0.3)).unwrap();
        assert_eq!(imu.frame(), Frame::Body);
        let g = to_global(&imu).unwrap();
        let dt = traj.dt();
        // independent oracle: second differences of the positions
        let p = traj.positions();
        for t in 1..traj.len() - 1 {
            let ax = (p[t + 1][0] - 2.0 * p[t][0] + p[t - 1][0]) / (dt * dt);
            let ay = (p[t + 1][1] - 2.0 * p[t][1] + p[t - 1][1]) / (dt * dt);
            let s = g.samples()[t];
            assert!((s.accel[0] - ax).abs() < 1e-6 && (s.accel[1] - ay).abs() < 1e-6);
        }
        let mut vel = traj.velocities()[0];
        let mut pos = traj.positions()[0];
        for t in 0..traj.len() - 1 {
            let a = g.samples()[t].accel;
            vel = [vel[0] + dt * a[0], vel[1] + dt * a[1]];
            pos = [pos[0] + dt * vel[0], pos[1] + dt * vel[1]];
            let truth = traj.positions()[t + 1];
            assert!((pos[0] - truth[0]).abs() < 1e-3 && (pos[1] - truth[1]).abs() < 1e-3);
        }
    }

    #[test]
    fn vertical_mean_is_gravity() {
        let traj = curvy(3600);
        let imu = synthesize_imu(&traj, 1, &ImuSynthConfig::phone()).unwrap();
        let g = to_global(&imu).unwrap();
        let mean = g.samples().iter().map(|s| s.accel[2]).sum::<f64>() / g.len() as f64;
        assert!((mean - GRAVITY).abs() < 0.05, "{mean}");
    }

    #[test]
    fn yaw_rate_follows_heading() {
        let traj = curvy(600);
        let imu = synthesize_imu(&traj, 2, &ImuSynthConfig::noise_free(0.0)).unwrap();
        let g = to_global(&imu).unwrap();
        let v = traj.velocities();
        for t in 10..500 {
            let h0 = v[t][1].atan2(v[t][0]);
            let h1 = v[t + 1][1].atan2(v[t + 1][0]);
            let rate = (h1 - h0) / traj.dt();
            assert!((g.samples()[t].gyro[2] - rate).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let traj = curvy(100);
        let a = synthesize_imu(&traj, 9, &ImuSynthConfig::phone()).unwrap();
        let b = synthesize_imu(&traj, 9, &ImuSynthConfig::phone()).unwrap();
        assert_eq!(a, b);
    }
}
