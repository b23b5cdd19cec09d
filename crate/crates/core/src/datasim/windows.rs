use super::TrajectorySample;
use crate::geometry::{rotate_xy, Frame};

/// Two seconds at 60 Hz.
pub const WINDOW_LEN: usize = 120;

/// A fixed-length training or evaluation window cut from one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Global-frame `ax ay az wx wy wz` per step.
    pub imu: Vec<[f64; 6]>,
    pub velocities: Vec<[f64; 2]>,
    pub positions: Vec<[f64; 2]>,
    /// Ground-truth velocity at the first step.
    pub v1: [f64; 2],
    /// Position one step before the window, from which positions integrate.
    pub anchor: [f64; 2],
    pub map_id: usize,
    /// Index of the source trajectory in its dataset.
    pub traj: usize,
    pub start: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.imu.len()
    }
    pub fn is_empty(&self) -> bool {
        self.imu.is_empty()
    }

    /// The same window with every horizontal quantity rotated by `phi` about
    /// the z axis. Positions rotate about the origin.
    pub fn rotated(&self, phi: f64) -> Window {
        let (sin, cos) = phi.sin_cos();
        let r = |v: [f64; 2]| rotate_xy(v, cos, sin);
        Window {
            imu: self
                .imu
                .iter()
                .map(|c| {
                    let a = r([c[0], c[1]]);
                    let w = r([c[3], c[4]]);
                    [a[0], a[1], c[2], w[0], w[1], c[5]]
                })
                .collect(),
            velocities: self.velocities.iter().map(|&v| r(v)).collect(),
            positions: self.positions.iter().map(|&p| r(p)).collect(),
            v1: r(self.v1),
            anchor: r(self.anchor),
            ..self.clone()
        }
    }
}

/// Cuts `sample` into windows of `window` steps every `stride` steps. A
/// sequence shorter than one window yields nothing (and a warning).
pub fn windowize(
    sample: &TrajectorySample,
    traj: usize,
    window: usize,
    stride: usize,
) -> Vec<Window> {
    assert!(
        window > 0 && stride > 0,
        "window and stride must be positive"
    );
    debug_assert_eq!(sample.imu.frame(), Frame::Global);
    let n = sample.truth.len();
    if n < window {
        log::warn!(
            "trajectory {} has {n} samples, fewer than one window of {window}",
            sample.name
        );
        return Vec::new();
    }
    let imu = sample.imu.samples();
    let v = sample.truth.velocities();
    let p = sample.truth.positions();
    (0..=n - window)
        .step_by(stride)
        .map(|start| Window {
            imu: imu[start..start + window]
                .iter()
                .map(|s| s.channels())
                .collect(),
            velocities: v[start..start + window].to_vec(),
            positions: p[start..start + window].to_vec(),
            v1: v[start],
            anchor: sample.truth.anchor(start),
            map_id: sample.map_id,
            traj,
            start,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasim::{PoseTrajectory, Split};
    use crate::geometry::{ImuSample, ImuSequence, Quaternion};

    fn sample(n: usize) -> TrajectorySample {
        let samples: Vec<ImuSample> = (0..n)
            .map(|t| ImuSample {
                t: t as f64 / 60.0,
                accel: [t as f64, 0.0, 9.81],
                gyro: [0.0, 0.0, -(t as f64)],
            })
            .collect();
        let imu =
            ImuSequence::new(samples, vec![Quaternion::IDENTITY; n], Frame::Global, 60.0).unwrap();
        let v = (0..n).map(|t| [t as f64 * 0.01, 1.0]).collect();
        let truth = PoseTrajectory::integrate([3.0, 4.0], v, 1.0 / 60.0).unwrap();
        TrajectorySample {
            name: "t".into(),
            raw: imu.clone(),
            imu,
            truth,
            map_id: 2,
            split: Split::Train,
        }
    }

    #[test]
    fn rotation_keeps_speeds_and_vertical_channels() {
        let w = &windowize(&sample(120), 0, 120, 120)[0];
        let r = w.rotated(1.1);
        for (a, b) in w.velocities.iter().zip(&r.velocities) {
            assert!((a[0].hypot(a[1]) - b[0].hypot(b[1])).abs() < 1e-12);
        }
        for (a, b) in w.imu.iter().zip(&r.imu) {
            assert_eq!(a[2], b[2]);
            assert_eq!(a[5], b[5]);
        }
        let back = r.rotated(-1.1);
        for (a, b) in w.positions.iter().zip(&back.positions) {
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn counts() {
        assert_eq!(windowize(&sample(240), 0, 120, 120).len(), 2);
        assert_eq!(windowize(&sample(120), 0, 120, 120).len(), 1);
        assert_eq!(windowize(&sample(119), 0, 120, 120).len(), 0);
        assert_eq!(windowize(&sample(240), 0, 120, 30).len(), 5);
    }

    #[test]
    fn non_overlapping_windows_partition_the_source() {
        let s = sample(360);
        let w = windowize(&s, 4, 120, 120);
        let imu: Vec<[f64; 6]> = w.iter().flat_map(|w| w.imu.clone()).collect();
        let vel: Vec<[f64; 2]> = w.iter().flat_map(|w| w.velocities.clone()).collect();
        let src: Vec<[f64; 6]> = s.imu.samples().iter().map(|x| x.channels()).collect();
        assert_eq!(imu, src);
        assert_eq!(vel, s.truth.velocities());
        assert_eq!(w[1].v1, s.truth.velocities()[120]);
        let p = s.truth.positions()[119];
        assert!((w[1].anchor[0] - p[0]).abs() < 1e-12 && (w[1].anchor[1] - p[1]).abs() < 1e-12);
        assert!(w.iter().all(|w| w.map_id == 2 && w.traj == 4));
    }
}
