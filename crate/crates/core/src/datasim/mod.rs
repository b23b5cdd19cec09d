//! Synthetic floor plans and walks, IMU synthesis, dataset files, windowing
//! and evaluation-time perturbations.

mod dataset;
mod floorplan;
mod imu;
mod perturb;
mod walk;
mod windows;

pub use dataset::{
    simulate, Dataset, MapEntry, SimConfig, Split, TrajectoryFile, TrajectorySample, TRAJ_MAGIC,
};
pub use floorplan::generate_floorplan;
pub use imu::{synthesize_imu, ImuSynthConfig, GRAVITY};
pub use perturb::{estimate_sigma_imu, perturb, PerturbationSpec, NOISE_MULTIPLIERS};
pub use walk::{generate_trajectory, WalkConfig};
pub use windows::{windowize, Window, WINDOW_LEN};

use crate::error::{Error, Result};

/// Planar positions and velocities in the global frame.
///
/// Positions and velocities are linked by backward differences:
/// `positions[t] = positions[t-1] + dt * velocities[t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseTrajectory {
    positions: Vec<[f64; 2]>,
    velocities: Vec<[f64; 2]>,
    dt: f64,
}

impl PoseTrajectory {
    pub fn new(positions: Vec<[f64; 2]>, velocities: Vec<[f64; 2]>, dt: f64) -> Result<Self> {
        crate::error::check_len("positions vs velocities", positions.len(), velocities.len())?;
        if positions.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "trajectory needs at least 2 samples, got {}",
                positions.len()
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad sampling period {dt}")));
        }
        let finite = |v: &[[f64; 2]]| v.iter().all(|p| p[0].is_finite() && p[1].is_finite());
        if !finite(&positions) || !finite(&velocities) {
            return Err(Error::InvalidArgument("non-finite trajectory".into()));
        }
        Ok(PoseTrajectory {
            positions,
            velocities,
            dt,
        })
    }

    /// Integrates `velocities` forward from `anchor`, the position one sample
    /// before the first velocity.
    pub fn integrate(anchor: [f64; 2], velocities: Vec<[f64; 2]>, dt: f64) -> Result<Self> {
        let mut p = anchor;
        let positions = velocities
            .iter()
            .map(|v| {
                p = [p[0] + dt * v[0], p[1] + dt * v[1]];
                p
            })
            .collect();
        Self::new(positions, velocities, dt)
    }

    /// Velocities from backward differences; the first velocity repeats the
    /// second.
    pub fn from_positions(positions: Vec<[f64; 2]>, dt: f64) -> Result<Self> {
        if positions.len() < 2 {
            return Err(Error::InvalidArgument(
                "trajectory needs at least 2 samples".into(),
            ));
        }
        let mut velocities: Vec<[f64; 2]> = positions
            .windows(2)
            .map(|w| [(w[1][0] - w[0][0]) / dt, (w[1][1] - w[0][1]) / dt])
            .collect();
        velocities.insert(0, velocities[0]);
        Self::new(positions, velocities, dt)
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }
    pub fn velocities(&self) -> &[[f64; 2]] {
        &self.velocities
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn len(&self) -> usize {
        self.positions.len()
    }
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Position one sample before `start`, consistent with the integration rule.
    pub fn anchor(&self, start: usize) -> [f64; 2] {
        let p = self.positions[start];
        let v = self.velocities[start];
        [p[0] - self.dt * v[0], p[1] - self.dt * v[1]]
    }

    pub fn path_length(&self) -> f64 {
        self.positions
            .windows(2)
            .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
            .sum()
    }

    /// Cumulative travelled distance at every sample.
    pub fn travelled(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = vec![0.0];
        for w in self.positions.windows(2) {
            acc += (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
            out.push(acc);
        }
        out
    }
}

/// Mixes a base seed with a stream tag (splitmix64 finalizer), so independent
/// consumers of one user seed get decorrelated generators.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integration_invariant() {
        let v = vec![[1.0, 0.5], [0.2, -0.1], [0.0, 3.0]];
        let t = PoseTrajectory::integrate([2.0, -1.0], v, 0.1).unwrap();
        for k in 1..t.len() {
            let p = t.positions()[k - 1];
            let v = t.velocities()[k];
            assert!((t.positions()[k][0] - (p[0] + 0.1 * v[0])).abs() <= 1e-9);
            assert!((t.positions()[k][1] - (p[1] + 0.1 * v[1])).abs() <= 1e-9);
        }
        assert_eq!(t.anchor(0), [2.0, -1.0]);
    }

    #[test]
    fn too_short_rejected() {
        assert!(PoseTrajectory::new(vec![[0.0, 0.0]], vec![[0.0, 0.0]], 0.1).is_err());
    }

    #[test]
    fn path_length_of_square() {
        let t = PoseTrajectory::from_positions(
            vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]],
            1.0,
        )
        .unwrap();
        assert_eq!(t.path_length(), 3.0);
        assert_eq!(t.velocities()[0], t.velocities()[1]);
    }
}
