//! Quaternion algebra, body-to-global frame transforms and planar rotation
//! augmentation.
//!
//! Quaternions are stored `w, x, y, z` and always have unit norm. Vectors are
//! plain `[f64; 3]` arrays in a right-handed, z-up frame.

use crate::datasim::PoseTrajectory;
use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Largest norm deviation that [`Quaternion::new`] silently normalizes away.
pub const NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Builds a unit quaternion, normalizing inputs whose norm is within
    /// [`NORM_TOLERANCE`] of one and rejecting anything further off.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        if ![w, x, y, z].iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite quaternion ({w}, {x}, {y}, {z})"
            )));
        }
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "quaternion norm {norm} deviates from 1 by more than {NORM_TOLERANCE}"
            )));
        }
        Ok(Self::from_raw(w, x, y, z))
    }

    /// Normalizes an arbitrary non-zero quaternion.
    pub(crate) fn from_raw(w: f64, x: f64, y: f64, z: f64) -> Self {
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        Quaternion {
            w: w / norm,
            x: x / norm,
            y: y / norm,
            z: z / norm,
        }
    }

    /// Rotation by `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self> {
        let n = norm3(axis);
        if !(n > 0.0) || !n.is_finite() || !angle.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "bad axis/angle {axis:?}, {angle}"
            )));
        }
        let (s, c) = (0.5 * angle).sin_cos();
        Ok(Self::from_raw(
            c,
            s * axis[0] / n,
            s * axis[1] / n,
            s * axis[2] / n,
        ))
    }

    pub fn from_yaw(yaw: f64) -> Self {
        let (s, c) = (0.5 * yaw).sin_cos();
        Quaternion {
            w: c,
            x: 0.0,
            y: 0.0,
            z: s,
        }
    }

    /// Small rotation `exp(θ/2)` for a rotation vector `θ`.
    pub fn from_rotation_vector(theta: Vec3) -> Self {
        let angle = norm3(theta);
        if angle < 1e-12 {
            return Self::from_raw(1.0, 0.5 * theta[0], 0.5 * theta[1], 0.5 * theta[2]);
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let k = s / angle;
        Self::from_raw(c, k * theta[0], k * theta[1], k * theta[2])
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn conjugate(&self) -> Self {
        Quaternion {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Hamilton product `self * rhs`, renormalized.
    pub fn mul(&self, rhs: &Quaternion) -> Self {
        let (a, b) = (self, rhs);
        Self::from_raw(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    fn rotate_unchecked(&self, v: Vec3) -> Vec3 {
        // v' = v + 2w(u x v) + 2u x (u x v)
        let u = [self.x, self.y, self.z];
        let uv = cross(u, v);
        let uuv = cross(u, uv);
        [
            v[0] + 2.0 * (self.w * uv[0] + uuv[0]),
            v[1] + 2.0 * (self.w * uv[1] + uuv[1]),
            v[2] + 2.0 * (self.w * uv[2] + uuv[2]),
        ]
    }
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm3(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Computes `q v q*`.
pub fn rotate_vector(q: &Quaternion, v: Vec3) -> Result<Vec3> {
    if !v.iter().all(|c| c.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite vector {v:?}")));
    }
    Ok(q.rotate_unchecked(v))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    Body,
    Global,
}

impl Frame {
    pub fn as_str(&self) -> &'static str {
        match self {
            Frame::Body => "body",
            Frame::Global => "global",
        }
    }
}

impl std::str::FromStr for Frame {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "body" => Ok(Frame::Body),
            "global" => Ok(Frame::Global),
            other => Err(Error::InvalidArgument(format!("unknown frame '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Linear acceleration, m/s².
    pub accel: Vec3,
    /// Angular velocity, rad/s.
    pub gyro: Vec3,
}

impl ImuSample {
    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.accel.iter().all(|c| c.is_finite())
            && self.gyro.iter().all(|c| c.is_finite())
    }

    /// The six channels in `ax ay az wx wy wz` order.
    pub fn channels(&self) -> [f64; 6] {
        [
            self.accel[0],
            self.accel[1],
            self.accel[2],
            self.gyro[0],
            self.gyro[1],
            self.gyro[2],
        ]
    }

    pub fn set_channels(&mut self, c: [f64; 6]) {
        self.accel = [c[0], c[1], c[2]];
        self.gyro = [c[3], c[4], c[5]];
    }
}

/// Time-stamped inertial samples with one orientation per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuSequence {
    samples: Vec<ImuSample>,
    orientations: Vec<Quaternion>,
    frame: Frame,
    rate: f64,
}

impl ImuSequence {
    pub fn new(
        samples: Vec<ImuSample>,
        orientations: Vec<Quaternion>,
        frame: Frame,
        rate: f64,
    ) -> Result<Self> {
        crate::error::check_len(
            "imu samples vs orientations",
            samples.len(),
            orientations.len(),
        )?;
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad sampling rate {rate}")));
        }
        if let Some(bad) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite imu sample at index {bad}"
            )));
        }
        if let Some(i) = samples.windows(2).position(|w| w[1].t <= w[0].t) {
            return Err(Error::InvalidArgument(format!(
                "timestamps not strictly increasing at index {}",
                i + 1
            )));
        }
        Ok(ImuSequence {
            samples,
            orientations,
            frame,
            rate,
        })
    }

    pub fn samples(&self) -> &[ImuSample] {
        &self.samples
    }
    pub fn orientations(&self) -> &[Quaternion] {
        &self.orientations
    }
    pub fn frame(&self) -> Frame {
        self.frame
    }
    pub fn rate(&self) -> f64 {
        self.rate
    }
    pub fn len(&self) -> usize {
        self.samples.len()
    }
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Replaces the sample values while keeping timestamps, orientations and
    /// frame. Used by perturbations, which never move timestamps.
    pub(crate) fn with_channels(&self, channels: &[[f64; 6]]) -> Self {
        let samples = self
            .samples
            .iter()
            .zip(channels)
            .map(|(s, c)| {
                let mut s = *s;
                s.set_channels(*c);
                s
            })
            .collect();
        ImuSequence {
            samples,
            orientations: self.orientations.clone(),
            frame: self.frame,
            rate: self.rate,
        }
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        ImuSequence {
            samples: self.samples[start..start + len].to_vec(),
            orientations: self.orientations[start..start + len].to_vec(),
            frame: self.frame,
            rate: self.rate,
        }
    }
}

/// Rotates every sample from the body frame into the global frame using its
/// own orientation.
pub fn to_global(seq: &ImuSequence) -> Result<ImuSequence> {
    if seq.frame == Frame::Global {
        return Err(Error::InvalidState(
            "sequence is already in the global frame".into(),
        ));
    }
    let samples = seq
        .samples
        .iter()
        .zip(&seq.orientations)
        .map(|(s, q)| ImuSample {
            t: s.t,
            accel: q.rotate_unchecked(s.accel),
            gyro: q.rotate_unchecked(s.gyro),
        })
        .collect();
    Ok(ImuSequence {
        samples,
        orientations: seq.orientations.clone(),
        frame: Frame::Global,
        rate: seq.rate,
    })
}

/// Inverse of [`to_global`]: expresses global-frame samples in the body frame.
pub fn to_body(seq: &ImuSequence) -> Result<ImuSequence> {
    if seq.frame == Frame::Body {
        return Err(Error::InvalidState(
            "sequence is already in the body frame".into(),
        ));
    }
    let samples = seq
        .samples
        .iter()
        .zip(&seq.orientations)
        .map(|(s, q)| {
            let qc = q.conjugate();
            ImuSample {
                t: s.t,
                accel: qc.rotate_unchecked(s.accel),
                gyro: qc.rotate_unchecked(s.gyro),
            }
        })
        .collect();
    Ok(ImuSequence {
        samples,
        orientations: seq.orientations.clone(),
        frame: Frame::Body,
        rate: seq.rate,
    })
}

#[inline]
pub(crate) fn rotate_xy(v: [f64; 2], cos: f64, sin: f64) -> [f64; 2] {
    [cos * v[0] - sin * v[1], sin * v[0] + cos * v[1]]
}

/// Rotates the horizontal components of accelerations, angular velocities,
/// velocities and positions by `phi` about the z axis. Vertical components are
/// left untouched.
pub fn planar_rotate(
    seq: &ImuSequence,
    traj: &PoseTrajectory,
    phi: f64,
) -> Result<(ImuSequence, PoseTrajectory)> {
    if seq.frame != Frame::Global {
        return Err(Error::InvalidState(
            "planar rotation needs a global-frame sequence".into(),
        ));
    }
    if !phi.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite angle {phi}")));
    }
    let (sin, cos) = phi.sin_cos();
    let samples = seq
        .samples
        .iter()
        .map(|s| {
            let a = rotate_xy([s.accel[0], s.accel[1]], cos, sin);
            let w = rotate_xy([s.gyro[0], s.gyro[1]], cos, sin);
            ImuSample {
                t: s.t,
                accel: [a[0], a[1], s.accel[2]],
                gyro: [w[0], w[1], s.gyro[2]],
            }
        })
        .collect();
    let rotated = ImuSequence {
        samples,
        orientations: seq.orientations.clone(),
        frame: Frame::Global,
        rate: seq.rate,
    };
    let positions = traj
        .positions()
        .iter()
        .map(|p| rotate_xy(*p, cos, sin))
        .collect();
    let velocities = traj
        .velocities()
        .iter()
        .map(|v| rotate_xy(*v, cos, sin))
        .collect();
    let traj = PoseTrajectory::new(positions, velocities, traj.dt())?;
    Ok((rotated, traj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn unit_quat() -> impl Strategy<Value = Quaternion> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("non-degenerate", |(w, x, y, z)| {
                w * w + x * x + y * y + z * z > 1e-3
            })
            .prop_map(|(w, x, y, z)| Quaternion::from_raw(w, x, y, z))
    }

    fn vec3() -> impl Strategy<Value = Vec3> {
        (-10.0..10.0f64, -10.0..10.0f64, -10.0..10.0f64).prop_map(|(a, b, c)| [a, b, c])
    }

    fn close3(a: Vec3, b: Vec3, tol: f64) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn identity_rotation() {
        let out = rotate_vector(&Quaternion::IDENTITY, [1.0, 2.0, 3.0]).unwrap();
        assert_eq!(out, [1.0, 2.0, 3.0]);
    }

    #[test]
    fn quarter_turn_about_z() {
        let q = Quaternion::from_axis_angle([0.0, 0.0, 1.0], FRAC_PI_2).unwrap();
        let out = rotate_vector(&q, [1.0, 0.0, 0.0]).unwrap();
        assert!(close3(out, [0.0, 1.0, 0.0], 1e-9), "{out:?}");
    }

    #[test]
    fn norm_preserved_for_fixed_vector() {
        let q = Quaternion::from_raw(0.3, -0.5, 0.7, 0.2);
        let v = [0.3, -0.4, 1.2];
        let out = rotate_vector(&q, v).unwrap();
        assert!((norm3(out) - norm3(v)).abs() < 1e-9);
    }

    #[test]
    fn non_finite_vector_rejected() {
        let err = rotate_vector(&Quaternion::IDENTITY, [f64::NAN, 0.0, 0.0]);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn constructor_normalizes_small_deviation_and_rejects_large() {
        let q = Quaternion::new(1.0005, 0.0, 0.0, 0.0).unwrap();
        assert!((q.w() - 1.0).abs() < 1e-15);
        let n: f64 = q.to_array().iter().map(|c| c * c).sum();
        assert!((n - 1.0).abs() <= 1e-9);
        assert!(Quaternion::new(1.01, 0.0, 0.0, 0.0).is_err());
        assert!(Quaternion::new(f64::INFINITY, 0.0, 0.0, 0.0).is_err());
    }

    fn seq_with(accel: Vec3, q: Quaternion, n: usize) -> ImuSequence {
        let samples = (0..n)
            .map(|i| ImuSample {
                t: i as f64 / 60.0,
                accel,
                gyro: [0.1, -0.2, 0.3],
            })
            .collect();
        ImuSequence::new(samples, vec![q; n], Frame::Body, 60.0).unwrap()
    }

    #[test]
    fn to_global_identity_is_noop() {
        let seq = seq_with([1.0, 2.0, 3.0], Quaternion::IDENTITY, 5);
        let g = to_global(&seq).unwrap();
        assert_eq!(g.frame(), Frame::Global);
        assert_eq!(g.samples(), seq.samples());
    }

    #[test]
    fn to_global_half_turn() {
        let q = Quaternion::from_yaw(PI);
        let g = to_global(&seq_with([1.0, 0.0, 0.0], q, 4)).unwrap();
        for s in g.samples() {
            assert!(close3(s.accel, [-1.0, 0.0, 0.0], 1e-12));
        }
    }

    #[test]
    fn to_global_twice_is_an_error() {
        let g = to_global(&seq_with([1.0, 0.0, 0.0], Quaternion::IDENTITY, 2)).unwrap();
        assert!(matches!(to_global(&g), Err(Error::InvalidState(_))));
    }

    #[test]
    fn sequence_rejects_non_monotonic_time() {
        let s = ImuSample {
            t: 0.0,
            accel: [0.0; 3],
            gyro: [0.0; 3],
        };
        let r = ImuSequence::new(vec![s, s], vec![Quaternion::IDENTITY; 2], Frame::Body, 60.0);
        assert!(r.is_err());
    }

    fn planar_fixture() -> (ImuSequence, PoseTrajectory) {
        let seq = to_global(&seq_with([0.5, -0.25, 9.81], Quaternion::IDENTITY, 3)).unwrap();
        let traj = PoseTrajectory::new(
            vec![[0.0, 0.0], [1.0, 0.0], [2.0, 1.0]],
            vec![[1.0, 0.0], [1.0, 0.0], [0.6, 0.8]],
            1.0 / 60.0,
        )
        .unwrap();
        (seq, traj)
    }

    #[test]
    fn planar_rotate_zero_is_identity() {
        let (seq, traj) = planar_fixture();
        let (s2, t2) = planar_rotate(&seq, &traj, 0.0).unwrap();
        assert_eq!(s2, seq);
        assert_eq!(t2, traj);
    }

    #[test]
    fn planar_rotate_quarter_turn_velocity() {
        let (seq, traj) = planar_fixture();
        let (_, t2) = planar_rotate(&seq, &traj, FRAC_PI_2).unwrap();
        let v = t2.velocities()[0];
        assert!((v[0]).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn planar_rotate_rejects_body_frame() {
        let seq = seq_with([0.0; 3], Quaternion::IDENTITY, 3);
        let (_, traj) = planar_fixture();
        assert!(matches!(
            planar_rotate(&seq, &traj, 1.0),
            Err(Error::InvalidState(_))
        ));
    }

    proptest! {
        #[test]
        fn rotation_preserves_norm(q in unit_quat(), v in vec3()) {
            let out = rotate_vector(&q, v).unwrap();
            prop_assert!((norm3(out) - norm3(v)).abs() <= 1e-9);
        }

        #[test]
        fn conjugate_rotation_inverts(q in unit_quat(), v in vec3()) {
            let back = rotate_vector(&q, rotate_vector(&q.conjugate(), v).unwrap()).unwrap();
            prop_assert!(close3(back, v, 1e-9));
        }

        #[test]
        fn conjugate_is_involution(q in unit_quat()) {
            prop_assert_eq!(q.conjugate().conjugate(), q);
        }

        #[test]
        fn planar_rotate_round_trip(phi in 0.0..(2.0 * PI)) {
            let (seq, traj) = planar_fixture();
            let (s1, t1) = planar_rotate(&seq, &traj, phi).unwrap();
            let (s2, t2) = planar_rotate(&s1, &t1, -phi).unwrap();
            for (a, b) in s2.samples().iter().zip(seq.samples()) {
                prop_assert!(close3(a.accel, b.accel, 1e-9));
                prop_assert!(close3(a.gyro, b.gyro, 1e-9));
            }
            for (a, b) in t2.positions().iter().zip(traj.positions()) {
                prop_assert!((a[0] - b[0]).abs() <= 1e-9 && (a[1] - b[1]).abs() <= 1e-9);
            }
            // vertical channels untouched, bitwise
            for (a, b) in s1.samples().iter().zip(seq.samples()) {
                prop_assert_eq!(a.accel[2].to_bits(), b.accel[2].to_bits());
                prop_assert_eq!(a.gyro[2].to_bits(), b.gyro[2].to_bits());
            }
            // horizontal speed is an isometry invariant
            for (a, b) in t1.velocities().iter().zip(traj.velocities()) {
                prop_assert!((a[0].hypot(a[1]) - b[0].hypot(b[1])).abs() <= 1e-9);
            }
        }
    }
}
