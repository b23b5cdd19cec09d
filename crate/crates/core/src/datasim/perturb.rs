//! Evaluation-time degradations: additive Gaussian noise scaled by the
//! dataset's IMU noise level, and whole-frame dropout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Dataset;
use crate::error::{Error, Result};
use crate::geometry::{Frame, ImuSequence};

/// Noise multipliers of the robustness protocol, in units of sigma_imu.
pub const NOISE_MULTIPLIERS: [f64; 5] = [0.0, 0.1, 0.5, 1.0, 5.0];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSpec {
    pub noise_multiplier: f64,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn clean(seed: u64) -> Self {
        PerturbationSpec {
            noise_multiplier: 0.0,
            dropout_rate: 0.0,
            seed,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.noise_multiplier == 0.0 && self.dropout_rate == 0.0
    }
}

/// Adds `multiplier * sigma_imu` Gaussian noise per axis, then zeroes whole
/// frames with probability `dropout_rate`.
pub fn perturb(
    seq: &ImuSequence,
    spec: &PerturbationSpec,
    sigma_imu: &[f64; 6],
) -> Result<ImuSequence> {
    if seq.frame() != Frame::Global {
        return Err(Error::InvalidState(
            "perturbations apply to global-frame sequences".into(),
        ));
    }
    if !(spec.noise_multiplier >= 0.0 && spec.noise_multiplier.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "bad noise multiplier {}",
            spec.noise_multiplier
        )));
    }
    if !(0.0..=1.0).contains(&spec.dropout_rate) {
        return Err(Error::InvalidArgument(format!(
            "bad dropout rate {}",
            spec.dropout_rate
        )));
    }
    if spec.is_identity() {
        return Ok(seq.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let channels: Vec<[f64; 6]> = seq
        .samples()
        .iter()
        .map(|s| {
            let mut c = s.channels();
            if spec.noise_multiplier > 0.0 {
                for k in 0..6 {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    c[k] += spec.noise_multiplier * sigma_imu[k] * e;
                }
            }
            if spec.dropout_rate > 0.0 && rng.random::<f64>() < spec.dropout_rate {
                c = [0.0; 6];
            }
            c
        })
        .collect();
    Ok(seq.with_channels(&channels))
}

/// Per-axis residual std around a centered moving average.
fn residual_sq(seq: &ImuSequence, half: usize, acc: &mut [f64; 6]) -> usize {
    let ch: Vec<[f64; 6]> = seq.samples().iter().map(|s| s.channels()).collect();
    let n = ch.len();
    if n < 2 * half + 1 {
        return 0;
    }
    // prefix sums for O(n) moving averages
    let mut prefix = vec![[0.0f64; 6]; n + 1];
    for t in 0..n {
        for k in 0..6 {
            prefix[t + 1][k] = prefix[t][k] + ch[t][k];
        }
    }
    let w = (2 * half + 1) as f64;
    for t in half..n - half {
        for k in 0..6 {
            let mean = (prefix[t + half + 1][k] - prefix[t - half][k]) / w;
            let r = ch[t][k] - mean;
            acc[k] += r * r;
        }
    }
    n - 2 * half
}

/// Noise level of the training split: the standard deviation of each channel
/// around its 0.5 s centered moving average.
pub fn estimate_sigma_imu(dataset: &Dataset) -> Result<[f64; 6]> {
    let seqs: Vec<&ImuSequence> = dataset.train().map(|s| &s.imu).collect();
    sigma_from_sequences(&seqs)
}

pub(crate) fn sigma_from_sequences(seqs: &[&ImuSequence]) -> Result<[f64; 6]> {
    if seqs.is_empty() {
        return Err(Error::Empty(
            "no training trajectories for sigma_imu".into(),
        ));
    }
    let mut acc = [0.0; 6];
    let mut count = 0;
    for seq in seqs {
        // 0.5 s window, rounded to an odd sample count
        let half = ((0.5 * seq.rate()).round() as usize / 2).max(1);
        count += residual_sq(seq, half, &mut acc);
    }
    if count == 0 {
        return Err(Error::Empty(
            "training sequences shorter than the 0.5 s window".into(),
        ));
    }
    Ok(acc.map(|s| (s / count as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ImuSample, Quaternion};

    fn seq_from(channels: Vec<[f64; 6]>) -> ImuSequence {
        let samples = channels
            .iter()
            .enumerate()
            .map(|(t, c)| {
                let mut s = ImuSample {
                    t: t as f64 / 60.0,
                    accel: [0.0; 3],
                    gyro: [0.0; 3],
                };
                s.set_channels(*c);
                s
            })
            .collect();
        ImuSequence::new(
            samples,
            vec![Quaternion::IDENTITY; channels.len()],
            Frame::Global,
            60.0,
        )
        .unwrap()
    }

    fn white(n: usize, std: f64, seed: u64) -> ImuSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        seq_from(
            (0..n)
                .map(|t| {
                    let mut c = [0.0; 6];
                    let e: f64 = StandardNormal.sample(&mut rng);
                    c[0] = std * e;
                    c[2] = 9.81 + (t as f64 * 0.01).sin();
                    c
                })
                .collect(),
        )
    }

    #[test]
    fn white_noise_std_recovered() {
        let s = white(20_000, 0.1, 1);
        let sigma = sigma_from_sequences(&[&s]).unwrap();
        assert!((0.08..=0.12).contains(&sigma[0]), "{sigma:?}");
    }

    #[test]
    fn constant_channel_has_zero_sigma() {
        let s = seq_from(vec![[1.0, 2.0, 9.81, 0.0, 0.1, -0.3]; 500]);
        let sigma = sigma_from_sequences(&[&s]).unwrap();
        assert!(sigma.iter().all(|v| v.abs() <= 1e-9), "{sigma:?}");
    }

    #[test]
    fn scaling_doubles_sigma() {
        let s = white(3000, 0.2, 2);
        let doubled: Vec<[f64; 6]> = s
            .samples()
            .iter()
            .map(|x| x.channels().map(|c| 2.0 * c))
            .collect();
        let a = sigma_from_sequences(&[&s]).unwrap();
        let b = sigma_from_sequences(&[&seq_from(doubled)]).unwrap();
        for k in 0..6 {
            assert!((b[k] - 2.0 * a[k]).abs() <= 1e-9 * (1.0 + b[k]));
        }
    }

    #[test]
    fn empty_is_error() {
        assert!(sigma_from_sequences(&[]).is_err());
    }

    #[test]
    fn zero_spec_is_bitwise_identity() {
        let s = white(300, 0.3, 3);
        let out = perturb(&s, &PerturbationSpec::clean(99), &[1.0; 6]).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn dropout_fraction_within_binomial_bound() {
        let s = seq_from(vec![[1.0; 6]; 10_000]);
        let spec = PerturbationSpec {
            noise_multiplier: 0.0,
            dropout_rate: 0.1,
            seed: 11,
        };
        let out = perturb(&s, &spec, &[0.0; 6]).unwrap();
        let zeroed = out
            .samples()
            .iter()
            .filter(|x| x.channels() == [0.0; 6])
            .count();
        let frac = zeroed as f64 / 10_000.0;
        assert!((0.09..=0.11).contains(&frac), "{frac}");
    }

    #[test]
    fn noise_std_matches_multiplier() {
        let s = seq_from(vec![[0.5; 6]; 10_000]);
        let sigma = [0.1, 0.2, 0.05, 0.01, 0.02, 0.03];
        let spec = PerturbationSpec {
            noise_multiplier: 5.0,
            dropout_rate: 0.0,
            seed: 5,
        };
        let out = perturb(&s, &spec, &sigma).unwrap();
        for k in 0..6 {
            let d: Vec<f64> = out
                .samples()
                .iter()
                .zip(s.samples())
                .map(|(a, b)| a.channels()[k] - b.channels()[k])
                .collect();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
            assert!(
                (std / (5.0 * sigma[k]) - 1.0).abs() < 0.1,
                "axis {k}: {std}"
            );
        }
    }

    #[test]
    fn deterministic_per_seed_and_keeps_timestamps() {
        let s = white(500, 0.1, 4);
        let spec = PerturbationSpec {
            noise_multiplier: 1.0,
            dropout_rate: 0.1,
            seed: 8,
        };
        let a = perturb(&s, &spec, &[0.1; 6]).unwrap();
        let b = perturb(&s, &spec, &[0.1; 6]).unwrap();
        assert_eq!(a, b);
        for (x, y) in a.samples().iter().zip(s.samples()) {
            assert_eq!(x.t, y.t);
        }
    }
}
