//! Dataset container, on-disk format and the end-to-end simulator.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    generate_floorplan, generate_trajectory, sub_seed, synthesize_imu, ImuSynthConfig,
    PoseTrajectory, WalkConfig,
};
use crate::error::{Error, Result};
use crate::geometry::{to_global, Frame, ImuSample, ImuSequence, Quaternion};
use crate::mapkit::{distance_transform, DistanceMap, OccupancyGrid};
use crate::textfmt;

pub const TRAJ_MAGIC: &str = "UTRJ1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Default assignment for trajectory `index` of `n`: the last 15% are
    /// test, the 15% before them validation.
    pub fn for_index(index: usize, n: usize) -> Split {
        let held = ((0.15 * n as f64).round() as usize).max(1);
        if n < 3 {
            return Split::Train;
        }
        if index + held >= n {
            Split::Test
        } else if index + 2 * held >= n {
            Split::Val
        } else {
            Split::Train
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapEntry {
    /// File name the trajectories refer to, e.g. `map_000.umap`.
    pub name: String,
    pub grid: OccupancyGrid,
    pub distance: DistanceMap,
}

impl MapEntry {
    pub fn new(name: impl Into<String>, grid: OccupancyGrid) -> Self {
        let distance = distance_transform(&grid);
        MapEntry {
            name: name.into(),
            grid,
            distance,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    pub name: String,
    /// The sequence as recorded (body or global frame).
    pub raw: ImuSequence,
    /// Global-frame view of `raw`.
    pub imu: ImuSequence,
    pub truth: PoseTrajectory,
    pub map_id: usize,
    pub split: Split,
}

impl TrajectorySample {
    pub fn new(
        name: impl Into<String>,
        raw: ImuSequence,
        truth: PoseTrajectory,
        map_id: usize,
        split: Split,
    ) -> Result<Self> {
        crate::error::check_len("imu vs truth", raw.len(), truth.len())?;
        let imu = match raw.frame() {
            Frame::Body => to_global(&raw)?,
            Frame::Global => raw.clone(),
        };
        Ok(TrajectorySample {
            name: name.into(),
            raw,
            imu,
            truth,
            map_id,
            split,
        })
    }

    pub fn to_text(&self, map_name: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{TRAJ_MAGIC}");
        let _ = writeln!(out, "rate_hz={}", self.raw.rate());
        let _ = writeln!(out, "frame={}", self.raw.frame().as_str());
        let _ = writeln!(out, "map={map_name}");
        let _ = writeln!(out, "split={}", self.split.as_str());
        for ((s, q), p) in self
            .raw
            .samples()
            .iter()
            .zip(self.raw.orientations())
            .zip(self.truth.positions())
        {
            let q = q.to_array();
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {} {} {} {} {} {} {}",
                s.t,
                s.accel[0],
                s.accel[1],
                s.accel[2],
                s.gyro[0],
                s.gyro[1],
                s.gyro[2],
                q[0],
                q[1],
                q[2],
                q[3],
                p[0],
                p[1]
            );
        }
        out
    }
}

/// Parsed trajectory file before it is tied to a map.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFile {
    pub map: String,
    pub split: Option<Split>,
    pub imu: ImuSequence,
    pub truth: PoseTrajectory,
}

impl TrajectoryFile {
    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let (header, body_start) = textfmt::read_header(&lines, TRAJ_MAGIC)?;
        header.only(&["rate_hz", "frame", "map", "split"])?;
        let rate: f64 = header.require("rate_hz")?;
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::parse(2, format!("bad rate {rate}")));
        }
        let frame: Frame = header.require("frame")?;
        let map: String = header.require("map")?;
        let split = header.raw("split").map(str::parse).transpose()?;
        let mut samples = Vec::new();
        let mut orientations = Vec::new();
        let mut positions = Vec::new();
        for (k, line) in lines[body_start..].iter().enumerate() {
            let lineno = body_start + k + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut vals = [0.0; 13];
            let mut n = 0;
            for tok in line.split_whitespace() {
                if n == 13 {
                    return Err(Error::parse(lineno, "more than 13 columns"));
                }
                vals[n] = textfmt::parse_f64(tok, lineno)?;
                n += 1;
            }
            if n != 13 {
                return Err(Error::parse(
                    lineno,
                    format!("expected 13 columns, found {n}"),
                ));
            }
            samples.push(ImuSample {
                t: vals[0],
                accel: [vals[1], vals[2], vals[3]],
                gyro: [vals[4], vals[5], vals[6]],
            });
            orientations.push(
                Quaternion::new(vals[7], vals[8], vals[9], vals[10])
                    .map_err(|e| Error::parse(lineno, e.to_string()))?,
            );
            positions.push([vals[11], vals[12]]);
        }
        let imu = ImuSequence::new(samples, orientations, frame, rate)?;
        let truth = PoseTrajectory::from_positions(positions, 1.0 / rate)?;
        Ok(TrajectoryFile {
            map,
            split,
            imu,
            truth,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub maps: Vec<MapEntry>,
    pub trajectories: Vec<TrajectorySample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &TrajectorySample> {
        self.trajectories.iter().filter(move |t| t.split == split)
    }
    pub fn train(&self) -> impl Iterator<Item = &TrajectorySample> {
        self.split(Split::Train)
    }
    pub fn val(&self) -> impl Iterator<Item = &TrajectorySample> {
        self.split(Split::Val)
    }
    pub fn test(&self) -> impl Iterator<Item = &TrajectorySample> {
        self.split(Split::Test)
    }
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.trajectories.len())
            .filter(|&i| self.trajectories[i].split == split)
            .collect()
    }
    pub fn distance(&self, map_id: usize) -> &DistanceMap {
        &self.maps[map_id].distance
    }

    /// Writes `*.umap` and `*.utrj` files into `dir` (created if missing).
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for m in &self.maps {
            m.grid.write(&dir.join(&m.name))?;
        }
        for t in &self.trajectories {
            let text = t.to_text(&self.maps[t.map_id].name);
            textfmt::write_string(&dir.join(format!("{}.utrj", t.name)), &text)?;
        }
        Ok(())
    }

    /// Loads every `*.umap` and `*.utrj` in `dir`, in file-name order.
    /// Trajectories without a `split` key are assigned by position.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let mut names: Vec<String> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        names.sort();
        let mut maps = Vec::new();
        for name in names.iter().filter(|n| n.ends_with(".umap")) {
            let grid = OccupancyGrid::read(&dir.join(name))?;
            maps.push(MapEntry::new(name.clone(), grid));
        }
        let traj_names: Vec<&String> = names.iter().filter(|n| n.ends_with(".utrj")).collect();
        let n = traj_names.len();
        let mut trajectories = Vec::with_capacity(n);
        for (k, name) in traj_names.into_iter().enumerate() {
            let path = dir.join(name);
            let file = TrajectoryFile::parse(&textfmt::read_to_string(&path)?)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let map_id = maps
                .iter()
                .position(|m| m.name == file.map)
                .ok_or_else(|| {
                    Error::Config(format!("{}: unknown map '{}'", path.display(), file.map))
                })?;
            let split = file.split.unwrap_or_else(|| Split::for_index(k, n));
            let stem = name.trim_end_matches(".utrj").to_string();
            trajectories.push(TrajectorySample::new(
                stem, file.imu, file.truth, map_id, split,
            )?);
        }
        if trajectories.is_empty() {
            return Err(Error::Empty(format!(
                "no trajectories in {}",
                dir.display()
            )));
        }
        Ok(Dataset { maps, trajectories })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub n_traj: usize,
    pub duration_s: f64,
    pub rate: f64,
    pub map_height: usize,
    pub map_width: usize,
    pub resolution: f64,
    /// Trajectories sharing one floor plan.
    pub traj_per_map: usize,
    pub imu: ImuSynthConfig,
    /// Range of the per-trajectory factor applied to all sensor noise terms.
    pub noise_scale: (f64, f64),
}

impl SimConfig {
    pub fn new(seed: u64, n_traj: usize, duration_s: f64, rate: f64) -> Self {
        SimConfig {
            seed,
            n_traj,
            duration_s,
            rate,
            map_height: 64,
            map_width: 64,
            resolution: 0.25,
            traj_per_map: 8,
            imu: ImuSynthConfig::phone(),
            noise_scale: (0.5, 2.0),
        }
    }
}

/// Generates floor plans, walks and IMU data. Deterministic per seed.
pub fn simulate(cfg: &SimConfig) -> Result<Dataset> {
    if cfg.n_traj == 0 {
        return Err(Error::InvalidArgument("n_traj must be positive".into()));
    }
    if !(cfg.noise_scale.0 >= 0.0 && cfg.noise_scale.0 <= cfg.noise_scale.1) {
        return Err(Error::InvalidArgument(format!(
            "bad noise scale range {:?}",
            cfg.noise_scale
        )));
    }
    let n_maps = cfg.n_traj.div_ceil(cfg.traj_per_map.max(1));
    let mut maps = Vec::with_capacity(n_maps);
    for m in 0..n_maps {
        let grid = generate_floorplan(
            sub_seed(cfg.seed, 1000 + m as u64),
            cfg.map_height,
            cfg.map_width,
            cfg.resolution,
        )?;
        maps.push(MapEntry::new(format!("map_{m:03}.umap"), grid));
    }
    let walk = WalkConfig::new(cfg.duration_s, cfg.rate);
    let mut trajectories = Vec::with_capacity(cfg.n_traj);
    for k in 0..cfg.n_traj {
        let map_id = k % n_maps;
        let truth = generate_trajectory(
            &maps[map_id].grid,
            sub_seed(cfg.seed, 2000 + k as u64),
            &walk,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 3000 + k as u64));
        let scale = if cfg.noise_scale.0 < cfg.noise_scale.1 {
            rng.random_range(cfg.noise_scale.0..=cfg.noise_scale.1)
        } else {
            cfg.noise_scale.0
        };
        let raw = synthesize_imu(&truth, rng.random(), &cfg.imu.scaled(scale))?;
        let split = Split::for_index(k, cfg.n_traj);
        trajectories.push(TrajectorySample::new(
            format!("traj_{k:03}"),
            raw,
            truth,
            map_id,
            split,
        )?);
    }
    Ok(Dataset { maps, trajectories })
}
