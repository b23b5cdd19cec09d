//! Synthetic pedestrian walks over an occupancy grid.
//!
//! Goals are drawn among well-cleared cells and joined by clearance-weighted
//! Dijkstra paths. Paths are smoothed, then walked with a speed profile that
//! respects lateral and longitudinal acceleration limits. The pedestrian
//! stops and turns in place wherever the route doubles back.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PoseTrajectory;
use crate::error::{Error, Result};
use crate::mapkit::{distance_transform, DistanceMap, OccupancyGrid, SAFETY_MARGIN};

const SPACING: f64 = 0.05;
const SMOOTH_SIGMA: f64 = 0.35;
const ACCEL: f64 = 0.8;
const LATERAL_ACCEL: f64 = 1.2;
const MIN_CRUISE: f64 = 0.6;
const MAX_CRUISE: f64 = 1.6;
const STAND_S: f64 = 0.5;
const TURN_IN_PLACE_S: f64 = 1.0;
const REVERSAL_DEG: f64 = 110.0;

#[derive(Debug, Clone, PartialEq)]
pub struct WalkConfig {
    pub duration_s: f64,
    pub rate: f64,
    /// Requested start position; a random well-cleared cell when `None`.
    pub start: Option<[f64; 2]>,
}

impl WalkConfig {
    pub fn new(duration_s: f64, rate: f64) -> Self {
        WalkConfig {
            duration_s,
            rate,
            start: None,
        }
    }
}

#[derive(Copy, Clone, PartialEq)]
struct Node {
    cost: f64,
    cell: usize,
}

impl Eq for Node {}

impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .partial_cmp(&self.cost)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Planner<'a> {
    dist: &'a DistanceMap,
    walkable: Vec<bool>,
}

impl<'a> Planner<'a> {
    fn new(dist: &'a DistanceMap) -> Self {
        let min_clear = SAFETY_MARGIN + 0.1;
        let walkable = dist.values().iter().map(|&d| d >= min_clear).collect();
        Planner { dist, walkable }
    }

    fn step_cost(&self, cell: usize, len: f64) -> f64 {
        let d = self.dist.values()[cell];
        len * (1.0 + 3.0 * (1.0 - d).max(0.0))
    }

    /// Cheapest 8-connected path between two walkable cells (no corner cutting).
    fn path(&self, from: usize, to: usize) -> Option<Vec<usize>> {
        let (h, w) = (self.dist.height(), self.dist.width());
        let mut best = vec![f64::INFINITY; h * w];
        let mut prev = vec![usize::MAX; h * w];
        let mut heap = BinaryHeap::new();
        best[from] = 0.0;
        heap.push(Node {
            cost: 0.0,
            cell: from,
        });
        while let Some(Node { cost, cell }) = heap.pop() {
            if cell == to {
                break;
            }
            if cost > best[cell] {
                continue;
            }
            let (i, j) = ((cell / w) as i64, (cell % w) as i64);
            for di in -1..=1i64 {
                for dj in -1..=1i64 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (ni, nj) = (i + di, j + dj);
                    if ni < 0 || nj < 0 || ni >= h as i64 || nj >= w as i64 {
                        continue;
                    }
                    let next = ni as usize * w + nj as usize;
                    if !self.walkable[next] {
                        continue;
                    }
                    if di != 0 && dj != 0 {
                        let a = ni as usize * w + j as usize;
                        let b = i as usize * w + nj as usize;
                        if !self.walkable[a] || !self.walkable[b] {
                            continue;
                        }
                    }
                    let len = if di != 0 && dj != 0 {
                        std::f64::consts::SQRT_2
                    } else {
                        1.0
                    };
                    let c = cost + self.step_cost(next, len);
                    if c < best[next] {
                        best[next] = c;
                        prev[next] = cell;
                        heap.push(Node {
                            cost: c,
                            cell: next,
                        });
                    }
                }
            }
        }
        if !best[to].is_finite() {
            return None;
        }
        let mut path = vec![to];
        while *path.last().unwrap() != from {
            path.push(prev[*path.last().unwrap()]);
        }
        path.reverse();
        Some(path)
    }

    fn center(&self, cell: usize) -> [f64; 2] {
        let w = self.dist.width();
        let r = self.dist.resolution();
        let o = self.dist.origin();
        [o[0] + (cell % w) as f64 * r, o[1] + (cell / w) as f64 * r]
    }

    fn cell_of(&self, p: [f64; 2]) -> Option<usize> {
        let g = self.dist.grid_coords(p);
        let (j, i) = (g[0].round(), g[1].round());
        if i < 0.0 || j < 0.0 || i >= self.dist.height() as f64 || j >= self.dist.width() as f64 {
            return None;
        }
        Some(i as usize * self.dist.width() + j as usize)
    }
}

fn resample(points: &[[f64; 2]], spacing: f64) -> Vec<[f64; 2]> {
    let mut out = vec![points[0]];
    let mut carry = 0.0;
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        if len == 0.0 {
            continue;
        }
        let mut s = spacing - carry;
        while s <= len {
            let f = s / len;
            out.push([a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]);
            s += spacing;
        }
        carry = len - (s - spacing);
    }
    let last = *points.last().unwrap();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    out
}

/// Gaussian smoothing with odd reflection at the ends, which pins both
/// endpoints and preserves the end directions.
fn smooth(points: &[[f64; 2]], sigma_samples: f64) -> Vec<[f64; 2]> {
    let n = points.len();
    if n < 3 {
        return points.to_vec();
    }
    let half = (3.0 * sigma_samples).ceil() as i64;
    let kernel: Vec<f64> = (-half..=half)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma_samples * sigma_samples)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let last = n as i64 - 1;
    let at = |k: i64| -> [f64; 2] {
        if k < 0 {
            let (a, b) = (points[0], points[(-k).min(last) as usize]);
            [2.0 * a[0] - b[0], 2.0 * a[1] - b[1]]
        } else if k > last {
            let (a, b) = (
                points[last as usize],
                points[(2 * last - k).max(0) as usize],
            );
            [2.0 * a[0] - b[0], 2.0 * a[1] - b[1]]
        } else {
            points[k as usize]
        }
    };
    let mut out: Vec<[f64; 2]> = (0..n as i64)
        .map(|i| {
            let mut acc = [0.0, 0.0];
            for (o, wgt) in (-half..=half).zip(&kernel) {
                let p = at(i + o);
                acc[0] += wgt * p[0];
                acc[1] += wgt * p[1];
            }
            [acc[0] / norm, acc[1] / norm]
        })
        .collect();
    out[0] = points[0];
    out[n - 1] = points[n - 1];
    out
}

fn heading(a: [f64; 2], b: [f64; 2]) -> f64 {
    (b[1] - a[1]).atan2(b[0] - a[0])
}

fn turn_angle(h1: f64, h2: f64) -> f64 {
    let mut d = (h2 - h1).rem_euclid(2.0 * std::f64::consts::PI);
    if d > std::f64::consts::PI {
        d -= 2.0 * std::f64::consts::PI;
    }
    d.abs()
}

/// Direction over the last (or first) ~0.5 m of a polyline.
fn end_heading(points: &[[f64; 2]], at_end: bool) -> f64 {
    let k = 10.min(points.len() - 1);
    if at_end {
        heading(points[points.len() - 1 - k], points[points.len() - 1])
    } else {
        heading(points[0], points[k])
    }
}

/// Walks one smoothed polyline from standstill to standstill.
fn walk_segment(
    path: &[[f64; 2]],
    dt: f64,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<[f64; 2]>,
    max_len: usize,
) {
    let n = path.len();
    let mut arc = vec![0.0; n];
    for k in 1..n {
        arc[k] = arc[k - 1] + (path[k][0] - path[k - 1][0]).hypot(path[k][1] - path[k - 1][1]);
    }
    let total = arc[n - 1];
    if total < 1e-6 {
        return;
    }
    let base = rng.random_range(0.9..1.3);
    let wavelength = rng.random_range(8.0..15.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut allow: Vec<f64> = (0..n)
        .map(|k| {
            let cruise = (base
                * (1.0 + 0.12 * (std::f64::consts::TAU * arc[k] / wavelength + phase).sin()))
            .clamp(0.7, 1.5);
            let kappa = if k == 0 || k + 1 == n {
                0.0
            } else {
                curvature(path[k - 1], path[k], path[k + 1])
            };
            let lateral = if kappa > 1e-9 {
                (LATERAL_ACCEL / kappa).sqrt().max(MIN_CRUISE)
            } else {
                MAX_CRUISE
            };
            cruise.min(lateral)
        })
        .collect();
    allow[n - 1] = 0.0;
    for k in (0..n - 1).rev() {
        let ds = arc[k + 1] - arc[k];
        allow[k] = allow[k].min((allow[k + 1] * allow[k + 1] + 2.0 * ACCEL * ds).sqrt());
    }
    let limit_at = |s: f64| -> f64 {
        let k = arc.partition_point(|&a| a <= s).clamp(1, n - 1);
        let (a0, a1) = (arc[k - 1], arc[k]);
        let f = if a1 > a0 {
            ((s - a0) / (a1 - a0)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        allow[k - 1] + f * (allow[k] - allow[k - 1])
    };
    let point_at = |s: f64| -> [f64; 2] {
        let k = arc.partition_point(|&a| a <= s).clamp(1, n - 1);
        let (a0, a1) = (arc[k - 1], arc[k]);
        let f = if a1 > a0 {
            ((s - a0) / (a1 - a0)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (p, q) = (path[k - 1], path[k]);
        [p[0] + f * (q[0] - p[0]), p[1] + f * (q[1] - p[1])]
    };
    let (mut s, mut v) = (0.0f64, 0.0f64);
    while out.len() < max_len {
        let braking = (2.0 * ACCEL * (total - s).max(0.0)).sqrt();
        v = (v + ACCEL * dt).min(limit_at(s)).min(braking);
        if v <= 0.0 || total - s < 1e-9 {
            break;
        }
        s = (s + v * dt).min(total);
        out.push(point_at(s));
        if total - s < 1e-9 {
            break;
        }
    }
}

fn curvature(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    let ab = (b[0] - a[0]).hypot(b[1] - a[1]);
    let bc = (c[0] - b[0]).hypot(c[1] - b[1]);
    let ca = (a[0] - c[0]).hypot(a[1] - c[1]);
    let cross = ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs();
    let denom = ab * bc * ca;
    if denom < 1e-12 {
        0.0
    } else {
        2.0 * cross / denom
    }
}

fn attempt(dist: &DistanceMap, cfg: &WalkConfig, rng: &mut ChaCha8Rng) -> Result<Vec<[f64; 2]>> {
    let planner = Planner::new(dist);
    let dt = 1.0 / cfg.rate;
    let total = (cfg.duration_s * cfg.rate).round() as usize;
    let goal_clear = {
        let best = dist.values().iter().cloned().fold(0.0, f64::max);
        (SAFETY_MARGIN + 0.3).min(best)
    };
    let goals: Vec<usize> = (0..dist.values().len())
        .filter(|&c| planner.walkable[c] && dist.values()[c] >= goal_clear)
        .collect();
    if goals.is_empty() {
        return Err(Error::Generation(
            "no cell with enough clearance to walk".into(),
        ));
    }

    let (start_point, mut current) = match cfg.start {
        Some(p) => {
            if dist.sample(p) < SAFETY_MARGIN {
                return Err(Error::Generation(format!(
                    "requested start {p:?} is closer than {SAFETY_MARGIN} m to an obstacle"
                )));
            }
            let cell = planner
                .cell_of(p)
                .filter(|&c| planner.walkable[c])
                .ok_or_else(|| Error::Generation(format!("start {p:?} is not walkable")))?;
            (p, cell)
        }
        None => {
            let c = goals[rng.random_range(0..goals.len())];
            (planner.center(c), c)
        }
    };

    let stand = ((STAND_S * cfg.rate).round() as usize).max(2);
    let mut out = vec![start_point; stand.min(total)];
    let mut segment: Vec<[f64; 2]> = vec![start_point];
    let mut last_heading: Option<f64> = None;
    let mut failures = 0;
    while out.len() < total {
        let goal = goals[rng.random_range(0..goals.len())];
        let gp = planner.center(goal);
        let cp = *segment.last().unwrap();
        if (gp[0] - cp[0]).hypot(gp[1] - cp[1]) < 3.0 {
            failures += 1;
            if failures > 200 {
                return Err(Error::Generation("free space too small for a walk".into()));
            }
            continue;
        }
        let Some(cells) = planner.path(current, goal) else {
            failures += 1;
            if failures > 200 {
                return Err(Error::Generation("no feasible path between goals".into()));
            }
            continue;
        };
        let mut leg: Vec<[f64; 2]> = cells.iter().map(|&c| planner.center(c)).collect();
        leg[0] = cp;
        let leg = resample(&leg, SPACING);
        if leg.len() < 2 {
            continue;
        }
        let reverses = last_heading
            .map(|h| turn_angle(h, end_heading(&leg, false)).to_degrees() > REVERSAL_DEG)
            .unwrap_or(false);
        if reverses {
            // walk what we have, stop, turn around
            flush(&mut segment, dt, rng, &mut out, total);
            let pause = (TURN_IN_PLACE_S * cfg.rate).round() as usize;
            let here = *out.last().unwrap();
            for _ in 0..pause {
                if out.len() >= total {
                    break;
                }
                out.push(here);
            }
            segment = vec![here];
        }
        segment.extend_from_slice(&leg[1..]);
        last_heading = Some(end_heading(&leg, true));
        current = goal;
        // walk long stretches in pieces so memory stays bounded
        let walked_len: f64 = segment
            .windows(2)
            .map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]))
            .sum();
        if walked_len > (total - out.len()) as f64 * dt * MAX_CRUISE + 5.0 {
            break;
        }
    }
    if out.len() < total {
        flush(&mut segment, dt, rng, &mut out, total);
    }
    // a walk that ended early stands still for the remainder
    while out.len() < total {
        let here = *out.last().unwrap();
        out.push(here);
    }
    out.truncate(total);
    Ok(out)
}

fn flush(
    segment: &mut Vec<[f64; 2]>,
    dt: f64,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<[f64; 2]>,
    total: usize,
) {
    if segment.len() >= 2 {
        let smoothed = smooth(segment, SMOOTH_SIGMA / SPACING);
        walk_segment(&smoothed, dt, rng, out, total);
    }
    segment.clear();
}

/// Generates a walk of `duration_s` seconds sampled at `rate` Hz that keeps at
/// least [`SAFETY_MARGIN`] of clearance from every obstacle.
pub fn generate_trajectory(
    grid: &OccupancyGrid,
    seed: u64,
    cfg: &WalkConfig,
) -> Result<PoseTrajectory> {
    if !(cfg.rate > 0.0 && cfg.duration_s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "bad duration/rate {} s @ {} Hz",
            cfg.duration_s, cfg.rate
        )));
    }
    if (cfg.duration_s * cfg.rate).round() < 2.0 {
        return Err(Error::InvalidArgument(
            "walk shorter than two samples".into(),
        ));
    }
    if !grid.cells().iter().any(|&f| f) {
        return Err(Error::Generation("grid has no free space".into()));
    }
    let dist = distance_transform(grid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_err = None;
    for _ in 0..10 {
        match attempt(&dist, cfg, &mut rng) {
            Ok(points) => {
                if points.iter().all(|&p| dist.sample(p) >= SAFETY_MARGIN) {
                    return PoseTrajectory::from_positions(points, 1.0 / cfg.rate);
                }
                last_err = Some(Error::Generation(
                    "walk violated the clearance margin".into(),
                ));
            }
            Err(e @ Error::Generation(_)) if cfg.start.is_some() => return Err(e),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Generation("no feasible walk".into())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasim::generate_floorplan;

    fn corridor(len: usize) -> OccupancyGrid {
        let (h, w) = (11, len);
        let free = (0..h * w).map(|k| (2..=8).contains(&(k / w))).collect();
        OccupancyGrid::new(h, w, free, 0.25, [0.0, 0.0]).unwrap()
    }

    #[test]
    fn clearance_is_kept() {
        for seed in 0..6 {
            let grid = generate_floorplan(seed, 64, 64, 0.25).unwrap();
            let traj =
                generate_trajectory(&grid, seed + 100, &WalkConfig::new(60.0, 60.0)).unwrap();
            let dist = distance_transform(&grid);
            let min = traj
                .positions()
                .iter()
                .map(|&p| dist.sample(p))
                .fold(f64::INFINITY, f64::min);
            assert!(min >= SAFETY_MARGIN, "seed {seed}: {min}");
            assert_eq!(traj.len(), 3600);
        }
    }

    #[test]
    fn speeds_are_pedestrian() {
        let grid = generate_floorplan(4, 64, 64, 0.25).unwrap();
        let traj = generate_trajectory(&grid, 9, &WalkConfig::new(60.0, 60.0)).unwrap();
        let max = traj
            .velocities()
            .iter()
            .map(|v| v[0].hypot(v[1]))
            .fold(0.0, f64::max);
        assert!(max <= 1.6 && max > 0.6, "{max}");
    }

    #[test]
    fn straight_corridor_cruises_in_band() {
        let grid = corridor(160);
        let traj = generate_trajectory(&grid, 3, &WalkConfig::new(40.0, 60.0)).unwrap();
        let speeds: Vec<f64> = traj.velocities().iter().map(|v| v[0].hypot(v[1])).collect();
        let dt = traj.dt();
        let mut cruising = 0;
        for k in 1..speeds.len() {
            let accel = (speeds[k] - speeds[k - 1]).abs() / dt;
            // exclude start/stop ramps, which run at the longitudinal limit and
            // end in one partial step
            if speeds[k] > 0.2 && accel < 0.5 * ACCEL {
                cruising += 1;
                assert!((0.6..=1.6).contains(&speeds[k]), "speed {}", speeds[k]);
            }
        }
        assert!(cruising > speeds.len() / 4, "{cruising}");
        // straight: almost no lateral motion
        assert!(traj.positions().iter().all(|p| (p[1] - 1.25).abs() < 0.3));
    }

    #[test]
    fn requested_start_is_kept() {
        let grid = corridor(80);
        let cfg = WalkConfig {
            start: Some([3.0, 1.25]),
            ..WalkConfig::new(10.0, 60.0)
        };
        let traj = generate_trajectory(&grid, 1, &cfg).unwrap();
        assert_eq!(traj.positions()[0], [3.0, 1.25]);
        assert_eq!(traj.velocities()[0], [0.0, 0.0]);
    }

    #[test]
    fn unreachable_start_errors() {
        let grid = corridor(80);
        let cfg = WalkConfig {
            start: Some([3.0, 0.25]),
            ..WalkConfig::new(10.0, 60.0)
        };
        assert!(matches!(
            generate_trajectory(&grid, 1, &cfg),
            Err(Error::Generation(_))
        ));
        let blocked = OccupancyGrid::new(16, 16, vec![false; 256], 0.25, [0.0, 0.0]).unwrap();
        assert!(generate_trajectory(&blocked, 1, &WalkConfig::new(5.0, 60.0)).is_err());
    }

    #[test]
    fn deterministic() {
        let grid = generate_floorplan(2, 64, 64, 0.25).unwrap();
        let a = generate_trajectory(&grid, 5, &WalkConfig::new(20.0, 60.0)).unwrap();
        let b = generate_trajectory(&grid, 5, &WalkConfig::new(20.0, 60.0)).unwrap();
        assert_eq!(a, b);
    }
}
