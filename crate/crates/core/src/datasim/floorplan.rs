//! Procedural corridors-and-rooms floor plans.
//!
//! The grid is split into square blocks of roughly four meters. Every block
//! gets a rectangular room around its center; a random spanning tree over the
//! block lattice (plus extra edges so no block is a dead end when avoidable)
//! is carved as straight corridors between room centers. Free space is
//! therefore connected by construction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mapkit::OccupancyGrid;

const MIN_SIDE: usize = 16;
const OBSTACLE_RANGE: (f64, f64) = (0.2, 0.6);

struct Lattice {
    rows: usize,
    cols: usize,
    row_edges: Vec<usize>,
    col_edges: Vec<usize>,
}

impl Lattice {
    fn new(height: usize, width: usize, block: usize) -> Self {
        let rows = (height / block).max(1);
        let cols = (width / block).max(1);
        let edges = |n: usize, len: usize| (0..=n).map(|k| k * len / n).collect::<Vec<_>>();
        Lattice {
            rows,
            cols,
            row_edges: edges(rows, height),
            col_edges: edges(cols, width),
        }
    }

    fn center(&self, node: usize) -> (usize, usize) {
        let (r, c) = (node / self.cols, node % self.cols);
        (
            (self.row_edges[r] + self.row_edges[r + 1]) / 2,
            (self.col_edges[c] + self.col_edges[c + 1]) / 2,
        )
    }

    fn block_size(&self, node: usize) -> (usize, usize) {
        let (r, c) = (node / self.cols, node % self.cols);
        (
            self.row_edges[r + 1] - self.row_edges[r],
            self.col_edges[c + 1] - self.col_edges[c],
        )
    }

    fn neighbours(&self, node: usize) -> Vec<usize> {
        let (r, c) = (node / self.cols, node % self.cols);
        let mut out = Vec::new();
        if r > 0 {
            out.push(node - self.cols);
        }
        if r + 1 < self.rows {
            out.push(node + self.cols);
        }
        if c > 0 {
            out.push(node - 1);
        }
        if c + 1 < self.cols {
            out.push(node + 1);
        }
        out
    }
}

fn carve(free: &mut [bool], width: usize, rows: (usize, usize), cols: (usize, usize)) {
    for i in rows.0..=rows.1 {
        for j in cols.0..=cols.1 {
            free[i * width + j] = true;
        }
    }
}

fn attempt(rng: &mut ChaCha8Rng, height: usize, width: usize, resolution: f64) -> OccupancyGrid {
    let block = MIN_SIDE.max((4.0 / resolution).round() as usize);
    let lattice = Lattice::new(height, width, block);
    let n = lattice.rows * lattice.cols;
    // corridor half-width in cells: at least 3 cells and 0.75 m
    let corridor = 3usize.max((0.75 / resolution).ceil() as usize);

    // random spanning tree (randomized DFS)
    let mut edges = Vec::new();
    let mut seen = vec![false; n];
    let mut stack = vec![rng.random_range(0..n)];
    seen[stack[0]] = true;
    while let Some(&top) = stack.last() {
        let mut next: Vec<usize> = lattice
            .neighbours(top)
            .into_iter()
            .filter(|&m| !seen[m])
            .collect();
        if next.is_empty() {
            stack.pop();
            continue;
        }
        next.shuffle(rng);
        let m = next[0];
        seen[m] = true;
        edges.push((top.min(m), top.max(m)));
        stack.push(m);
    }
    // avoid dead ends where the lattice allows it
    for node in 0..n {
        let degree = edges
            .iter()
            .filter(|(a, b)| *a == node || *b == node)
            .count();
        if degree < 2 {
            let mut options: Vec<usize> = lattice
                .neighbours(node)
                .into_iter()
                .filter(|&m| !edges.contains(&(node.min(m), node.max(m))))
                .collect();
            options.shuffle(rng);
            if let Some(&m) = options.first() {
                edges.push((node.min(m), node.max(m)));
            }
        }
    }

    let mut free = vec![false; height * width];
    for node in 0..n {
        let (ci, cj) = lattice.center(node);
        let (bh, bw) = lattice.block_size(node);
        let lo = if n == 1 { 5 } else { 4 };
        let max_h = (bh / 2).saturating_sub(2).max(corridor);
        let max_w = (bw / 2).saturating_sub(2).max(corridor);
        let hh = rng.random_range(lo.min(max_h)..=max_h);
        let hw = rng.random_range(lo.min(max_w)..=max_w);
        carve(
            &mut free,
            width,
            (ci.saturating_sub(hh), (ci + hh).min(height - 1)),
            (cj.saturating_sub(hw), (cj + hw).min(width - 1)),
        );
    }
    for &(a, b) in &edges {
        let (ai, aj) = lattice.center(a);
        let (bi, bj) = lattice.center(b);
        if ai == bi {
            carve(
                &mut free,
                width,
                (ai.saturating_sub(corridor), (ai + corridor).min(height - 1)),
                (aj.min(bj), aj.max(bj)),
            );
        } else {
            carve(
                &mut free,
                width,
                (ai.min(bi), ai.max(bi)),
                (aj.saturating_sub(corridor), (aj + corridor).min(width - 1)),
            );
        }
    }
    OccupancyGrid::new(height, width, free, resolution, [0.0, 0.0])
        .expect("geometry validated by caller")
}

/// Deterministic corridors-and-rooms layout with connected free space and an
/// obstacle fraction in `[0.2, 0.6]`.
pub fn generate_floorplan(
    seed: u64,
    height: usize,
    width: usize,
    resolution: f64,
) -> Result<OccupancyGrid> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(Error::InvalidArgument(format!(
            "floor plans need at least {MIN_SIDE}x{MIN_SIDE} cells, got {height}x{width}"
        )));
    }
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "bad resolution {resolution}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..64 {
        let grid = attempt(&mut rng, height, width, resolution);
        let frac = grid.obstacle_fraction();
        if (OBSTACLE_RANGE.0..=OBSTACLE_RANGE.1).contains(&frac) {
            return Ok(grid);
        }
    }
    Err(Error::Generation(format!(
        "no floor plan with obstacle fraction in {OBSTACLE_RANGE:?} for {height}x{width} at {resolution} m"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    /// Number of 4-connected free components, by flood fill.
    fn free_components(g: &OccupancyGrid) -> usize {
        let (h, w) = (g.height(), g.width());
        let mut label = vec![false; h * w];
        let mut count = 0;
        for start in 0..h * w {
            if label[start] || !g.cells()[start] {
                continue;
            }
            count += 1;
            let mut queue = VecDeque::from([start]);
            label[start] = true;
            while let Some(k) = queue.pop_front() {
                let (i, j) = (k / w, k % w);
                let mut push = |ni: usize, nj: usize| {
                    let idx = ni * w + nj;
                    if g.cells()[idx] && !label[idx] {
                        label[idx] = true;
                        queue.push_back(idx);
                    }
                };
                if i > 0 {
                    push(i - 1, j);
                }
                if i + 1 < h {
                    push(i + 1, j);
                }
                if j > 0 {
                    push(i, j - 1);
                }
                if j + 1 < w {
                    push(i, j + 1);
                }
            }
        }
        count
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_floorplan(7, 64, 64, 0.25).unwrap();
        let b = generate_floorplan(7, 64, 64, 0.25).unwrap();
        assert_eq!(a, b);
        let c = generate_floorplan(8, 64, 64, 0.25).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn connected_with_bounded_obstacle_fraction() {
        for seed in 0..30 {
            for &(h, w, r) in &[
                (64, 64, 0.25),
                (16, 16, 0.25),
                (48, 80, 0.25),
                (40, 40, 0.1),
            ] {
                let g = generate_floorplan(seed, h, w, r).unwrap();
                assert_eq!(free_components(&g), 1, "seed {seed} {h}x{w}");
                let f = g.obstacle_fraction();
                assert!((0.2..=0.6).contains(&f), "seed {seed} {h}x{w}: {f}");
            }
        }
    }

    #[test]
    fn too_small_rejected() {
        assert!(generate_floorplan(0, 15, 32, 0.25).is_err());
    }
}
