//! Occupancy grids, the Euclidean distance transform and continuous sampling
//! of the resulting metric distance field.
//!
//! Cell `(i, j)` is row `i`, column `j`. Its center sits at
//! `origin + (j * r, i * r)` in the global frame, so rows run along +y and
//! columns along +x. Every grid is surrounded by a virtual one-cell ring of
//! obstacles: all-free grids still have finite distances and leaving the grid
//! is never "safe".

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::textfmt;

/// Default safety margin R_s in meters.
pub const SAFETY_MARGIN: f64 = 0.4;

pub const MAP_MAGIC: &str = "UMAP1";
const DIST_MAGIC: &str = "UDMAP1";

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    height: usize,
    width: usize,
    /// Row-major, `true` = free.
    free: Vec<bool>,
    resolution: f64,
    origin: [f64; 2],
}

fn check_geometry(height: usize, width: usize, resolution: f64, origin: [f64; 2]) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument(format!(
            "grid must be at least 1x1, got {height}x{width}"
        )));
    }
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "bad resolution {resolution}"
        )));
    }
    if !origin.iter().all(|c| c.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad origin {origin:?}")));
    }
    Ok(())
}

impl OccupancyGrid {
    pub fn new(
        height: usize,
        width: usize,
        free: Vec<bool>,
        resolution: f64,
        origin: [f64; 2],
    ) -> Result<Self> {
        check_geometry(height, width, resolution, origin)?;
        crate::error::check_len("occupancy cells", free.len(), height * width)?;
        Ok(OccupancyGrid {
            height,
            width,
            free,
            resolution,
            origin,
        })
    }

    pub fn all_free(height: usize, width: usize, resolution: f64) -> Result<Self> {
        Self::new(
            height,
            width,
            vec![true; height * width],
            resolution,
            [0.0, 0.0],
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn resolution(&self) -> f64 {
        self.resolution
    }
    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }
    pub fn cells(&self) -> &[bool] {
        &self.free
    }

    pub fn is_free(&self, i: usize, j: usize) -> bool {
        self.free[i * self.width + j]
    }

    pub fn set_free(&mut self, i: usize, j: usize, free: bool) {
        self.free[i * self.width + j] = free;
    }

    pub fn obstacle_fraction(&self) -> f64 {
        self.free.iter().filter(|f| !**f).count() as f64 / self.free.len() as f64
    }

    /// Global-frame center of cell `(i, j)`.
    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [
            self.origin[0] + j as f64 * self.resolution,
            self.origin[1] + i as f64 * self.resolution,
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAP_MAGIC}");
        let _ = writeln!(out, "height={}", self.height);
        let _ = writeln!(out, "width={}", self.width);
        let _ = writeln!(out, "resolution_m={}", self.resolution);
        let _ = writeln!(out, "origin_x_m={}", self.origin[0]);
        let _ = writeln!(out, "origin_y_m={}", self.origin[1]);
        for row in self.free.chunks(self.width) {
            out.extend(row.iter().map(|&f| if f { '.' } else { '#' }));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let (header, body_start) = textfmt::read_header(&lines, MAP_MAGIC)?;
        header.only(&[
            "height",
            "width",
            "resolution_m",
            "origin_x_m",
            "origin_y_m",
        ])?;
        let height: usize = header.require("height")?;
        let width: usize = header.require("width")?;
        let resolution: f64 = header.require("resolution_m")?;
        let origin = [
            header.require::<f64>("origin_x_m")?,
            header.require::<f64>("origin_y_m")?,
        ];
        check_geometry(height, width, resolution, origin)?;
        let rows: Vec<&str> = lines[body_start..]
            .iter()
            .map(|l| l.trim_end_matches('\r'))
            .filter(|l| !l.is_empty())
            .collect();
        if rows.len() != height {
            return Err(Error::parse(
                body_start + 1,
                format!("expected {height} rows, found {}", rows.len()),
            ));
        }
        let mut free = Vec::with_capacity(height.saturating_mul(width).min(1 << 24));
        for (r, row) in rows.iter().enumerate() {
            let lineno = body_start + r + 1;
            if row.chars().count() != width {
                return Err(Error::parse(lineno, format!("expected {width} cells")));
            }
            for ch in row.chars() {
                free.push(match ch {
                    '.' => true,
                    '#' => false,
                    other => return Err(Error::parse(lineno, format!("bad cell '{other}'"))),
                });
            }
        }
        Self::new(height, width, free, resolution, origin)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&textfmt::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        textfmt::write_string(path, &self.to_text())
    }
}

/// Metric distance-to-obstacle field derived from an [`OccupancyGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    resolution: f64,
    origin: [f64; 2],
    safety_margin: f64,
}

/// Bilinear interpolation footprint of a continuous query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    /// Lower-left corner cell (row, column).
    pub i0: usize,
    pub j0: usize,
    /// Fractional offsets in `[0, 1]`.
    pub fx: f64,
    pub fy: f64,
    /// True when the query was clamped onto the lattice along that axis; the
    /// sample is then locally constant in that direction.
    pub clamped_x: bool,
    pub clamped_y: bool,
    /// Corner values `[v(i0,j0), v(i0,j1), v(i1,j0), v(i1,j1)]`.
    pub corners: [f64; 4],
}

impl Stencil {
    pub fn value(&self) -> f64 {
        let [v00, v01, v10, v11] = self.corners;
        let (fx, fy) = (self.fx, self.fy);
        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
    }
}

impl DistanceMap {
    pub fn from_values(
        height: usize,
        width: usize,
        values: Vec<f64>,
        resolution: f64,
        origin: [f64; 2],
        safety_margin: f64,
    ) -> Result<Self> {
        check_geometry(height, width, resolution, origin)?;
        crate::error::check_len("distance values", values.len(), height * width)?;
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "distance values must be finite and non-negative".into(),
            ));
        }
        if !(safety_margin >= 0.0 && safety_margin.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "bad safety margin {safety_margin}"
            )));
        }
        Ok(DistanceMap {
            height,
            width,
            values,
            resolution,
            origin,
            safety_margin,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn resolution(&self) -> f64 {
        self.resolution
    }
    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }
    pub fn safety_margin(&self) -> f64 {
        self.safety_margin
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    pub fn with_safety_margin(mut self, margin: f64) -> Self {
        self.safety_margin = margin;
        self
    }

    /// Continuous grid coordinates (column, row) of a global position.
    pub fn grid_coords(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.origin[0]) / self.resolution,
            (p[1] - self.origin[1]) / self.resolution,
        ]
    }

    /// Interpolation footprint, or `None` when `p` lies outside the grid's
    /// extent (half a cell beyond the outermost centers).
    pub fn stencil(&self, p: [f64; 2]) -> Option<Stencil> {
        let [gx, gy] = self.grid_coords(p);
        let (w, h) = (self.width as f64, self.height as f64);
        if !(gx >= -0.5 && gx <= w - 0.5 && gy >= -0.5 && gy <= h - 0.5) {
            return None;
        }
        let (j0, fx, clamped_x) = axis_footprint(gx, self.width);
        let (i0, fy, clamped_y) = axis_footprint(gy, self.height);
        let j1 = (j0 + 1).min(self.width - 1);
        let i1 = (i0 + 1).min(self.height - 1);
        Some(Stencil {
            i0,
            j0,
            fx,
            fy,
            clamped_x,
            clamped_y,
            corners: [
                self.value(i0, j0),
                self.value(i0, j1),
                self.value(i1, j0),
                self.value(i1, j1),
            ],
        })
    }

    /// Bilinear sample of the distance field at a global position; 0 outside
    /// the grid.
    pub fn sample(&self, p: [f64; 2]) -> f64 {
        self.stencil(p).map_or(0.0, |s| s.value())
    }

    /// Sample together with its gradient with respect to `p` (m/m).
    pub fn sample_with_gradient(&self, p: [f64; 2]) -> (f64, [f64; 2]) {
        let Some(s) = self.stencil(p) else {
            return (0.0, [0.0, 0.0]);
        };
        let [v00, v01, v10, v11] = s.corners;
        let dx = if s.clamped_x {
            0.0
        } else {
            ((1.0 - s.fy) * (v01 - v00) + s.fy * (v11 - v10)) / self.resolution
        };
        let dy = if s.clamped_y {
            0.0
        } else {
            ((1.0 - s.fx) * (v10 - v00) + s.fx * (v11 - v01)) / self.resolution
        };
        (s.value(), [dx, dy])
    }

    /// Same geometry, constant value everywhere.
    pub fn uniform_like(&self, value: f64) -> Result<DistanceMap> {
        uniform_map_at(
            self.height,
            self.width,
            self.resolution,
            self.origin,
            value,
            self.safety_margin,
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{DIST_MAGIC}");
        let _ = writeln!(out, "height={}", self.height);
        let _ = writeln!(out, "width={}", self.width);
        let _ = writeln!(out, "resolution_m={}", self.resolution);
        let _ = writeln!(out, "origin_x_m={}", self.origin[0]);
        let _ = writeln!(out, "origin_y_m={}", self.origin[1]);
        let _ = writeln!(out, "safety_margin_m={}", self.safety_margin);
        for row in self.values.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        let (header, start) = textfmt::read_header(&lines, DIST_MAGIC)?;
        let height: usize = header.require("height")?;
        let width: usize = header.require("width")?;
        let mut values = Vec::new();
        for (k, line) in lines[start..].iter().enumerate() {
            for tok in line.split_whitespace() {
                values.push(textfmt::parse_f64(tok, start + k + 1)?);
            }
        }
        Self::from_values(
            height,
            width,
            values,
            header.require("resolution_m")?,
            [header.require("origin_x_m")?, header.require("origin_y_m")?],
            header.require("safety_margin_m")?,
        )
    }
}

fn axis_footprint(g: f64, n: usize) -> (usize, f64, bool) {
    if n == 1 {
        return (0, 0.0, true);
    }
    let max = (n - 1) as f64;
    if g <= 0.0 {
        (0, 0.0, true)
    } else if g >= max {
        (n - 2, 1.0, true)
    } else {
        let k = (g.floor() as usize).min(n - 2);
        (k, g - k as f64, false)
    }
}

/// Exact 1-D squared distance transform (lower envelope of parabolas) over
/// the finite entries of `f`.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            let Some(&p) = v.last() else { break };
            let pf = p as f64;
            let s = ((fq + qf * qf) - (f[p] + pf * pf)) / (2.0 * qf - 2.0 * pf);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Euclidean distance transform in metric units, with the virtual obstacle
/// ring. Distances are measured between cell centers.
pub fn distance_transform(grid: &OccupancyGrid) -> DistanceMap {
    let (h, w) = (grid.height + 2, grid.width + 2);
    let mut f = vec![f64::INFINITY; h * w];
    for i in 0..h {
        for j in 0..w {
            let ring = i == 0 || j == 0 || i == h - 1 || j == w - 1;
            if ring || !grid.is_free(i - 1, j - 1) {
                f[i * w + j] = 0.0;
            }
        }
    }
    let (mut v, mut z) = (Vec::new(), Vec::new());
    // columns
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for j in 0..w {
        for i in 0..h {
            col[i] = f[i * w + j];
        }
        edt_1d(&col, &mut col_out, &mut v, &mut z);
        for i in 0..h {
            f[i * w + j] = col_out[i];
        }
    }
    // rows
    let mut row_out = vec![0.0; w];
    for i in 0..h {
        edt_1d(&f[i * w..(i + 1) * w], &mut row_out, &mut v, &mut z);
        f[i * w..(i + 1) * w].copy_from_slice(&row_out);
    }
    let r = grid.resolution;
    let mut values = Vec::with_capacity(grid.height * grid.width);
    for i in 1..h - 1 {
        for j in 1..w - 1 {
            values.push(f[i * w + j].sqrt() * r);
        }
    }
    DistanceMap {
        height: grid.height,
        width: grid.width,
        values,
        resolution: r,
        origin: grid.origin,
        safety_margin: SAFETY_MARGIN,
    }
}

fn uniform_map_at(
    height: usize,
    width: usize,
    resolution: f64,
    origin: [f64; 2],
    value: f64,
    safety_margin: f64,
) -> Result<DistanceMap> {
    if !(value >= safety_margin) {
        return Err(Error::InvalidArgument(format!(
            "uniform value {value} is below the safety margin {safety_margin}"
        )));
    }
    DistanceMap::from_values(
        height,
        width,
        vec![value; height * width],
        resolution,
        origin,
        safety_margin,
    )
}

/// Constant distance field carrying no map information. `value` must be at
/// least the safety margin so the feasibility penalty vanishes everywhere.
pub fn uniform_map(
    height: usize,
    width: usize,
    resolution: f64,
    value: f64,
) -> Result<DistanceMap> {
    uniform_map_at(height, width, resolution, [0.0, 0.0], value, SAFETY_MARGIN)
}
